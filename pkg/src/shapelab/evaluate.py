"""Decoding-based evaluation of a model on task datasets."""

from __future__ import annotations

import numpy as np

from .codec import mask_decode, parse_segmentation
from .infer import BEAM, GREEDY, DecodeConfig, decode_text_output
from .metrics import MetricResult, exact_match, miou

TASK_METRIC = {
    "counting": "count_accuracy",
    "refseg": "mIoU",
    "two_image": "pair_accuracy",
    "redbox_caption": "exact_match",
}


def predict_suffix(model, example, beam=1, max_new_tokens=48, window=False,
                   prefix_override=None):
    cfg = DecodeConfig(mode=BEAM if beam > 1 else GREEDY, beam_width=beam,
                       max_new_tokens=max_new_tokens)
    images = np.stack(example.images)
    prefix = prefix_override if prefix_override is not None else example.prefix
    text, score = decode_text_output(model, images, prefix, cfg,
                                     window=window)
    return text, score


def score_example(model, example, kind, vq=None, beam=1, window=False):
    pred, _ = predict_suffix(model, example, beam=beam, window=window)
    if kind == "refseg":
        if vq is None:
            raise ValueError("refseg scoring needs the VQ model")
        res = example.images[0].shape[0]
        gold = example.meta["mask"]
        try:
            insts = parse_segmentation(pred, model.vocab)
        except ValueError:
            return 0.0
        if not insts:
            return 0.0
        box, seg_ids, _ = insts[0]
        pred_mask = mask_decode(seg_ids, box, res, vq, model.vocab)
        return miou(pred_mask, gold)
    return exact_match(pred, example.suffix)


def evaluate_examples(model, examples, kind, vq=None, beam=1, seed=0,
                      window=False):
    """Mean task metric over a dataset; returns a MetricResult."""
    vals = [score_example(model, ex, kind, vq=vq, beam=beam, window=window)
            for ex in examples]
    return MetricResult(task=kind,
                        metric=TASK_METRIC.get(kind, "exact_match"),
                        value=float(np.mean(vals)) if vals else 0.0,
                        seed=seed, n_examples=len(examples))


def make_eval_fn(examples, kind, vq=None, beam=1, seed=0, window=False):
    """Closure suitable for run_transfer's eval_fn hook."""

    def fn(model):
        return evaluate_examples(model, examples, kind, vq=vq, beam=beam,
                                 seed=seed, window=window).value

    return fn
