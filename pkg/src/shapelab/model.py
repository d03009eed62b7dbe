"""Assembled multimodal model: vision encoder + connector + decoder LM.

Also holds batch preparation: tokenizing task examples into padded id
vectors, splicing projected image tokens into the embedding stream, and
building per-example attention masks and loss weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from . import layout as L
from .connector import Connector, ConnectorConfig
from .lm import DecoderLM, LMConfig, rope_positions
from .tensor import ParamTree, Tensor
from .vit import RAW_PATCH, VIT, EncoderConfig, VitEncoder
from .vocab import VocabSpec, encode_text


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    text_len: int = 64           # BOS + prefix + SEP + suffix + EOS + PAD budget
    n_images: int = 1            # images per example (2 for the paired task)

    @property
    def n_img(self):
        return self.encoder.n_img * self.n_images

    @property
    def total_len(self):
        return self.n_img + self.text_len

    def to_dict(self):
        return dict(encoder=self.encoder.to_dict(),
                    connector=self.connector.to_dict(),
                    lm=self.lm.to_dict(), text_len=self.text_len,
                    n_images=self.n_images)

    @classmethod
    def from_dict(cls, d):
        return cls(encoder=EncoderConfig.from_dict(d["encoder"]),
                   connector=ConnectorConfig.from_dict(d["connector"]),
                   lm=LMConfig.from_dict(d["lm"]),
                   text_len=d["text_len"], n_images=d["n_images"])


class MultimodalModel:
    def __init__(self, cfg, rng=None, params=None, vocab=None):
        self.cfg = cfg
        self.vocab = vocab or VocabSpec()
        if params is not None:
            self.params = params
            self.vit = VitEncoder(cfg.encoder, params=params.subtree("vit"))
            self.connector = Connector(cfg.connector,
                                       params=params.subtree("connector"))
            self.lm = DecoderLM(cfg.lm, params=params.subtree("lm"))
            return
        rng = rng or np.random.default_rng(0)
        self.vit = VitEncoder(cfg.encoder, rng=rng)
        self.connector = Connector(cfg.connector, rng=rng)
        self.lm = DecoderLM(cfg.lm, rng=rng)
        self.params = ParamTree()
        for sub in (self.vit.params, self.connector.params, self.lm.params):
            self.params.update(sub)

    def replace_params(self, params):
        return MultimodalModel(self.cfg, params=params, vocab=self.vocab)

    def image_tokens(self, images, window=False):
        """[B, n_images, res, res, 3] pixels -> [B, n_img, d_lm] embeddings."""
        images = np.asarray(images, dtype=np.float32)
        b = images.shape[0]
        blocks = []
        for j in range(images.shape[1]):
            img = images[:, j]
            if self.cfg.encoder.mode == RAW_PATCH:
                blocks.append(self.vit.raw_patch_embed(img))
            elif window:
                enc = self.vit.window_encode(img,
                                             window_ids=self.cfg.encoder.window_ids)
                blocks.append(self.connector.project(enc))
            else:
                blocks.append(self.connector.project(self.vit.encode(img)))
        return blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=1)

    def embed_inputs(self, ids, img_tokens, n_img):
        """Token ids [B, T] (sentinel at image slots) -> [B, T, d_lm]."""
        text_ids = np.asarray(ids)[:, n_img:]
        if (text_ids < 0).any():
            raise ValueError("image sentinel found outside the image block")
        text_emb = self.lm.embed(text_ids)
        return T.concat([img_tokens, text_emb], axis=1)

    def forward(self, ids, images, masks, positions=None, training=False,
                rng=None, window=False):
        n_img = self.cfg.n_img * (4 if window else 1)
        img_tokens = self.image_tokens(images, window=window)
        x = self.embed_inputs(ids, img_tokens, n_img)
        if positions is None:
            positions = np.arange(x.shape[1], dtype=np.float32)
        return self.lm.forward(x, masks, positions, training=training, rng=rng)


def prepare_batch(examples, cfg, vocab=None,
                  mask_mode=L.MaskMode.PREFIX_LM, loss_mode=L.LossMode(),
                  window=False):
    """Tokenize and pad a list of TaskExamples into batched model inputs."""
    vocab = vocab or VocabSpec()
    n_img = cfg.n_img * (4 if window else 1)
    total = n_img + cfg.text_len
    b = len(examples)
    ids = np.zeros((b, total), dtype=np.int64)
    masks = np.zeros((b, total, total), dtype=bool)
    weights = np.zeros((b, total), dtype=np.float32)
    images = np.stack([np.stack(ex.images) for ex in examples])
    layouts = []
    for i, ex in enumerate(examples):
        p_ids = encode_text(ex.prefix, vocab, for_prefix=True)
        s_ids = encode_text(ex.suffix, vocab)
        row, lay = L.assemble(n_img, p_ids, s_ids, total, vocab)
        ids[i] = row
        masks[i] = L.attention_mask(lay, mask_mode)
        weights[i] = L.loss_weights(lay, loss_mode, mask_mode)
        layouts.append(lay)
    return {"ids": ids, "masks": masks, "weights": weights,
            "images": images, "layouts": layouts}


def batch_loss(model, batch, smoothing=0.0, training=False, rng=None,
               window=False):
    """Suffix-weighted smoothed cross-entropy over a prepared batch."""
    ids = batch["ids"]
    logits = model.forward(ids, batch["images"], batch["masks"],
                           training=training, rng=rng, window=window)
    # predict token at position t from logits at t-1
    targets = np.where(ids[:, 1:] < 0, 0, ids[:, 1:])
    weights = batch["weights"][:, 1:]
    if weights.sum() <= 0:
        raise ValueError("batch has no supervised positions (empty suffixes?)")
    shifted = T.getitem(logits, (slice(None), slice(0, ids.shape[1] - 1)))
    return T.softmax_xent(shifted, targets, weights, smoothing)
