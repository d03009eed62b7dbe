"""Command-line surface.

Every run writes a resolved (fully defaulted) copy of its configuration
next to its outputs. Exit codes: 0 success, 1 config/validation error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as C
from . import shapeworld as SW
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import (box_decode, box_encode, Box, mask_decode, mask_encode)
from .evaluate import evaluate_examples, make_eval_fn
from .harness import run_ablation, write_rows
from .infer import DecodeConfig, bench, decode_text_output
from .model import ModelConfig, MultimodalModel
from .train import run_stage, run_transfer, train_vqvae
from .util import rle_encode, rng_from
from .vocab import VocabSpec


def _save_png(path, raster):
    from PIL import Image
    arr = np.clip(np.asarray(raster) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_png(path):
    from PIL import Image
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _load_model(path):
    ckpt = load_checkpoint(path)
    cfg = ModelConfig.from_dict(ckpt.model_config)
    return MultimodalModel(cfg, params=ckpt.params, vocab=ckpt.vocab), ckpt


def _transfer_set(task, n, res, seed_base=500_000, vq=None):
    seeds = SW.SeedStream(seed_base, seed_base + 200_000)
    return SW.build_transfer_set(task, n, seeds, res=res, vq=vq)


TRANSFER_TASKS = ("counting", "refseg", "two_image", "redbox_caption")


# -- subcommands -------------------------------------------------------------------

def cmd_pretrain(args):
    raw = C.load_config(args.config) if args.config else {}
    plan = C.train_plan_from_dict(raw)
    plan = replace(plan, stage=args.stage)
    if args.resume:
        plan = replace(plan, resume_from=args.resume)
    if args.steps:
        plan = replace(plan, steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    C.write_resolved(plan, os.path.join(args.out, "resolved_config.json"))
    vq = None
    if args.vq:
        vq = load_vq(args.vq)
    ckpt, _ = run_stage(plan, out_dir=args.out, vq=vq,
                        log_every=args.log_every)
    path = os.path.join(args.out, f"stage{plan.stage}.ckpt")
    save_checkpoint(ckpt, path)
    print(path)
    return 0


def cmd_transfer(args):
    raw = C.load_config(args.config) if args.config else {}
    hp = C.transfer_hparams_from_dict(raw)
    ckpt = load_checkpoint(args.ckpt)
    res = ModelConfig.from_dict(ckpt.model_config).encoder.res
    vq = load_vq(args.vq) if args.vq else None
    if args.task == "refseg" and vq is None:
        raise C.ConfigError("refseg transfer requires --vq")
    train_set = _transfer_set(args.task, args.n_train, res, vq=vq)
    eval_set = _transfer_set(args.task, args.n_eval, res,
                             seed_base=700_000, vq=vq)
    os.makedirs(args.out, exist_ok=True)
    C.write_resolved(hp, os.path.join(args.out, "resolved_config.json"))
    eval_fn = make_eval_fn(eval_set, args.task, vq=vq, beam=hp.beam)
    model, score = run_transfer(ckpt, train_set, hp, eval_fn=eval_fn,
                                log_every=args.log_every)
    out_ckpt = Checkpoint(params=model.params,
                          model_config=model.cfg.to_dict(),
                          global_step=ckpt.global_step, stage=3,
                          vocab=model.vocab,
                          extra={"task": args.task, "score": score})
    path = os.path.join(args.out, f"transfer_{args.task}.ckpt")
    save_checkpoint(out_ckpt, path)
    with open(os.path.join(args.out, "score.json"), "w") as fh:
        json.dump({"task": args.task, "score": score}, fh, indent=2)
    print(f"{args.task} score {score}")
    return 0


def cmd_eval(args):
    model, ckpt = _load_model(args.ckpt)
    vq = load_vq(args.vq) if args.vq else None
    base = {"train": 500_000, "val": 700_000, "test": 760_000}[args.split]
    examples = _transfer_set(args.task, args.n, model.cfg.encoder.res,
                             seed_base=base, vq=vq)
    result = evaluate_examples(model, examples, args.task, vq=vq,
                               beam=args.beam)
    row = {"task": result.task, "metric": result.metric,
           "value": result.value, "n_examples": result.n_examples,
           "split": args.split}
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        write_rows(args.out, [row])
    print(json.dumps(row))
    return 0


def cmd_decode(args):
    model, _ = _load_model(args.ckpt)
    image = _load_png(args.image)
    if image.shape[0] != model.cfg.encoder.res:
        raise C.ConfigError(
            f"image is {image.shape[0]}px, model expects "
            f"{model.cfg.encoder.res}px")
    cfg = DecodeConfig(mode="beam" if args.beam > 1 else "greedy",
                       beam_width=args.beam,
                       max_new_tokens=args.max_new_tokens)
    text, score = decode_text_output(model, image[None], args.prefix, cfg)
    print(text)
    return 0


def cmd_ablate(args):
    raw = C.load_config(args.grid)
    grid = C.grid_from_dict(raw.get("grid", {}), "grid")
    base = (C.train_plan_from_dict(raw["plan"], "plan") if "plan" in raw
            else C.ablation_base_plan())
    if args.steps:
        base = replace(base, steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    C.write_resolved({"grid": grid, "plan": base},
                     os.path.join(args.out, "resolved_config.json"))
    vq = load_vq(args.vq) if args.vq else None
    run_ablation(grid, base, vq=vq, out_dir=args.out,
                 log_every=args.log_every)
    print(os.path.join(args.out, f"ablation_{grid.axis}.csv"))
    return 0


def cmd_bench(args):
    model, _ = _load_model(args.ckpt)
    batches = [int(b) for b in args.batch.split(",")]
    rows = bench(model, batch_sizes=batches, prefill_len=args.prefill,
                 cache_capacity=args.cache, repeats=args.repeats)
    write_rows(args.out, rows)
    print(args.out)
    return 0


def cmd_codec(args):
    vocab = VocabSpec()
    if args.what == "box":
        vals = [float(v) for v in args.values.split(",")]
        if args.action == "encode":
            ids = box_encode(Box(*vals), vocab)
            print(" ".join(f"<loc{vocab.loc_bin(t):04d}>" for t in ids))
        else:
            box = box_decode([vocab.loc_id(int(v)) for v in vals], vocab)
            print(f"{box.ymin},{box.xmin},{box.ymax},{box.xmax}")
    else:
        vq = load_vq(args.vq)
        if args.action == "encode":
            mask = np.asarray(_load_png(args.values).mean(axis=-1) > 0.5)
            box = Box(0.0, 0.0, 1.0, 1.0)
            ids = mask_encode(mask, box, vq, vocab)
            print(" ".join(f"<seg{vocab.seg_code(t):03d}>" for t in ids))
        else:
            codes = [vocab.seg_id(int(v)) for v in args.values.split(",")]
            mask = mask_decode(codes, Box(0.0, 0.0, 1.0, 1.0), args.res, vq,
                               vocab)
            _save_png(args.out, np.repeat(mask[:, :, None], 3, axis=-1))
            print(args.out)
    return 0


def cmd_data(args):
    os.makedirs(args.out, exist_ok=True)
    vq = load_vq(args.vq) if args.vq else None
    vocab = VocabSpec()
    if args.action == "generate":
        diff = SW.Difficulty(min_objects=1, max_objects=args.max_objects)
        for i in range(args.n):
            scene = SW.generate_scene(args.seed + i, args.res, diff)
            _save_png(os.path.join(args.out, f"scene_{args.seed + i}.png"),
                      scene.raster)
        print(args.out)
        return 0
    # export: rendered scenes plus a JSON-lines annotation file
    mix = SW.MixtureSpec()
    weights = mix.stage_weights(1)
    if vq is None:
        weights.pop("segment", None)
    tags = sorted(weights)
    probs = np.array([weights[t] for t in tags])
    probs = probs / probs.sum()
    rng = rng_from(args.seed, "export")
    diff = SW.Difficulty(min_objects=1, max_objects=args.max_objects)
    meta_path = os.path.join(args.out, "examples.jsonl")
    written, seed = 0, args.seed
    with open(meta_path, "w") as fh:
        while written < args.n:
            scene = SW.generate_scene(seed, args.res, diff)
            tag = tags[rng.choice(len(tags), p=probs)]
            seed += 1
            try:
                ex = SW.build_task(scene, tag, rng, vq=vq,
                                   max_suffix_chars=mix.max_suffix_len[1])
            except ValueError:
                continue
            png = f"example_{written:05d}.png"
            _save_png(os.path.join(args.out, png), ex.images[0])
            fh.write(json.dumps({
                "image": png, "seed": scene.seed, "task_tag": ex.task_tag,
                "prefix": ex.prefix, "suffix": ex.suffix,
                "boxes": [[o.box.ymin, o.box.xmin, o.box.ymax, o.box.xmax]
                          for o in scene.objects],
                "masks": [rle_encode(o.mask) for o in scene.objects],
            }) + "\n")
            written += 1
    print(meta_path)
    return 0


def cmd_vqvae(args):
    vq, history, dead = train_vqvae(steps=args.steps, seed=args.seed,
                                    log_every=args.log_every)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    save_vq(vq, args.out)
    print(f"{args.out} (final loss {history[-1]['total']:.4f}, "
          f"{len(dead)} dead codes)")
    return 0


# -- VQ model container -------------------------------------------------------------

def save_vq(vq, path):
    ckpt = Checkpoint(params=vq.params, model_config=vq.cfg.to_dict(),
                      extra={"kind": "vqvae"})
    save_checkpoint(ckpt, path)


def load_vq(path):
    from .codec import VqConfig, VqvaeModel
    ckpt = load_checkpoint(path)
    if ckpt.extra.get("kind") != "vqvae":
        raise C.ConfigError(f"{path} is not a VQ-VAE checkpoint")
    return VqvaeModel(VqConfig(**ckpt.model_config), params=ckpt.params)


# -- parser -----------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(
        prog="shapelab",
        description="Desk-scale vision-language training laboratory")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("pretrain", help="run a pretraining stage")
    p.add_argument("--config", help="JSON TrainPlan config")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--resume", help="checkpoint to resume/upcycle from")
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--vq", help="VQ-VAE checkpoint (enables segment tasks)")
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("transfer", help="fine-tune on a transfer task")
    p.add_argument("--config", help="JSON TransferHParams config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", choices=TRANSFER_TASKS, required=True)
    p.add_argument("--vq")
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-eval", type=int, default=100)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("eval", help="score a checkpoint on a task split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", choices=TRANSFER_TASKS, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--vq")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("decode", help="decode a suffix for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--prefix", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--grid", required=True, help="JSON grid (+optional plan)")
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--vq")
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench", help="prefill/extend throughput report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--batch", default="1,8,64")
    p.add_argument("--prefill", type=int, default=None)
    p.add_argument("--cache", type=int, default=None)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("codec", help="box/mask token codec debugging")
    p.add_argument("what", choices=("box", "mask"))
    p.add_argument("action", choices=("encode", "decode"))
    p.add_argument("values", help="comma floats / ids / PNG path")
    p.add_argument("--vq")
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--out", default="mask.png")
    p.set_defaults(fn=cmd_codec)

    p = sub.add_parser("data", help="generate or export shape-world data")
    p.add_argument("action", choices=("generate", "export"))
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--vq")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_data)

    p = sub.add_parser("vqvae", help="train the mask tokenizer")
    p.add_argument("--steps", type=int, default=800)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_vqvae)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (C.ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
