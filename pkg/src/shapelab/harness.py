"""Ablation grids, seed-variance reports, and limited-data sweeps.

Every runner returns plain row dicts (run_id, axis, variant, seed, task,
metric, value) and can dump them to CSV; report assembly (regret math,
bar plots) works from stored rows alone, so figures are regenerable
without re-training.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import shapeworld as SW
from .layout import MaskMode
from .lm import AVG_EMB, GAUSSIAN, InitStrategy
from .metrics import relative_regret
from .model import MultimodalModel, batch_loss, prepare_batch
from .train import (FREEZE, RESET_TRAIN, TRAIN, FreezePlan, TransferHParams,
                    run_stage, run_transfer, validation_perplexity)
from .util import rng_from
from .vit import RAW_PATCH, VIT

AXES = ("mask_mode", "freeze", "init", "connector", "encoder", "duration",
        "resolution", "stage2_reweight")


@dataclass(frozen=True)
class AblationGrid:
    axis: str
    variants: tuple
    reference: str
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown ablation axis {self.axis!r}")
        if self.reference not in self.variants:
            raise ValueError("reference variant must be one of the variants")
        if len(set(self.variants)) != len(self.variants):
            raise ValueError("duplicate variants")


FREEZE_VARIANTS = {
    "TT": FreezePlan(vit=TRAIN, connector=TRAIN, llm=TRAIN),
    "TF": FreezePlan(vit=FREEZE, connector=TRAIN, llm=TRAIN),
    "FF": FreezePlan(vit=FREEZE, connector=TRAIN, llm=FREEZE),
    "reset_llm": FreezePlan(llm=RESET_TRAIN),
    "reset_vit": FreezePlan(vit=RESET_TRAIN),
}

DURATION_FRACTIONS = {"full": 1.0, "third": 1 / 3, "tenth": 1 / 10,
                      "thirtieth": 1 / 30, "skip_stage1": 0.0}

SKIP_STAGE1_LRS = (3e-5, 1e-5, 3e-6)


def _variant_plan(axis, variant, base):
    """Base TrainPlan mutated for one ablation cell. Returns (plan, extras)."""
    extras = {}
    plan = base
    if axis == "mask_mode":
        plan = replace(base, mask_mode=MaskMode(variant))
    elif axis == "freeze":
        if variant not in FREEZE_VARIANTS:
            raise ValueError(f"unknown freeze variant {variant!r}")
        plan = replace(base, freeze=FREEZE_VARIANTS[variant])
    elif axis == "init":
        if variant not in (GAUSSIAN, AVG_EMB):
            raise ValueError(f"unknown init variant {variant!r}")
        extras["init_strategy"] = InitStrategy(kind=variant)
    elif axis == "connector":
        cfg = replace(base.model,
                      connector=replace(base.model.connector, kind=variant))
        plan = replace(base, model=cfg)
    elif axis == "encoder":
        if variant not in (VIT, RAW_PATCH):
            raise ValueError(f"unknown encoder variant {variant!r}")
        cfg = replace(base.model,
                      encoder=replace(base.model.encoder, mode=variant))
        plan = replace(base, model=cfg)
    elif axis == "duration":
        frac = DURATION_FRACTIONS[variant]
        plan = replace(base, steps=max(1, int(round(base.steps * frac))))
        if variant == "skip_stage1":
            plan = replace(plan, steps=0)
            extras["transfer_lrs"] = SKIP_STAGE1_LRS
    elif axis == "stage2_reweight":
        if variant == "off":
            mix = replace(base.mixture, stage2_reweight={})
            plan = replace(base, mixture=mix)
        elif variant != "on":
            raise ValueError(f"unknown reweight variant {variant!r}")
    elif axis == "resolution":
        extras["resolution_path"] = variant
    return plan, extras


def _new_token_ids(vocab):
    from .vocab import N_LOC, N_SEG
    loc = np.arange(vocab.loc_start, vocab.loc_start + N_LOC)
    seg = np.arange(vocab.seg_start, vocab.seg_start + N_SEG)
    return np.concatenate([loc, seg])


def _loc_seg_step0_loss(model, plan, vq, seed):
    """Loss before any training on detection/segmentation suffixes."""
    rng = rng_from(seed, "step0")
    seeds = SW.SeedStream(950_000, 960_000)
    weights = {"detect": 1.0}
    if vq is not None:
        weights["segment"] = 1.0
    mix = SW.MixtureSpec(weights=weights)
    examples = SW.sample_batch(mix, 1, 8, rng, seeds,
                               res=plan.model.encoder.res,
                               difficulty=plan.difficulty, vq=vq,
                               max_text_tokens=plan.model.text_len,
                               vocab=model.vocab)
    prepared = prepare_batch(examples, plan.model, model.vocab,
                             plan.mask_mode, plan.loss_mode)
    return batch_loss(model, prepared).item()


def _run_variant(grid, variant, seed, base_plan, vq=None, transfer_suite=None,
                 log_every=0):
    """One grid cell: pretrain at the cell's plan, then score. Divergence is
    recorded as a failed row instead of raising."""
    plan, extras = _variant_plan(grid.axis, variant, base_plan)
    plan = replace(plan, seed=seed)
    run_id = f"{grid.axis}-{variant}-s{seed}"
    rows = []

    def row(task, metric, value):
        rows.append({"run_id": run_id, "axis": grid.axis, "variant": variant,
                     "seed": seed, "task": task, "metric": metric,
                     "value": value})

    init_strategy = extras.get("init_strategy")
    if init_strategy is not None:
        model = MultimodalModel(plan.model, rng=rng_from(seed, "init"))
        model.lm.init_new_tokens(_new_token_ids(model.vocab), init_strategy,
                                 rng_from(seed, "newtok"))
        row("loc_seg", "step0_loss", _loc_seg_step0_loss(model, plan, vq, seed))
        from .checkpoint import Checkpoint
        plan = replace(plan, resume_from=Checkpoint(
            params=model.params, model_config=plan.model.to_dict()))
    try:
        if plan.steps > 0:
            ckpt, metrics = run_stage(plan, vq=vq, log_every=log_every)
            model = MultimodalModel(plan.model, params=ckpt.params,
                                    vocab=ckpt.vocab)
            row("pretrain", "final_loss", metrics[-1]["loss"])
            for tag, ppl in validation_perplexity(model, plan, vq).items():
                row(tag, "val_perplexity", ppl)
        else:
            from .checkpoint import Checkpoint
            model = MultimodalModel(plan.model, rng=rng_from(seed, "init"))
            ckpt = Checkpoint(params=model.params,
                              model_config=plan.model.to_dict())
    except RuntimeError as exc:   # divergence is data, not a crash
        row("pretrain", "diverged", float("nan"))
        return rows
    if transfer_suite:
        lrs = extras.get("transfer_lrs", (None,))
        for kind, train_set, eval_fn, hparams in transfer_suite:
            best = None
            for lr in lrs:
                hp = hparams if lr is None else replace(hparams, lr=lr)
                hp = replace(hp, seed=seed)
                _, score = run_transfer(ckpt, train_set, hp, eval_fn=eval_fn)
                best = score if best is None else max(best, score)
            row(kind, "transfer_score", best)
    return rows


def run_ablation(grid, base_plan, vq=None, transfer_suite=None, out_dir=None,
                 log_every=0):
    """Run a full variant x seed grid; returns raw rows.

    ``transfer_suite`` is an optional list of (kind, train_set, eval_fn,
    hparams) tuples appended after each pretrain. When ``out_dir`` is given
    the raw rows, the regret summary, and an SVG bar plot are written there.
    """
    rows = []
    for variant in grid.variants:
        for seed in grid.seeds:
            rows.extend(_run_variant(grid, variant, seed, base_plan, vq=vq,
                                     transfer_suite=transfer_suite,
                                     log_every=log_every))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_rows(os.path.join(out_dir, f"ablation_{grid.axis}.csv"), rows)
        summary = regret_summary(rows, grid)
        write_rows(os.path.join(out_dir,
                                f"ablation_{grid.axis}_regret.csv"), summary)
        plot_ablation(rows, grid,
                      os.path.join(out_dir, f"ablation_{grid.axis}.svg"))
    return rows


LOWER_IS_BETTER = {"val_perplexity", "final_loss", "step0_loss", "diverged"}


def regret_summary(rows, grid):
    """Per-(task, metric) seed-mean relative regret of each variant vs the
    reference variant."""
    by = {}
    for r in rows:
        by.setdefault((r["variant"], r["task"], r["metric"]), []).append(
            r["value"])
    out = []
    tasks = sorted({(t, m) for _, t, m in by})
    for task, metric in tasks:
        ref_vals = by.get((grid.reference, task, metric))
        if not ref_vals or not np.isfinite(ref_vals).all():
            continue
        ref = float(np.mean(ref_vals))
        for variant in grid.variants:
            vals = by.get((variant, task, metric))
            if not vals:
                continue
            mean = float(np.mean(vals))
            regret = (relative_regret(
                mean, ref, higher_is_better=metric not in LOWER_IS_BETTER)
                if np.isfinite(mean) and ref != 0 else float("nan"))
            out.append({"axis": grid.axis, "variant": variant, "task": task,
                        "metric": metric, "mean": mean,
                        "stddev": float(np.std(vals)), "regret": regret})
    return out


def plot_ablation(rows, grid, out_path):
    """Bar plot of seed-mean values per variant with per-seed markers."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = sorted({(r["task"], r["metric"]) for r in rows
                   if np.isfinite(r["value"])})
    fig, axes = plt.subplots(1, max(len(keys), 1),
                             figsize=(3.2 * max(len(keys), 1), 3.2),
                             squeeze=False)
    for ax, (task, metric) in zip(axes[0], keys):
        names, means = [], []
        for variant in grid.variants:
            vals = [r["value"] for r in rows
                    if r["variant"] == variant and r["task"] == task
                    and r["metric"] == metric and np.isfinite(r["value"])]
            if not vals:
                continue
            names.append(variant)
            means.append(float(np.mean(vals)))
            x = len(names) - 1
            ax.scatter([x] * len(vals), vals, color="k", s=12, zorder=3)
        ax.bar(range(len(names)), means, color="#7aa6c2", zorder=2)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_title(f"{task}: {metric}", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def write_rows(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# -- seed variance ---------------------------------------------------------------

def run_variance(run_fn, seeds, out_path=None):
    """Repeat ``run_fn(seed) -> {task: value}`` and report per-task spread.

    Returns summary rows in the mean-plus-minus-stddev style; ``seeds`` may
    repeat a value to probe determinism (stddev must then be 0).
    """
    if len(seeds) < 3:
        raise ValueError("variance report needs at least 3 runs")
    per_task = {}
    for seed in seeds:
        result = run_fn(seed)
        for task, value in result.items():
            per_task.setdefault(task, []).append(float(value))
    rows = []
    for task in sorted(per_task):
        vals = np.array(per_task[task])
        rows.append({"task": task, "n_runs": len(vals),
                     "mean": float(vals.mean()),
                     "stddev": float(vals.std()),
                     "min": float(vals.min()), "max": float(vals.max())})
    if out_path:
        write_rows(out_path, rows)
    return rows


def pretrain_variance(base_plan, seeds, vq=None, out_path=None):
    """Seed-to-seed spread of pretraining validation perplexities."""

    def one(seed):
        plan = replace(base_plan, seed=seed)
        ckpt, metrics = run_stage(plan, vq=vq)
        model = MultimodalModel(plan.model, params=ckpt.params,
                                vocab=ckpt.vocab)
        out = {"final_loss": metrics[-1]["loss"]}
        out.update(validation_perplexity(model, plan, vq))
        return out

    return run_variance(one, seeds, out_path=out_path)


# -- limited-data transfers --------------------------------------------------------

LOWDATA_SIZES = (64, 256, 1024, 4096)

DEFAULT_SWEEP = (
    TransferHParams(lr=3e-5, epochs=10),
    TransferHParams(lr=1e-5, epochs=30),
    TransferHParams(lr=3e-6, epochs=100),
)


def run_lowdata(ckpt, train_set, eval_fn, sizes=LOWDATA_SIZES,
                sweeps=DEFAULT_SWEEP, n_seeds=5, out_path=None):
    """Best-over-sweep transfer score per training-set size.

    The final (largest feasible) size acts as the full-data reference; the
    report carries per-seed scores and the best-per-size relative regret.
    """
    sizes = sorted(set(min(s, len(train_set)) for s in sizes))
    rows = []
    best_per_size = {}
    for size in sizes:
        best = -math.inf
        for si, hp in enumerate(sweeps):
            for seed in range(n_seeds):
                hp_run = replace(hp, seed=seed, max_examples=size)
                _, score = run_transfer(ckpt, train_set, hp_run,
                                        eval_fn=eval_fn)
                rows.append({"size": size, "sweep": si, "lr": hp.lr,
                             "epochs": hp.epochs, "seed": seed,
                             "score": score})
                best = max(best, score)
        best_per_size[size] = best
    ref = best_per_size[sizes[-1]]
    for r in rows:
        r["best_for_size"] = best_per_size[r["size"]]
        r["regret_vs_full"] = (relative_regret(best_per_size[r["size"]], ref)
                               if ref != 0 else float("nan"))
    if out_path:
        write_rows(out_path, rows)
    return rows
