"""Ablation grid, regret math, variance report, and low-data sweeps."""

import csv
import os

import numpy as np
import pytest

from shapelab.connector import ConnectorConfig
from shapelab.harness import (AXES, AblationGrid, DURATION_FRACTIONS,
                              FREEZE_VARIANTS, LOWER_IS_BETTER,
                              plot_ablation, pretrain_variance,
                              regret_summary, run_ablation, run_lowdata,
                              run_variance, write_rows, _variant_plan)
from shapelab.layout import MaskMode
from shapelab.lm import LMConfig
from shapelab.metrics import relative_regret
from shapelab.model import ModelConfig
from shapelab.shapeworld import MixtureSpec, SeedStream, build_transfer_set
from shapelab.train import (FREEZE, SchedulePlan, TrainPlan, TransferHParams,
                            run_stage)
from shapelab.vit import EncoderConfig, RAW_PATCH


def tiny_plan(**kw):
    model = ModelConfig(
        encoder=EncoderConfig(res=16, patch=8, d_vit=16, depth=1, heads=2,
                              d_out=24),
        connector=ConnectorConfig(d_vit=16, d_lm=24),
        lm=LMConfig(d_lm=24, depth=1, heads=2, max_len=96),
        text_len=80)
    base = dict(model=model,
                mixture=MixtureSpec(weights={"caption": 1.0, "count": 1.0}),
                schedule=SchedulePlan(peak=1e-3, warmup_steps=2, timescale=10),
                batch_size=2, steps=2, seed=0,
                val_tasks=("count",), val_batch=2)
    base.update(kw)
    return TrainPlan(**base)


def test_grid_validation():
    with pytest.raises(ValueError, match="axis"):
        AblationGrid("nonsense", ("a", "b"), "a")
    with pytest.raises(ValueError, match="reference"):
        AblationGrid("freeze", ("TT", "TF"), "FF")
    with pytest.raises(ValueError, match="duplicate"):
        AblationGrid("freeze", ("TT", "TT"), "TT")
    g = AblationGrid("mask_mode", ("prefix_lm", "ar_all"), "prefix_lm")
    assert g.seeds == (0, 1, 2)


def test_variant_plan_mutations():
    base = tiny_plan()
    plan, _ = _variant_plan("mask_mode", "ar_all", base)
    assert plan.mask_mode == MaskMode.AR_ALL
    plan, _ = _variant_plan("freeze", "TF", base)
    assert plan.freeze == FREEZE_VARIANTS["TF"]
    plan, _ = _variant_plan("connector", "mlp", base)
    assert plan.model.connector.kind == "mlp"
    plan, _ = _variant_plan("encoder", RAW_PATCH, base)
    assert plan.model.encoder.mode == RAW_PATCH
    plan, _ = _variant_plan("duration", "tenth", base)
    assert plan.steps == max(1, round(base.steps / 10))
    plan, extras = _variant_plan("duration", "skip_stage1", base)
    assert plan.steps == 0 and extras["transfer_lrs"]
    plan, _ = _variant_plan("stage2_reweight", "off", base)
    assert plan.mixture.stage2_reweight == {}
    with pytest.raises(ValueError):
        _variant_plan("freeze", "nonsense", base)
    with pytest.raises(ValueError):
        _variant_plan("init", "nonsense", base)


def test_regret_summary_math():
    grid = AblationGrid("mask_mode", ("ref", "worse"), "ref", seeds=(0, 1))

    def mk(variant, vals, metric="transfer_score"):
        return [{"run_id": "x", "axis": "mask_mode", "variant": variant,
                 "seed": s, "task": "counting", "metric": metric, "value": v}
                for s, v in enumerate(vals)]

    rows = mk("ref", [0.8, 1.0]) + mk("worse", [0.45, 0.45])
    out = regret_summary(rows, grid)
    ref_row = next(r for r in out if r["variant"] == "ref")
    worse_row = next(r for r in out if r["variant"] == "worse")
    assert ref_row["regret"] == pytest.approx(0.0)
    # seed means: ref 0.9, worse 0.45; higher-is-better regret = 0.5
    assert worse_row["regret"] == pytest.approx(0.5)
    assert worse_row["mean"] == pytest.approx(0.45)
    assert ref_row["stddev"] == pytest.approx(np.std([0.8, 1.0]))

    # lower-is-better metric flips the sign convention
    rows = (mk("ref", [2.0, 2.0], metric="val_perplexity")
            + mk("worse", [3.0, 3.0], metric="val_perplexity"))
    out = regret_summary(rows, grid)
    worse_row = next(r for r in out if r["variant"] == "worse")
    assert worse_row["regret"] == pytest.approx(0.5)  # 50% worse
    assert "val_perplexity" in LOWER_IS_BETTER


def test_regret_summary_skips_nan_reference():
    grid = AblationGrid("mask_mode", ("ref", "v"), "ref", seeds=(0,))
    rows = [{"run_id": "x", "axis": "mask_mode", "variant": "ref", "seed": 0,
             "task": "pretrain", "metric": "diverged", "value": float("nan")},
            {"run_id": "x", "axis": "mask_mode", "variant": "v", "seed": 0,
             "task": "pretrain", "metric": "diverged", "value": float("nan")}]
    assert regret_summary(rows, grid) == []


def test_run_ablation_writes_reports(tmp_path):
    grid = AblationGrid("mask_mode", ("prefix_lm", "ar_all"), "prefix_lm",
                        seeds=(0,))
    rows = run_ablation(grid, tiny_plan(), out_dir=str(tmp_path))
    assert {r["variant"] for r in rows} == {"prefix_lm", "ar_all"}
    assert (tmp_path / "ablation_mask_mode.csv").exists()
    assert (tmp_path / "ablation_mask_mode_regret.csv").exists()
    svg = (tmp_path / "ablation_mask_mode.svg").read_text()
    assert svg.lstrip().startswith("<?xml")
    with open(tmp_path / "ablation_mask_mode.csv") as fh:
        read = list(csv.DictReader(fh))
    assert len(read) == len(rows)
    assert set(read[0]) == {"run_id", "axis", "variant", "seed", "task",
                            "metric", "value"}


def test_run_ablation_init_axis_reports_step0(tmp_path):
    grid = AblationGrid("init", ("gaussian", "avg_emb"), "avg_emb",
                        seeds=(0,))
    rows = run_ablation(grid, tiny_plan(steps=1))
    step0 = [r for r in rows if r["metric"] == "step0_loss"]
    assert {r["variant"] for r in step0} == {"gaussian", "avg_emb"}
    assert all(np.isfinite(r["value"]) for r in step0)


def test_run_ablation_with_transfer_suite():
    grid = AblationGrid("duration", ("full", "skip_stage1"), "full",
                        seeds=(0,))
    train = build_transfer_set("counting", 4, SeedStream(0, 1000), res=16)
    suite = [("counting", train, None,
              TransferHParams(lr=1e-4, epochs=1, batch_size=4))]
    rows = run_ablation(grid, tiny_plan(), transfer_suite=suite)
    scores = [r for r in rows if r["metric"] == "transfer_score"]
    assert {r["variant"] for r in scores} == {"full", "skip_stage1"}
    # skip_stage1 ran no pretraining, so it has no final_loss row
    assert not [r for r in rows if r["variant"] == "skip_stage1"
                and r["metric"] == "final_loss"]


def test_plot_ablation_rewrites_from_rows(tmp_path):
    grid = AblationGrid("freeze", ("TT", "TF"), "TT", seeds=(0, 1))
    rows = [{"run_id": "r", "axis": "freeze", "variant": v, "seed": s,
             "task": "pretrain", "metric": "final_loss",
             "value": 1.0 + 0.1 * s + (0.5 if v == "TF" else 0.0)}
            for v in ("TT", "TF") for s in (0, 1)]
    path = plot_ablation(rows, grid, str(tmp_path / "re.svg"))
    assert os.path.getsize(path) > 500


def test_run_variance_determinism_and_spread(tmp_path):
    calls = []

    def deterministic(seed):
        calls.append(seed)
        return {"counting": 0.5}

    rows = run_variance(deterministic, [7, 7, 7],
                        out_path=str(tmp_path / "var.csv"))
    assert rows[0]["stddev"] == 0.0
    assert rows[0]["n_runs"] == 3
    assert (tmp_path / "var.csv").exists()

    def varied(seed):
        return {"counting": float(seed), "refseg": 1.0}

    rows = run_variance(varied, [0, 1, 2, 3, 4])
    cnt = next(r for r in rows if r["task"] == "counting")
    assert cnt["mean"] == 2.0 and cnt["min"] == 0.0 and cnt["max"] == 4.0
    assert cnt["stddev"] == pytest.approx(np.std([0, 1, 2, 3, 4]))
    seg = next(r for r in rows if r["task"] == "refseg")
    assert seg["stddev"] == 0.0

    with pytest.raises(ValueError, match="at least 3"):
        run_variance(varied, [0, 1])


def test_pretrain_variance_seeded_off_is_zero():
    rows = pretrain_variance(tiny_plan(steps=2), seeds=[5, 5, 5])
    for r in rows:
        assert r["stddev"] == 0.0, r


def test_run_lowdata_structure():
    ckpt, _ = run_stage(tiny_plan(steps=1))
    train = build_transfer_set("counting", 8, SeedStream(0, 1000), res=16)
    ev = build_transfer_set("counting", 4, SeedStream(2000, 3000), res=16)
    from shapelab.evaluate import make_eval_fn
    sweeps = (TransferHParams(lr=1e-4, epochs=1, batch_size=4),)
    rows = run_lowdata(ckpt, train, make_eval_fn(ev, "counting"),
                       sizes=(4, 100), sweeps=sweeps, n_seeds=2)
    sizes = sorted({r["size"] for r in rows})
    assert sizes == [4, 8]    # 100 clamps to the dataset size
    assert len(rows) == 2 * 2  # sizes x seeds x 1 sweep
    full_best = max(r["score"] for r in rows if r["size"] == 8)
    for r in rows:
        assert r["best_for_size"] == max(
            q["score"] for q in rows if q["size"] == r["size"])
        if full_best != 0:
            expect = relative_regret(r["best_for_size"], full_best)
            assert r["regret_vs_full"] == pytest.approx(expect)


def test_write_rows_noop_on_empty(tmp_path):
    path = tmp_path / "none.csv"
    write_rows(str(path), [])
    assert not path.exists()
