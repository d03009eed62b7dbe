"""Config validation and the end-to-end CLI surface (tiny budgets)."""

import csv
import json
import os

import numpy as np
import pytest

from shapelab import config as C
from shapelab.cli import main, save_vq, load_vq
from shapelab.layout import MaskMode
from shapelab.train import train_vqvae


TINY_PLAN = {
    "model": {
        "encoder": {"res": 16, "patch": 8, "d_vit": 16, "depth": 1,
                    "heads": 2, "d_out": 24},
        "connector": {"d_vit": 16, "d_lm": 24},
        "lm": {"d_lm": 24, "depth": 1, "heads": 2, "max_len": 96},
        "text_len": 80,
    },
    "mixture": {"weights": {"caption": 1.0, "count": 1.0}},
    "schedule": {"peak": 1e-3, "warmup_steps": 2, "timescale": 10},
    "batch_size": 2,
    "steps": 2,
}


# -- config layer --------------------------------------------------------------

def test_train_plan_from_dict_roundtrip():
    plan = C.train_plan_from_dict(TINY_PLAN)
    assert plan.model.encoder.res == 16
    assert plan.schedule.peak == 1e-3
    assert plan.steps == 2


def test_unknown_key_rejected_with_path():
    bad = json.loads(json.dumps(TINY_PLAN))
    bad["model"]["encoder"]["patch_size"] = 8
    with pytest.raises(C.ConfigError, match=r"plan\.model\.encoder.*patch_size"):
        C.train_plan_from_dict(bad)
    with pytest.raises(C.ConfigError, match=r"plan.*nonsense"):
        C.train_plan_from_dict({"nonsense": 1})


def test_invalid_value_reported_with_path():
    bad = json.loads(json.dumps(TINY_PLAN))
    bad["schedule"]["peak"] = -1.0
    with pytest.raises(C.ConfigError, match=r"plan\.schedule"):
        C.train_plan_from_dict(bad)
    with pytest.raises(C.ConfigError, match="mask_mode"):
        C.train_plan_from_dict({"mask_mode": "nonsense"})


def test_mask_mode_and_suffix_len_coercion():
    d = dict(TINY_PLAN, mask_mode="ar_all",
             mixture={"max_suffix_len": {"1": 32, "2": 64}})
    plan = C.train_plan_from_dict(d)
    assert plan.mask_mode is MaskMode.AR_ALL
    assert plan.mixture.max_suffix_len == {1: 32, 2: 64}


def test_load_config_rejects_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(C.ConfigError, match="invalid JSON"):
        C.load_config(str(p))


def test_write_resolved_roundtrips(tmp_path):
    plan = C.train_plan_from_dict(TINY_PLAN)
    path = C.write_resolved(plan, str(tmp_path / "resolved.json"))
    echoed = json.load(open(path))
    assert echoed["steps"] == 2
    assert echoed["mask_mode"] == "prefix_lm"
    assert echoed["model"]["encoder"]["res"] == 16
    # the echo itself parses back into an equivalent plan
    plan2 = C.train_plan_from_dict(
        {k: echoed[k] for k in ("model", "schedule", "steps", "batch_size",
                                "mask_mode")})
    assert plan2.model == plan.model


def test_grid_from_dict():
    g = C.grid_from_dict({"axis": "mask_mode",
                          "variants": ["prefix_lm", "ar_all"],
                          "reference": "prefix_lm", "seeds": [0]}, "grid")
    assert g.variants == ("prefix_lm", "ar_all")
    with pytest.raises(C.ConfigError):
        C.grid_from_dict({"axis": "nope", "variants": ["a"],
                          "reference": "a"}, "grid")


def test_desk_presets_consistent():
    plan = C.desk_stage1_plan(steps=100)
    assert plan.steps == 100
    assert plan.model.total_len <= plan.model.lm.max_len
    plan2 = C.desk_stage2_plan("ckpt-path", steps=10)
    assert plan2.stage == 2
    assert plan2.model.encoder.res == 64
    assert plan2.model.total_len <= plan2.model.lm.max_len
    assert plan2.resume_from == "ckpt-path"


# -- CLI surface ----------------------------------------------------------------

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One tiny pretrained checkpoint + VQ model shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "plan.json"
    cfg.write_text(json.dumps(TINY_PLAN))
    vq, _, _ = train_vqvae(steps=30, batch_size=8, seed=0)
    save_vq(vq, str(root / "vq.ckpt"))
    rc = main(["pretrain", "--config", str(cfg), "--out",
               str(root / "stage1")])
    assert rc == 0
    return root


def test_cli_pretrain_outputs(workdir):
    out = workdir / "stage1"
    assert (out / "stage1.ckpt").exists()
    assert (out / "stage1_metrics.csv").exists()
    resolved = json.load(open(out / "resolved_config.json"))
    assert resolved["steps"] == 2


def test_cli_transfer_and_eval(workdir):
    ckpt = str(workdir / "stage1" / "stage1.ckpt")
    rc = main(["transfer", "--ckpt", ckpt, "--task", "counting",
               "--n-train", "4", "--n-eval", "2",
               "--config", str(_hp(workdir)),
               "--out", str(workdir / "tr")])
    assert rc == 0
    score = json.load(open(workdir / "tr" / "score.json"))
    assert score["task"] == "counting"
    rc = main(["eval", "--ckpt", str(workdir / "tr" / "transfer_counting.ckpt"),
               "--task", "counting", "--n", "2",
               "--out", str(workdir / "eval.csv")])
    assert rc == 0
    rows = list(csv.DictReader(open(workdir / "eval.csv")))
    assert rows[0]["task"] == "counting"
    assert rows[0]["metric"] == "count_accuracy"


def _hp(root):
    p = root / "hp.json"
    if not p.exists():
        p.write_text(json.dumps({"lr": 1e-4, "epochs": 1, "batch_size": 4}))
    return p


def test_cli_refseg_requires_vq(workdir):
    ckpt = str(workdir / "stage1" / "stage1.ckpt")
    rc = main(["transfer", "--ckpt", ckpt, "--task", "refseg",
               "--n-train", "2", "--n-eval", "2",
               "--out", str(workdir / "seg")])
    assert rc == 1


def test_cli_decode_and_data(workdir):
    rc = main(["data", "generate", "--n", "2", "--res", "16",
               "--out", str(workdir / "scenes")])
    assert rc == 0
    pngs = sorted(os.listdir(workdir / "scenes"))
    assert len(pngs) == 2 and pngs[0].endswith(".png")
    ckpt = str(workdir / "stage1" / "stage1.ckpt")
    rc = main(["decode", "--ckpt", ckpt,
               "--image", str(workdir / "scenes" / pngs[0]),
               "--prefix", "caption en", "--max-new-tokens", "4"])
    assert rc == 0


def test_cli_data_export_schema(workdir):
    rc = main(["data", "export", "--n", "3", "--res", "16",
               "--vq", str(workdir / "vq.ckpt"),
               "--out", str(workdir / "export")])
    assert rc == 0
    lines = open(workdir / "export" / "examples.jsonl").read().splitlines()
    assert len(lines) == 3
    for line in lines:
        rec = json.loads(line)
        assert set(rec) == {"image", "seed", "task_tag", "prefix", "suffix",
                            "boxes", "masks"}
        assert (workdir / "export" / rec["image"]).exists()
        for box in rec["boxes"]:
            assert len(box) == 4 and all(0 <= v <= 1 for v in box)
        for rle in rec["masks"]:
            assert rle[0] == 16 and rle[1] == 16  # [h, w, runs...]


def test_cli_bench_csv(workdir):
    ckpt = str(workdir / "stage1" / "stage1.ckpt")
    rc = main(["bench", "--ckpt", ckpt, "--batch", "1,2", "--repeats", "1",
               "--out", str(workdir / "bench.csv")])
    assert rc == 0
    rows = list(csv.DictReader(open(workdir / "bench.csv")))
    assert [r["batch"] for r in rows] == ["1", "2"]
    assert float(rows[0]["prefill_walltime_ms"]) > 0


def test_cli_codec_box_roundtrip(capsys):
    rc = main(["codec", "box", "encode", "0.1,0.2,0.5,0.6"])
    assert rc == 0
    spelled = capsys.readouterr().out.strip().split()
    bins = [t[4:8] for t in spelled]
    rc = main(["codec", "box", "decode", ",".join(str(int(b)) for b in bins)])
    assert rc == 0
    vals = [float(v) for v in capsys.readouterr().out.strip().split(",")]
    assert np.allclose(vals, [0.1, 0.2, 0.5, 0.6], atol=1 / 1024)


def test_cli_ablate_reports(workdir):
    grid = workdir / "grid.json"
    grid.write_text(json.dumps({
        "grid": {"axis": "mask_mode", "variants": ["prefix_lm", "ar_all"],
                 "reference": "prefix_lm", "seeds": [0]},
        "plan": TINY_PLAN}))
    rc = main(["ablate", "--grid", str(grid), "--out",
               str(workdir / "abl")])
    assert rc == 0
    assert (workdir / "abl" / "ablation_mask_mode.csv").exists()
    assert (workdir / "abl" / "ablation_mask_mode.svg").exists()
    assert (workdir / "abl" / "ablation_mask_mode_regret.csv").exists()


def test_cli_exit_codes(tmp_path):
    # config/validation errors: 1
    assert main(["pretrain", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "o")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": True}))
    assert main(["pretrain", "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 1
    # vq loader refuses a non-VQ checkpoint
    assert main(["codec", "mask", "decode", "1,2,3",
                 "--vq", str(bad)]) == 1


def test_cli_runtime_failure_exit_code(workdir, tmp_path):
    # corrupt a model checkpoint payload so loading raises mid-run
    import shapelab.cli as cli_mod

    def boom(*a, **k):
        raise RuntimeError("synthetic failure")

    orig = cli_mod.run_stage
    cli_mod.run_stage = boom
    try:
        cfg = tmp_path / "plan.json"
        cfg.write_text(json.dumps(TINY_PLAN))
        rc = main(["pretrain", "--config", str(cfg),
                   "--out", str(tmp_path / "o")])
    finally:
        cli_mod.run_stage = orig
    assert rc == 2


def test_vq_container_roundtrip(workdir):
    vq = load_vq(str(workdir / "vq.ckpt"))
    assert vq.cfg.n_codes == 128
