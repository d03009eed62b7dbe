"""Run configuration files: JSON in, validated dataclasses out.

Unknown keys are rejected with a key-path diagnostic, and every run can
echo its fully-defaulted ("resolved") configuration next to its outputs so
any artifact is reproducible from that file plus the seed inside it.
"""

from __future__ import annotations

import dataclasses
import json

from .connector import ConnectorConfig
from .harness import AblationGrid
from .infer import DecodeConfig
from .layout import LossMode, MaskMode
from .lm import LMConfig
from .model import ModelConfig
from .shapeworld import Difficulty, MixtureSpec
from .train import (FreezePlan, SchedulePlan, TrainPlan, TransferHParams)
from .vit import EncoderConfig


class ConfigError(ValueError):
    """A config file failed validation."""


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; "
                          f"allowed: {sorted(allowed)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def model_config_from_dict(d, where="model"):
    d = dict(d)
    if "encoder" in d:
        d["encoder"] = _build(EncoderConfig, d["encoder"], where + ".encoder")
    if "connector" in d:
        d["connector"] = _build(ConnectorConfig, d["connector"],
                                where + ".connector")
    if "lm" in d:
        d["lm"] = _build(LMConfig, d["lm"], where + ".lm")
    return _build(ModelConfig, d, where)


def train_plan_from_dict(d, where="plan"):
    d = dict(d)
    if "model" in d:
        d["model"] = model_config_from_dict(d["model"], where + ".model")
    if "mixture" in d:
        m = dict(d["mixture"])
        if "max_suffix_len" in m:
            m["max_suffix_len"] = {int(k): v
                                   for k, v in m["max_suffix_len"].items()}
        d["mixture"] = _build(MixtureSpec, m, where + ".mixture")
    if "schedule" in d:
        d["schedule"] = _build(SchedulePlan, d["schedule"], where + ".schedule")
    if "freeze" in d:
        d["freeze"] = _build(FreezePlan, d["freeze"], where + ".freeze")
    if "difficulty" in d:
        d["difficulty"] = _build(Difficulty, d["difficulty"],
                                 where + ".difficulty")
    if "mask_mode" in d:
        try:
            d["mask_mode"] = MaskMode(d["mask_mode"])
        except ValueError as exc:
            raise ConfigError(f"{where}.mask_mode: {exc}") from exc
    if "loss_mode" in d:
        d["loss_mode"] = _build(LossMode, d["loss_mode"], where + ".loss_mode")
    if "seed_range" in d:
        d["seed_range"] = tuple(d["seed_range"])
    if "val_tasks" in d:
        d["val_tasks"] = tuple(d["val_tasks"])
    return _build(TrainPlan, d, where)


def transfer_hparams_from_dict(d, where="transfer"):
    return _build(TransferHParams, d, where)


def decode_config_from_dict(d, where="decode"):
    return _build(DecodeConfig, d, where)


def grid_from_dict(d, where="grid"):
    d = dict(d)
    if "variants" in d:
        d["variants"] = tuple(d["variants"])
    if "seeds" in d:
        d["seeds"] = tuple(d["seeds"])
    return _build(AblationGrid, d, where)


def load_config(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _plain(obj):
    """Recursively render dataclasses/enums/tuples as JSON-friendly values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, MaskMode):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    return obj


def write_resolved(obj, path):
    """Echo a fully-defaulted config next to a run's outputs."""
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=2, default=str)
        fh.write("\n")
    return path


# -- desk presets ------------------------------------------------------------------

def desk_model(res=32):
    """The pinned desk-scale model: tiny ViT into a 3-block decoder."""
    return ModelConfig(
        encoder=EncoderConfig(res=res, patch=8, d_vit=48, depth=3, heads=4,
                              d_out=96),
        connector=ConnectorConfig(kind="linear", d_vit=48, d_lm=96),
        lm=LMConfig(d_lm=96, depth=3, heads=4, max_len=160),
        text_len=96)


def desk_stage1_plan(steps=20_000, seed=0, batch_size=8, res=32):
    """Stage-1 pretraining plan sized for a commodity multicore CPU."""
    return TrainPlan(
        stage=1, model=desk_model(res=res),
        schedule=SchedulePlan(peak=1.5e-3, warmup_steps=500, timescale=5_000,
                              vit_warmup_steps=1_500),
        batch_size=batch_size, steps=steps, seed=seed,
        # up to 10 objects with a same-class-scene share so that transfer
        # counting (2..10 identical objects) is in-distribution
        difficulty=Difficulty(min_objects=1, max_objects=10,
                              same_class_prob=0.35))


def desk_stage2_plan(stage1_ckpt, steps=2_000, seed=0, batch_size=4, res=64):
    """Stage-2 continuation at doubled resolution with reweighted mixture."""
    plan = desk_stage1_plan(seed=seed, res=res)
    from dataclasses import replace
    lm = replace(plan.model.lm, max_len=plan.model.lm.max_len + 48)
    model = replace(plan.model, lm=lm)
    return dataclasses.replace(
        plan, stage=2, model=model, steps=steps, batch_size=batch_size,
        resume_from=stage1_ckpt)


def ablation_base_plan(seed=0, steps=2_000):
    """Reduced-budget plan for ablation grids (order-10x shorter stage 1)."""
    plan = desk_stage1_plan(steps=steps, seed=seed)
    return dataclasses.replace(
        plan, schedule=SchedulePlan(peak=1.5e-3, warmup_steps=200,
                                    timescale=1_000, vit_warmup_steps=400),
        val_tasks=("caption", "count", "detect"))
