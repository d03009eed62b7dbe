"""Training orchestration: schedules, freeze/reset plans, staged runs.

Pretraining uses one continuous reciprocal-sqrt learning-rate curve so
stages chain without a decay/restart; per-task transfer uses a cosine
cooldown to exactly zero. The image encoder gets an extra slow linear
warm-up multiplier during stage 1.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import layout as LY
from . import shapeworld as SW
from .checkpoint import Checkpoint, load_checkpoint
from .codec import VqvaeModel
from .model import ModelConfig, MultimodalModel, batch_loss, prepare_batch
from .optim import AdamW
from .tensor import ParamTree, Tensor
from .util import rng_from
from .vit import VitEncoder
from .lm import DecoderLM

RSQRT_INFINITE = "rsqrt_infinite"
COSINE_COOLDOWN = "cosine_cooldown"

TRAIN = "train"
FREEZE = "freeze"
RESET_TRAIN = "reset_train"

COMPONENT_PREFIX = {"vit": "vit", "connector": "connector", "llm": "lm"}


@dataclass(frozen=True)
class SchedulePlan:
    kind: str = RSQRT_INFINITE
    peak: float = 1e-3
    warmup_steps: int = 200
    timescale: int = 2000
    total_steps: int = 0              # cosine only
    vit_warmup_steps: int = 0         # stage-1 extra image-encoder warmup

    def __post_init__(self):
        if self.peak <= 0 or self.warmup_steps <= 0:
            raise ValueError("schedule constants must be positive")
        if self.vit_warmup_steps and self.vit_warmup_steps < self.warmup_steps:
            raise ValueError("vit warmup cannot be shorter than base warmup")

    def to_dict(self):
        return dict(kind=self.kind, peak=self.peak,
                    warmup_steps=self.warmup_steps, timescale=self.timescale,
                    total_steps=self.total_steps,
                    vit_warmup_steps=self.vit_warmup_steps)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_at(step, plan, component="llm"):
    """Learning rate at a global step for one component."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if plan.kind == RSQRT_INFINITE:
        lr = plan.peak * min(step / plan.warmup_steps, 1.0) * math.sqrt(
            plan.timescale / max(step, plan.timescale))
        if component == "vit" and plan.vit_warmup_steps:
            lr *= min(step / plan.vit_warmup_steps, 1.0)
        return lr
    if plan.kind == COSINE_COOLDOWN:
        if step >= plan.total_steps:
            return 0.0
        if step < plan.warmup_steps:
            return plan.peak * step / plan.warmup_steps
        frac = (step - plan.warmup_steps) / (plan.total_steps - plan.warmup_steps)
        return plan.peak * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown schedule kind {plan.kind!r}")


@dataclass(frozen=True)
class FreezePlan:
    vit: str = TRAIN
    connector: str = TRAIN
    llm: str = TRAIN

    def __post_init__(self):
        for mode in (self.vit, self.connector, self.llm):
            if mode not in (TRAIN, FREEZE, RESET_TRAIN):
                raise ValueError(f"invalid freeze mode {mode!r}")
        if (self.connector == FREEZE and self.vit == FREEZE
                and self.llm == FREEZE):
            raise ValueError("nothing would train under an all-frozen plan")

    def mode(self, component):
        return getattr(self, component)

    def to_dict(self):
        return dict(vit=self.vit, connector=self.connector, llm=self.llm)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainPlan:
    stage: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    mixture: SW.MixtureSpec = field(default_factory=SW.MixtureSpec)
    schedule: SchedulePlan = field(default_factory=SchedulePlan)
    freeze: FreezePlan = field(default_factory=FreezePlan)
    batch_size: int = 16
    steps: int = 1000
    label_smoothing: float = 0.0
    llm_dropout: float = 0.0
    weight_decay_ratio: float = 0.0
    seed: int = 0
    resume_from: object = None        # path or Checkpoint
    mask_mode: LY.MaskMode = LY.MaskMode.PREFIX_LM
    loss_mode: LY.LossMode = field(default_factory=LY.LossMode)
    difficulty: SW.Difficulty = field(default_factory=SW.Difficulty)
    seed_range: tuple = (0, 800_000)
    val_every: int = 0
    val_tasks: tuple = ("caption", "count", "detect")
    val_batch: int = 8


def trainable_paths(params, freeze):
    """Parameter paths updated under a freeze plan; frozen tensors also get
    requires_grad switched off so no gradient work is spent on them."""
    keep = set()
    for comp, prefix in COMPONENT_PREFIX.items():
        frozen = freeze.mode(comp) == FREEZE
        for key in params.subtree(prefix).keys():
            params[key].requires_grad = not frozen
            if not frozen:
                keep.add(key)
    return keep


def reset_components(model, freeze, seed):
    """Re-initialize components marked RESET_TRAIN from a fresh seed."""
    cfg = model.cfg
    for comp, prefix in COMPONENT_PREFIX.items():
        if freeze.mode(comp) != RESET_TRAIN:
            continue
        rng = rng_from(seed, "reset", comp)
        if comp == "vit":
            fresh = VitEncoder(cfg.encoder, rng=rng).params
        elif comp == "llm":
            fresh = DecoderLM(cfg.lm, rng=rng).params
        else:
            from .connector import Connector
            fresh = Connector(cfg.connector, rng=rng).params
        for key, t in fresh.items():
            model.params[key] = t
    return model.replace_params(model.params)


def train_step(model, optimizer, prepared, plan, global_step, trainable,
               vq=None):
    """One forward/backward/update; returns a metrics row."""
    rng = rng_from(plan.seed, "dropout", global_step)
    loss = batch_loss(model, prepared, smoothing=plan.label_smoothing,
                      training=plan.llm_dropout > 0, rng=rng)
    value = loss.item()
    if not np.isfinite(value):
        raise RuntimeError(
            f"non-finite loss {value} at step {global_step}")
    model.params.zero_grads()
    loss.backward()
    lr_lm = lr_at(global_step, plan.schedule, "llm")
    lr_vit = lr_at(global_step, plan.schedule, "vit")
    grad_norm = optimizer.step(
        lr_lm, lr_overrides={"vit": lr_vit}, trainable=trainable)
    return {"step": global_step, "loss": value, "grad_norm": grad_norm,
            "lr_llm": lr_lm, "lr_vit": lr_vit}


def _resolve_model(plan, vq=None):
    """Build the model for a plan, resuming/upcycling when requested."""
    resume = plan.resume_from
    if resume is None:
        model = MultimodalModel(plan.model,
                                rng=rng_from(plan.seed, "init"))
        return model, 0
    ckpt = load_checkpoint(resume) if isinstance(resume, (str, os.PathLike)) \
        else resume
    old_cfg = ModelConfig.from_dict(ckpt.model_config)
    params = ckpt.params.copy()
    if old_cfg.encoder.res != plan.model.encoder.res:
        old_vit = VitEncoder(old_cfg.encoder, params=params.subtree("vit"))
        upcycled = old_vit.upcycle(plan.model.encoder.res)
        for key in params.subtree("vit").keys():
            del params[key]
        params.update(upcycled.params)
    expect = MultimodalModel(
        plan.model, rng=np.random.default_rng(0)).params
    if set(expect.keys()) != set(params.keys()):
        missing = set(expect.keys()) ^ set(params.keys())
        raise ValueError(f"incompatible resume parameter tree: {sorted(missing)}")
    for key in expect.keys():
        if expect[key].data.shape != params[key].data.shape:
            raise ValueError(
                f"shape mismatch for {key}: {params[key].data.shape} "
                f"vs {expect[key].data.shape}")
    return MultimodalModel(plan.model, params=params), ckpt.global_step


def validation_perplexity(model, plan, vq=None, step=None):
    """Mean suffix perplexity per pretraining task family on fixed seeds."""
    rows = {}
    for tag in plan.val_tasks:
        rng = rng_from("val", tag)
        seeds = SW.SeedStream(900_000, 910_000)
        mix = SW.MixtureSpec(weights={tag: 1.0},
                             max_suffix_len=plan.mixture.max_suffix_len)
        batch = SW.sample_batch(mix, 1, plan.val_batch, rng, seeds,
                                res=plan.model.encoder.res,
                                difficulty=plan.difficulty, vq=vq,
                                max_text_tokens=plan.model.text_len,
                                vocab=model.vocab)
        prepared = prepare_batch(batch, plan.model, model.vocab,
                                 plan.mask_mode, plan.loss_mode)
        loss = batch_loss(model, prepared)
        rows[tag] = math.exp(loss.item())
    return rows


def run_stage(plan, out_dir=None, vq=None, log_every=0):
    """Execute one pretraining stage; returns the resulting checkpoint."""
    model, start_step = _resolve_model(plan, vq)
    model = reset_components(model, plan.freeze, plan.seed)
    trainable = trainable_paths(model.params, plan.freeze)
    optimizer = AdamW(model.params,
                      weight_decay=plan.weight_decay_ratio)
    pretrain_seeds = SW.SeedStream(*plan.seed_range)
    metrics = []
    val_rows = []
    for i in range(plan.steps):
        gstep = start_step + i
        rng = rng_from(plan.seed, "data", gstep)
        examples = SW.sample_batch(plan.mixture, plan.stage, plan.batch_size,
                                   rng, pretrain_seeds,
                                   res=plan.model.encoder.res,
                                   difficulty=plan.difficulty, vq=vq,
                                   max_text_tokens=plan.model.text_len,
                                   vocab=model.vocab)
        prepared = prepare_batch(examples, plan.model, model.vocab,
                                 plan.mask_mode, plan.loss_mode)
        row = train_step(model, optimizer, prepared, plan, gstep, trainable)
        metrics.append(row)
        if log_every and i % log_every == 0:
            print(f"stage{plan.stage} step {gstep} loss {row['loss']:.4f}")
        if plan.val_every and (i + 1) % plan.val_every == 0:
            ppl = validation_perplexity(model, plan, vq)
            val_rows.append({"step": gstep, **ppl})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, f"stage{plan.stage}_metrics.csv"),
                   metrics)
        if val_rows:
            _write_csv(os.path.join(out_dir,
                                    f"stage{plan.stage}_val.csv"), val_rows)
    final_rng = rng_from(plan.seed, "final", start_step + plan.steps)
    ckpt = Checkpoint(params=model.params,
                      model_config=plan.model.to_dict(),
                      global_step=start_step + plan.steps,
                      stage=plan.stage,
                      rng_state=final_rng.bit_generator.state,
                      extra={"metrics_tail": metrics[-1] if metrics else None})
    return ckpt, metrics


def _write_csv(path, rows):
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


# -- transfer ------------------------------------------------------------------

@dataclass(frozen=True)
class TransferHParams:
    """Per-task fine-tuning knobs (suggested-first defaults).

    The learning-rate default is tuned for this artifact's from-scratch
    desk models; the 3e-5/1e-5/3e-6 sweep values remain supported.
    """

    lr: float = 3e-4
    epochs: int = 10
    batch_size: int = 16
    label_smoothing: float = 0.0
    dropout: float = 0.0
    weight_decay_ratio: float = 0.0
    freeze_vit: bool = False
    beam: int = 1
    warmup_steps: int = 20
    seed: int = 0
    max_examples: int = 0      # 0 = use the whole training set

    def to_dict(self):
        return self.__dict__.copy()


def run_transfer(ckpt, train_set, hparams, model_cfg=None, eval_fn=None,
                 log_every=0):
    """Cosine-cooldown fine-tune on a task dataset.

    Returns (fine-tuned model, eval score or None). ``eval_fn`` receives
    the fine-tuned model and computes the held-out score.
    """
    cfg = model_cfg or ModelConfig.from_dict(ckpt.model_config)
    cfg = replace(cfg, lm=replace(cfg.lm, dropout_rate=hparams.dropout))
    data = list(train_set)
    if hparams.max_examples:
        order = rng_from(hparams.seed, "subset").permutation(
            len(data))
        data = [data[i] for i in order[:hparams.max_examples]]
    n_images = len(data[0].images)
    cfg = replace(cfg, n_images=n_images)
    params = ckpt.params.copy()
    model = MultimodalModel(cfg, params=params)
    freeze = FreezePlan(vit=FREEZE if hparams.freeze_vit else TRAIN)
    trainable = trainable_paths(model.params, freeze)
    steps_per_epoch = max(1, math.ceil(len(data) / hparams.batch_size))
    total = hparams.epochs * steps_per_epoch
    sched = SchedulePlan(kind=COSINE_COOLDOWN, peak=hparams.lr,
                         warmup_steps=max(1, min(hparams.warmup_steps,
                                                 total // 10 + 1)),
                         total_steps=total)
    plan = TrainPlan(stage=3, model=cfg, schedule=sched, freeze=freeze,
                     batch_size=hparams.batch_size, steps=total,
                     label_smoothing=hparams.label_smoothing,
                     llm_dropout=hparams.dropout,
                     weight_decay_ratio=hparams.weight_decay_ratio,
                     seed=hparams.seed)
    optimizer = AdamW(model.params,
                      weight_decay=hparams.weight_decay_ratio)
    rng = rng_from(hparams.seed, "order")
    step = 0
    for _ in range(hparams.epochs):
        order = rng.permutation(len(data))
        for i in range(steps_per_epoch):
            idx = order[i * hparams.batch_size:(i + 1) * hparams.batch_size]
            if idx.size == 0:
                continue
            examples = [data[j] for j in idx]
            prepared = prepare_batch(examples, cfg, model.vocab,
                                     plan.mask_mode, plan.loss_mode)
            row = train_step(model, optimizer, prepared, plan, step,
                             trainable)
            if log_every and step % log_every == 0:
                print(f"transfer step {step}/{total} loss {row['loss']:.4f}")
            step += 1
    score = eval_fn(model) if eval_fn is not None else None
    return model, score


# -- stage 0 substitutes --------------------------------------------------------

def pretrain_vit_stage0(encoder_cfg, steps=600, batch_size=16, seed=0,
                        lr=1e-3):
    """Train the image encoder on shape-and-color classification."""
    from . import tensor as T
    rng = rng_from(seed, "vit0")
    vit = VitEncoder(encoder_cfg, rng=rng)
    n_classes = len(SW.SHAPES) * len(SW.COLORS)
    head = ParamTree()
    head["head.w"] = Tensor(rng.normal(
        0, 1 / math.sqrt(encoder_cfg.d_vit),
        size=(encoder_cfg.d_vit, n_classes)).astype(np.float32),
        requires_grad=True)
    params = ParamTree()
    params.update(vit.params)
    params.update(head)
    optimizer = AdamW(params)
    diff = SW.Difficulty(min_objects=1, max_objects=1, with_glyphs=False)
    for step in range(steps):
        srng = rng_from(seed, "vit0", step)
        imgs, labels = [], []
        for _ in range(batch_size):
            scene = SW.generate_scene(int(srng.integers(0, 1 << 30)),
                                      encoder_cfg.res, diff)
            obj = scene.objects[0]
            imgs.append(scene.raster)
            labels.append(SW.SHAPES.index(obj.shape) * len(SW.COLORS)
                          + SW.COLORS.index(obj.color))
        enc = vit.encode(np.stack(imgs))
        pooled = enc.mean(axis=1)
        logits = T.matmul(pooled, head["head.w"])
        loss = T.softmax_xent(logits, np.array(labels),
                              np.ones(batch_size, dtype=np.float32))
        params.zero_grads()
        loss.backward()
        optimizer.step(lr)
    return vit


def pretrain_lm_stage0(lm_cfg, steps=600, batch_size=16, seed=0, lr=1e-3,
                       seq_len=40):
    """Train the language model on synthetic text-only next-token prediction."""
    from . import tensor as T
    from .vocab import VocabSpec, encode_text
    vocab = VocabSpec()
    rng = rng_from(seed, "lm0")
    lm = DecoderLM(lm_cfg, rng=rng)
    optimizer = AdamW(lm.params)
    templates = [
        "a {c} {s}", "How many {s}s?", "Is the {c} {s} in the image?",
        "What objects are in the image?", "a {c} {s} and a {c2} {s2}",
    ]
    causal = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    positions = np.arange(seq_len, dtype=np.float32)
    for step in range(steps):
        srng = rng_from(seed, "lm0", step)
        ids = np.full((batch_size, seq_len), vocab.pad, dtype=np.int64)
        weights = np.zeros((batch_size, seq_len), dtype=np.float32)
        for i in range(batch_size):
            t = templates[srng.integers(len(templates))]
            text = t.format(c=SW.COLORS[srng.integers(6)],
                            s=SW.SHAPES[srng.integers(3)],
                            c2=SW.COLORS[srng.integers(6)],
                            s2=SW.SHAPES[srng.integers(3)])
            toks = encode_text(text, vocab)[:seq_len - 2]
            ids[i, 0] = vocab.bos
            ids[i, 1:1 + len(toks)] = toks
            ids[i, 1 + len(toks)] = vocab.eos
            weights[i, 1:2 + len(toks)] = 1.0
        emb = lm.embed(ids)
        logits = lm.forward(emb, causal, positions)
        targets = ids[:, 1:]
        loss = T.softmax_xent(
            T.getitem(logits, (slice(None), slice(0, seq_len - 1))),
            targets, weights[:, 1:])
        lm.params.zero_grads()
        loss.backward()
        optimizer.step(lr)
    return lm


def run_stage0(model_cfg, vit_steps=600, lm_steps=600, seed=0):
    """Unimodal warm-starts; fresh connector; returns a stage-0 checkpoint."""
    vit = pretrain_vit_stage0(model_cfg.encoder, steps=vit_steps, seed=seed)
    lm = pretrain_lm_stage0(model_cfg.lm, steps=lm_steps, seed=seed)
    from .connector import Connector
    conn = Connector(model_cfg.connector,
                     rng=rng_from(seed, "conn0"))
    params = ParamTree()
    for sub in (vit.params, conn.params, lm.params):
        params.update(sub)
    return Checkpoint(params=params, model_config=model_cfg.to_dict(),
                      global_step=0, stage=0,
                      rng_state=np.random.default_rng(seed).bit_generator.state)


# -- VQ-VAE training -------------------------------------------------------------

def sample_vq_masks(rng, n, res=32, dilate=True):
    """Canonical 64x64 training crops from shape-world object masks."""
    from .codec import CROP, resize_nearest
    diff = SW.Difficulty(min_objects=1, max_objects=3, with_glyphs=False)
    out = []
    while len(out) < n:
        scene = SW.generate_scene(int(rng.integers(0, 1 << 30)), res, diff)
        for obj in scene.objects:
            y0, y1, x0, x1 = obj.box.pixel_rect(res)
            crop = resize_nearest(
                obj.mask[y0:y1, x0:x1].astype(np.float32), CROP, CROP)
            out.append(crop)
            if len(out) == n:
                break
    return np.stack(out)


def train_vqvae(steps=800, batch_size=32, seed=0, lr=3e-3, res=32,
                log_every=0):
    """Train the mask tokenizer; returns (model, loss history, dead codes)."""
    vq = VqvaeModel(rng=rng_from(seed, "vq"))
    optimizer = AdamW(vq.params)
    history = []
    usage = np.zeros(vq.cfg.n_codes, dtype=np.int64)
    for step in range(steps):
        rng = rng_from(seed, "vqdata", step)
        masks = sample_vq_masks(rng, batch_size, res)
        total, recon, cb, commit, idx = vq.train_step_losses(masks)
        usage[np.bincount(idx.reshape(-1),
                          minlength=vq.cfg.n_codes) > 0] += 1
        vq.params.zero_grads()
        total.backward()
        optimizer.step(lr)
        history.append({"step": step, "total": total.item(),
                        "recon": recon.item(), "codebook": cb.item(),
                        "commit": commit.item()})
        if log_every and step % log_every == 0:
            print(f"vqvae step {step} total {total.item():.4f}")
    dead = np.nonzero(usage == 0)[0].tolist()
    return vq, history, dead
