"""Projection of image tokens into the language model's embedding space.

The default is a zero-initialized affine map, so at the start of training
the image block contributes nothing and the initial loss on text content
is independent of the pixels. The MLP variant is one hidden layer with
GeLU and small-Gaussian init.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamTree, Tensor

LINEAR = "linear"
MLP = "mlp"


@dataclass(frozen=True)
class ConnectorConfig:
    kind: str = LINEAR
    d_vit: int = 64
    d_lm: int = 128
    hidden: int | None = None   # defaults to d_lm for the MLP variant

    def to_dict(self):
        return dict(kind=self.kind, d_vit=self.d_vit, d_lm=self.d_lm,
                    hidden=self.hidden)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Connector:
    def __init__(self, cfg, rng=None, params=None, prefix="connector"):
        self.cfg = cfg
        self.prefix = prefix
        if params is not None:
            self.params = params
            return
        rng = rng or np.random.default_rng(0)
        p = ParamTree()
        if cfg.kind == LINEAR:
            p[f"{prefix}.w"] = Tensor(
                rng.normal(0.0, 1.0 / math.sqrt(cfg.d_vit),
                           size=(cfg.d_vit, cfg.d_lm)).astype(np.float32),
                requires_grad=True)
            p[f"{prefix}.b"] = Tensor(np.zeros(cfg.d_lm, dtype=np.float32),
                                      requires_grad=True)
        elif cfg.kind == MLP:
            hidden = cfg.hidden or cfg.d_lm
            for name, (fi, fo) in (("fc1", (cfg.d_vit, hidden)),
                                   ("fc2", (hidden, cfg.d_lm))):
                p[f"{prefix}.{name}.w"] = Tensor(
                    rng.normal(0.0, 1.0 / math.sqrt(fi),
                               size=(fi, fo)).astype(np.float32),
                    requires_grad=True)
                p[f"{prefix}.{name}.b"] = Tensor(
                    np.zeros(fo, dtype=np.float32), requires_grad=True)
        else:
            raise ValueError(f"unknown connector kind {cfg.kind!r}")
        self.params = p

    def project(self, tokens):
        """[..., N, d_vit] -> [..., N, d_lm]."""
        if tokens.shape[-1] != self.cfg.d_vit:
            raise ValueError(
                f"connector expects width {self.cfg.d_vit}, "
                f"got {tokens.shape[-1]}")
        p, pre = self.params, self.prefix
        if self.cfg.kind == LINEAR:
            return T.matmul(tokens, p[f"{pre}.w"]) + p[f"{pre}.b"]
        h = T.matmul(tokens, p[f"{pre}.fc1.w"]) + p[f"{pre}.fc1.b"]
        return T.matmul(T.gelu(h), p[f"{pre}.fc2.w"]) + p[f"{pre}.fc2.b"]
