"""Adam with decoupled weight decay and global-norm gradient clipping.

Defaults: beta1=0.9, beta2=0.999, eps=1e-8, clip 1.0. Weight decay is
skipped for biases and norm gains (any parameter of rank < 2).
"""

from __future__ import annotations

import numpy as np


def global_grad_norm(params):
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_global_norm(params, max_norm):
    norm = global_grad_norm(params)
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for t in params.values():
            if t.grad is not None:
                t.grad *= factor
    return norm


class AdamW:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, clip_norm=1.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(params[k].data) for k in params.keys()}
        self.v = {k: np.zeros_like(params[k].data) for k in params.keys()}

    def step(self, lr, lr_overrides=None, trainable=None):
        """Apply one update. ``lr_overrides`` maps path prefixes to rates;
        ``trainable`` (when given) restricts updates to listed paths."""
        grad_norm = clip_global_norm(self.params, self.clip_norm)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** t
        bias2 = 1.0 - b2 ** t
        for key in self.params.keys():
            if trainable is not None and key not in trainable:
                continue
            p = self.params[key]
            if p.grad is None:
                continue
            rate = lr
            if lr_overrides:
                for prefix, r in lr_overrides.items():
                    if key == prefix or key.startswith(prefix + "."):
                        rate = r
                        break
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= rate * update
        return grad_norm

    def state_dict(self):
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = state["step_count"]
        for k in self.m:
            self.m[k] = state["m"][k].copy()
            self.v[k] = state["v"][k].copy()
