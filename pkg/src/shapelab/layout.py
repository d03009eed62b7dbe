"""Input sequence assembly plus attention and loss masks.

A model input is laid out as

    [IMG x n_img, BOS, PREFIX x n_prefix, SEP, SUFFIX x n_suffix, EOS, PAD...]

Image positions carry a sentinel id (their embeddings come from the
vision pathway, never the vocabulary table). Attention masks support the
default prefix-LM pattern and the two ablated variants; loss weights
follow the next-token-prediction convention where the weight at position
i applies to predicting the token *at* i from position i-1.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .vocab import VocabSpec

IMG_SENTINEL = -1

# per-position segment labels
IMG, BOS, PREFIX, SEP, SUFFIX, EOS, PAD = range(7)
SEGMENT_NAMES = ("IMG", "BOS", "PREFIX", "SEP", "SUFFIX", "EOS", "PAD")


class MaskMode(Enum):
    PREFIX_LM = "prefix_lm"
    AR_PREFIX = "ar_prefix"
    AR_ALL = "ar_all"


@dataclass(frozen=True)
class LossMode:
    suffix_only: bool = True
    supervise_prefix: bool = False


@dataclass(frozen=True)
class SequenceLayout:
    n_img: int
    n_prefix: int
    n_suffix: int
    total_len: int

    def __post_init__(self):
        if self.total_len < self.n_img + self.n_prefix + self.n_suffix + 3:
            raise ValueError("total_len too small for layout")

    @property
    def segments(self):
        seg = np.full(self.total_len, PAD, dtype=np.int8)
        i = 0
        seg[i:i + self.n_img] = IMG
        i += self.n_img
        seg[i] = BOS
        i += 1
        seg[i:i + self.n_prefix] = PREFIX
        i += self.n_prefix
        seg[i] = SEP
        i += 1
        seg[i:i + self.n_suffix] = SUFFIX
        i += self.n_suffix
        seg[i] = EOS
        return seg

    @property
    def prefill_len(self):
        """Length of the bidirectional block: image + BOS + prefix + SEP."""
        return self.n_img + self.n_prefix + 2


def assemble(n_img, prefix_ids, suffix_ids, total_len, vocab=None):
    """Build the padded token id vector and its layout.

    Returns ``(ids, layout)`` where image positions hold ``IMG_SENTINEL``.
    """
    vocab = vocab or VocabSpec()
    need = n_img + len(prefix_ids) + len(suffix_ids) + 3
    if need > total_len:
        raise ValueError(
            f"sequence of length {need} overflows total_len={total_len}")
    layout = SequenceLayout(n_img, len(prefix_ids), len(suffix_ids), total_len)
    ids = np.full(total_len, vocab.pad, dtype=np.int64)
    ids[:n_img] = IMG_SENTINEL
    i = n_img
    ids[i] = vocab.bos
    i += 1
    ids[i:i + len(prefix_ids)] = prefix_ids
    i += len(prefix_ids)
    ids[i] = vocab.sep
    i += 1
    ids[i:i + len(suffix_ids)] = suffix_ids
    i += len(suffix_ids)
    ids[i] = vocab.eos
    return ids, layout


def attention_mask(layout, mode=MaskMode.PREFIX_LM):
    """Boolean [total_len, total_len] matrix; (i, j) true iff i may attend to j.

    PREFIX_LM: the IMG/BOS/PREFIX/SEP block is fully bidirectional within
    itself; every later position (suffix, EOS, and the PAD tail) attends
    causally. AR_PREFIX keeps bidirectionality only over IMG. AR_ALL is
    fully causal.
    """
    n = layout.total_len
    idx = np.arange(n)
    causal = idx[:, None] >= idx[None, :]
    if mode is MaskMode.AR_ALL:
        return causal
    if mode is MaskMode.AR_PREFIX:
        block = idx < layout.n_img
    else:
        block = idx < layout.prefill_len
    mask = causal.copy()
    bidir = block[:, None] & block[None, :]
    mask |= bidir
    # rows inside the block see only the block
    mask[block] = bidir[block]
    return mask


def loss_weights(layout, loss_mode=LossMode(), mask_mode=MaskMode.PREFIX_LM):
    """Per-position loss weights under the next-token convention.

    SUFFIX and EOS positions are always supervised; PREFIX and SEP are
    added when ``supervise_prefix`` (which requires a causal prefix mask);
    IMG, BOS, and PAD are never supervised.
    """
    if loss_mode.supervise_prefix and mask_mode is MaskMode.PREFIX_LM:
        raise ValueError(
            "prefix supervision requires an autoregressive prefix mask")
    seg = layout.segments
    w = np.zeros(layout.total_len, dtype=np.float32)
    w[(seg == SUFFIX) | (seg == EOS)] = 1.0
    if loss_mode.supervise_prefix:
        w[(seg == PREFIX) | (seg == SEP)] = 1.0
    return w
