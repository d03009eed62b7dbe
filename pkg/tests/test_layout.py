"""Sequence assembly, attention-mask oracle, and loss-weight contracts."""

import numpy as np
import pytest

from shapelab.layout import (BOS, EOS, IMG, IMG_SENTINEL, PAD, PREFIX, SEP,
                             SUFFIX, LossMode, MaskMode, SequenceLayout,
                             assemble, attention_mask, loss_weights)
from shapelab.vocab import VocabSpec

V = VocabSpec()


def brute_force_mask(layout, mode):
    """Independent per-pair rule evaluator.

    Rules: under PREFIX_LM the bidirectional block is IMG+BOS+PREFIX+SEP;
    under AR_PREFIX it is IMG only; under AR_ALL it is empty. A row inside
    the block attends to exactly the block; any other row attends to j <= i.
    """
    n = layout.total_len
    if mode is MaskMode.PREFIX_LM:
        block_len = layout.n_img + layout.n_prefix + 2
    elif mode is MaskMode.AR_PREFIX:
        block_len = layout.n_img
    else:
        block_len = 0
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if i < block_len:
                out[i, j] = j < block_len
            else:
                out[i, j] = j <= i
    return out


def test_mask_oracle_equivalence_random_layouts():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n_img = int(rng.integers(0, 8))
        n_prefix = int(rng.integers(0, 8))
        n_suffix = int(rng.integers(0, 8))
        total = n_img + n_prefix + n_suffix + 3 + int(rng.integers(0, 5))
        layout = SequenceLayout(n_img, n_prefix, n_suffix, total)
        for mode in MaskMode:
            np.testing.assert_array_equal(
                attention_mask(layout, mode), brute_force_mask(layout, mode),
                err_msg=f"{layout} {mode}")


def test_assemble_layout_and_ids():
    prefix = [10, 11, 12]
    suffix = [20, 21]
    ids, layout = assemble(4, prefix, suffix, 12, V)
    assert list(ids[:4]) == [IMG_SENTINEL] * 4
    assert ids[4] == V.bos
    assert list(ids[5:8]) == prefix
    assert ids[8] == V.sep
    assert list(ids[9:11]) == suffix
    assert ids[11] == V.eos
    seg = layout.segments
    assert list(seg) == [IMG] * 4 + [BOS] + [PREFIX] * 3 + [SEP] + \
        [SUFFIX] * 2 + [EOS]
    assert layout.prefill_len == 9


def test_assemble_pads_tail():
    ids, layout = assemble(2, [1], [2], 10, V)
    assert list(ids[-3:]) == [V.pad] * 3
    assert list(layout.segments[-3:]) == [PAD] * 3


def test_assemble_overflow_raises():
    with pytest.raises(ValueError):
        assemble(4, [1, 2, 3], [4, 5], 11, V)


def test_loss_weights_suffix_only():
    layout = SequenceLayout(3, 2, 4, 14)
    w = loss_weights(layout)
    seg = layout.segments
    np.testing.assert_array_equal(w[(seg == SUFFIX) | (seg == EOS)], 1.0)
    np.testing.assert_array_equal(
        w[(seg == IMG) | (seg == BOS) | (seg == PREFIX) | (seg == SEP)
          | (seg == PAD)], 0.0)


def test_loss_weights_supervised_prefix_requires_causal_mask():
    layout = SequenceLayout(3, 2, 4, 14)
    with pytest.raises(ValueError):
        loss_weights(layout, LossMode(supervise_prefix=True),
                     MaskMode.PREFIX_LM)
    w = loss_weights(layout, LossMode(supervise_prefix=True), MaskMode.AR_ALL)
    seg = layout.segments
    np.testing.assert_array_equal(w[(seg == PREFIX) | (seg == SEP)], 1.0)
    np.testing.assert_array_equal(w[(seg == IMG) | (seg == BOS)
                                    | (seg == PAD)], 0.0)


def test_pad_rows_never_attended_by_content():
    """Content rows precede PAD, so causal attention can never reach PAD."""
    layout = SequenceLayout(2, 2, 2, 12)
    seg = layout.segments
    for mode in MaskMode:
        mask = attention_mask(layout, mode)
        content = seg != PAD
        assert not mask[np.ix_(content, ~content)].any()


def test_total_len_too_small_rejected():
    with pytest.raises(ValueError):
        SequenceLayout(4, 4, 4, 14)
