"""Decoder LM: RoPE properties, tied embeddings, new-token initialization."""

import numpy as np
import pytest

from shapelab.layout import SequenceLayout
from shapelab.lm import (AVG_EMB, GAUSSIAN, DecoderLM, InitStrategy, LMConfig,
                         _apply_rope, _rope_tables, mask_to_bias,
                         rope_positions)
from shapelab.tensor import Tensor

CFG = LMConfig(d_lm=32, depth=2, heads=2, vocab=100, max_len=48)
RNG = np.random.default_rng(0)


def test_rope_inner_product_is_shift_invariant():
    """q at position p and k at position q: the rotated dot product depends
    only on p - q, the defining property of rotary embeddings."""
    dh = 8
    q = RNG.normal(size=(1, 1, 1, dh)).astype(np.float32)
    k = RNG.normal(size=(1, 1, 1, dh)).astype(np.float32)

    def dot(pq, pk):
        cq, sq = _rope_tables(np.array([pq], dtype=np.float32), dh, 10000.0)
        ck, sk = _rope_tables(np.array([pk], dtype=np.float32), dh, 10000.0)
        rq = _apply_rope(Tensor(q), cq, sq).data
        rk = _apply_rope(Tensor(k), ck, sk).data
        return float((rq * rk).sum())

    base = dot(7.0, 3.0)
    for shift in (1.0, 5.0, 11.5):
        assert dot(7.0 + shift, 3.0 + shift) == pytest.approx(base, abs=1e-4)


def test_rope_zero_position_is_identity():
    dh = 8
    x = RNG.normal(size=(1, 1, 3, dh)).astype(np.float32)
    cos, sin = _rope_tables(np.zeros(3, dtype=np.float32), dh, 10000.0)
    np.testing.assert_allclose(_apply_rope(Tensor(x), cos, sin).data, x,
                               atol=1e-6)


def test_rope_preserves_norm():
    dh = 16
    x = RNG.normal(size=(2, 2, 5, dh)).astype(np.float32)
    cos, sin = _rope_tables(np.arange(5, dtype=np.float32), dh, 10000.0)
    out = _apply_rope(Tensor(x), cos, sin).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1),
                               np.linalg.norm(x, axis=-1), atol=1e-4)


def test_rope_positions_interpolated_images():
    layout = SequenceLayout(n_img=64, n_prefix=3, n_suffix=2, total_len=80)
    pos = rope_positions(layout, interpolate=True, native_n_img=16)
    # image positions compressed into the native range [0, 16)
    assert pos[0] == 0.0
    assert pos[63] == pytest.approx(63 * 16 / 64)
    assert pos[63] < 16.0
    # text picks up at the native image length
    assert pos[64] == 16.0
    assert pos[65] == 17.0


def test_rope_positions_plain():
    layout = SequenceLayout(n_img=4, n_prefix=2, n_suffix=2, total_len=12)
    np.testing.assert_array_equal(rope_positions(layout), np.arange(12))
    # interpolation only kicks in above the native grid
    np.testing.assert_array_equal(
        rope_positions(layout, interpolate=True, native_n_img=4),
        np.arange(12))


def test_tied_embeddings_share_storage():
    lm = DecoderLM(CFG, rng=np.random.default_rng(1))
    x = RNG.normal(size=(3, CFG.d_lm)).astype(np.float32)
    mask = np.tril(np.ones((3, 3), dtype=bool))
    pos = np.arange(3, dtype=np.float32)
    before = lm.forward(Tensor(x), mask, pos).data
    lm.params["lm.embed"].data[:] *= 2.0
    after = lm.forward(Tensor(x), mask, pos).data
    assert not np.allclose(before, after)
    assert lm.embed_table is lm.params["lm.embed"]


def test_embed_lookup_matches_table():
    lm = DecoderLM(CFG, rng=np.random.default_rng(1))
    ids = np.array([[5, 17], [99, 0]])
    out = lm.embed(ids).data
    np.testing.assert_array_equal(out, lm.params["lm.embed"].data[ids])


def test_init_new_tokens_gaussian_statistics():
    lm = DecoderLM(LMConfig(d_lm=64, depth=1, heads=2, vocab=2000,
                            max_len=8), rng=np.random.default_rng(1))
    new = np.arange(1000, 2000)
    lm.init_new_tokens(new, InitStrategy(kind=GAUSSIAN, sigma=0.02),
                       np.random.default_rng(2))
    rows = lm.params["lm.embed"].data[new]
    n = rows.size
    assert abs(rows.mean()) < 3 * 0.02 / np.sqrt(n)
    assert abs(rows.std() - 0.02) < 0.002


def test_init_new_tokens_avg_emb_is_mean_of_old_rows():
    lm = DecoderLM(CFG, rng=np.random.default_rng(1))
    new = np.array([90, 95, 99])
    old = np.setdiff1d(np.arange(CFG.vocab), new)
    expected = lm.params["lm.embed"].data[old].mean(axis=0)
    lm.init_new_tokens(new, InitStrategy(kind=AVG_EMB),
                       np.random.default_rng(0))
    for t in new:
        np.testing.assert_allclose(lm.params["lm.embed"].data[t], expected,
                                   atol=1e-7)


def test_init_new_tokens_avg_emb_noise():
    lm = DecoderLM(CFG, rng=np.random.default_rng(1))
    new = np.array([1, 2])
    lm.init_new_tokens(new, InitStrategy(kind=AVG_EMB, noise=0.01),
                       np.random.default_rng(0))
    r1, r2 = lm.params["lm.embed"].data[new]
    assert not np.allclose(r1, r2)


def test_init_new_tokens_errors():
    lm = DecoderLM(CFG, rng=np.random.default_rng(1))
    with pytest.raises(ValueError):
        lm.init_new_tokens(np.array([100]), InitStrategy(),
                           np.random.default_rng(0))
    with pytest.raises(ValueError):
        lm.init_new_tokens(np.arange(100), InitStrategy(kind=AVG_EMB),
                           np.random.default_rng(0))
    with pytest.raises(ValueError):
        InitStrategy(sigma=0.0)


def test_forward_batch_and_single_agree():
    lm = DecoderLM(CFG, rng=np.random.default_rng(1))
    x = RNG.normal(size=(2, 5, CFG.d_lm)).astype(np.float32)
    mask = np.tril(np.ones((5, 5), dtype=bool))
    pos = np.arange(5, dtype=np.float32)
    batched = lm.forward(Tensor(x), mask, pos).data
    single = lm.forward(Tensor(x[0]), mask, pos).data
    np.testing.assert_allclose(single, batched[0], atol=1e-5)
    assert batched.shape == (2, 5, CFG.vocab)


def test_forward_per_example_masks():
    lm = DecoderLM(CFG, rng=np.random.default_rng(1))
    x = RNG.normal(size=(2, 4, CFG.d_lm)).astype(np.float32)
    pos = np.arange(4, dtype=np.float32)
    causal = np.tril(np.ones((4, 4), dtype=bool))
    full = np.ones((4, 4), dtype=bool)
    stacked = lm.forward(Tensor(x), np.stack([causal, full]), pos).data
    np.testing.assert_allclose(stacked[0],
                               lm.forward(Tensor(x[0]), causal, pos).data,
                               atol=1e-5)
    np.testing.assert_allclose(stacked[1],
                               lm.forward(Tensor(x[1]), full, pos).data,
                               atol=1e-5)


def test_masked_out_position_cannot_influence_others():
    """Fully hiding one position (no row attends to it) leaves all other
    positions' logits unchanged when its content changes."""
    lm = DecoderLM(CFG, rng=np.random.default_rng(1))
    x = RNG.normal(size=(1, 5, CFG.d_lm)).astype(np.float32)
    pos = np.arange(5, dtype=np.float32)
    mask = np.tril(np.ones((5, 5), dtype=bool))
    mask[:, 2] = False
    mask[2, :] = False
    mask[2, 2] = True      # it still sees itself, keeping softmax defined
    base = lm.forward(Tensor(x), mask, pos).data
    x2 = x.copy()
    x2[0, 2] = RNG.normal(size=CFG.d_lm)
    out = lm.forward(Tensor(x2), mask, pos).data
    keep = np.array([0, 1, 3, 4])
    np.testing.assert_array_equal(out[0, keep], base[0, keep])
    assert not np.allclose(out[0, 2], base[0, 2])


def test_mask_shape_validation():
    lm = DecoderLM(CFG, rng=np.random.default_rng(1))
    x = RNG.normal(size=(1, 4, CFG.d_lm)).astype(np.float32)
    pos = np.arange(4, dtype=np.float32)
    with pytest.raises(ValueError):
        lm.forward(Tensor(x), np.ones((3, 3), dtype=bool), pos)
    with pytest.raises(ValueError):
        # rectangular mask without a cache
        lm.forward(Tensor(x), np.ones((4, 7), dtype=bool), pos)


def test_mask_to_bias_values():
    m = np.array([[True, False]])
    b = mask_to_bias(m)
    assert b[0, 0] == 0.0
    assert b[0, 1] == -1e9


def test_config_validation():
    with pytest.raises(ValueError):
        LMConfig(d_lm=30, heads=4)
    with pytest.raises(ValueError):
        LMConfig(d_lm=12, heads=4)   # head dim 3 is odd, breaks RoPE pairs
    LMConfig(d_lm=16, heads=4)
    assert LMConfig.from_dict(CFG.to_dict()) == CFG
