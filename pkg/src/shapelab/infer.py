"""Prefill/extend decoding with a KV cache, beam search, and benchmarking.

Prefill processes [image tokens, BOS, prefix, SEP] in one pass under the
bidirectional block mask and fills the cache; extend advances one token
at a time attending to everything cached. The cached path is numerically
equivalent to recomputing the full forward (same code path, same mask
semantics).
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layout import IMG_SENTINEL, MaskMode, SequenceLayout, attention_mask
from .vocab import VocabSpec, encode_text

GREEDY = "greedy"
BEAM = "beam"


class KvCache:
    """Per-layer key/value buffers [batch, heads, capacity, head_dim]."""

    def __init__(self, layers, batch, heads, head_dim, capacity):
        self.capacity = capacity
        self.fill = 0
        self.keys = [np.zeros((batch, heads, capacity, head_dim),
                              dtype=np.float32) for _ in range(layers)]
        self.values = [np.zeros((batch, heads, capacity, head_dim),
                                dtype=np.float32) for _ in range(layers)]
        self._pending = 0

    def append(self, layer, k, v):
        """Store new keys/values for one layer; returns the filled views.

        The fill counter advances once per forward pass (after the last
        layer), so every layer sees the same pre-call fill.
        """
        n = k.shape[2]
        if self.fill + n > self.capacity:
            raise ValueError("KV cache capacity overflow")
        self.keys[layer][:, :, self.fill:self.fill + n] = k
        self.values[layer][:, :, self.fill:self.fill + n] = v
        if layer == len(self.keys) - 1:
            self._pending = n
        return (self.keys[layer][:, :, :self.fill + n],
                self.values[layer][:, :, :self.fill + n])

    def commit(self):
        self.fill += self._pending
        self._pending = 0

    def clone(self):
        out = KvCache.__new__(KvCache)
        out.capacity = self.capacity
        out.fill = self.fill
        out._pending = 0
        out.keys = [k.copy() for k in self.keys]
        out.values = [v.copy() for v in self.values]
        return out

    def live_bytes(self):
        return sum(k.nbytes + v.nbytes
                   for k, v in zip(self.keys, self.values))


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = GREEDY
    beam_width: int = 1
    max_new_tokens: int = 32
    length_norm_power: float = 1.0

    def __post_init__(self):
        if self.mode == BEAM and self.beam_width < 1:
            raise ValueError("beam width must be >= 1")


def prefill(model, images, prefix_ids, capacity=None, window=False):
    """Run the bidirectional block; returns (cache, logits at SEP) per example.

    ``images`` is [B, n_images, res, res, 3]; ``prefix_ids`` a list of id
    lists (same length across the batch; prefixes are not padded here).
    """
    vocab = model.vocab
    n_img = model.cfg.n_img * (4 if window else 1)
    lengths = {len(p) for p in prefix_ids}
    if len(lengths) != 1:
        raise ValueError("prefill batch requires equal-length prefixes")
    n_prefix = lengths.pop()
    plen = n_img + n_prefix + 2
    capacity = capacity or plen + 64
    if capacity < plen:
        raise ValueError("cache capacity below prefill length")
    b = len(prefix_ids)
    ids = np.empty((b, plen), dtype=np.int64)
    for i, p in enumerate(prefix_ids):
        ids[i, :n_img] = IMG_SENTINEL
        ids[i, n_img] = vocab.bos
        ids[i, n_img + 1:n_img + 1 + n_prefix] = p
        ids[i, -1] = vocab.sep
    mask = np.ones((plen, plen), dtype=bool)   # block is fully bidirectional
    cache = KvCache(model.cfg.lm.depth, b, model.cfg.lm.heads,
                    model.cfg.lm.head_dim, capacity)
    positions = np.arange(plen, dtype=np.float32)
    with T.no_grad():
        img_tokens = model.image_tokens(images, window=window)
        x = model.embed_inputs(ids, img_tokens, n_img)
        logits = model.lm.forward(x, mask, positions, cache=cache)
    cache.commit()
    return cache, logits.data[:, -1, :]


def extend(model, cache, token_ids):
    """Advance one position; ``token_ids`` is [B]. Returns [B, vocab] logits."""
    if cache.fill >= cache.capacity:
        raise ValueError("KV cache capacity overflow")
    b = len(token_ids)
    mask = np.ones((1, cache.fill + 1), dtype=bool)
    positions = np.array([cache.fill], dtype=np.float32)
    with T.no_grad():
        x = model.lm.embed(np.asarray(token_ids)[:, None])
        logits = model.lm.forward(x, mask, positions, cache=cache)
    cache.commit()
    return logits.data[:, -1, :]


def decode(model, images, prefix, cfg=DecodeConfig(), capacity=None,
           window=False):
    """Decode a suffix for one example; returns (token ids, mean logprob)."""
    vocab = model.vocab
    if isinstance(prefix, str):
        prefix = encode_text(prefix, vocab, for_prefix=True)
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    images = images[None]    # batch of one
    n_img = model.cfg.n_img * (4 if window else 1)
    capacity = capacity or n_img + len(prefix) + 2 + cfg.max_new_tokens
    cache, logits = prefill(model, images, [prefix], capacity, window=window)
    if cfg.mode == GREEDY or (cfg.mode == BEAM and cfg.beam_width == 1):
        return _greedy(model, cache, logits[0], vocab, cfg)
    return _beam(model, cache, logits[0], vocab, cfg)


def _log_softmax(x):
    m = x.max()
    return x - m - np.log(np.exp(x - m).sum())


def _greedy(model, cache, logits, vocab, cfg):
    tokens = []
    total = 0.0
    for _ in range(cfg.max_new_tokens):
        logp = _log_softmax(logits)
        tok = int(logp.argmax())
        tokens.append(tok)
        total += float(logp[tok])
        if tok == vocab.eos:
            break
        logits = extend(model, cache, [tok])[0]
    return tokens, total / max(len(tokens), 1) ** cfg.length_norm_power


def _beam(model, cache, logits, vocab, cfg):
    """Length-normalized beam search; best finished hypothesis wins, with
    an unfinished fallback when the budget runs out."""
    n = cfg.beam_width
    beams = [([], 0.0, cache, logits)]     # (tokens, logprob, cache, logits)
    finished = []
    for _ in range(cfg.max_new_tokens):
        candidates = []
        for tokens, score, bc, blogits in beams:
            logp = _log_softmax(blogits)
            top = np.argsort(logp)[::-1][:n]
            for tok in top:
                candidates.append((tokens + [int(tok)],
                                   score + float(logp[tok]), bc, None, int(tok)))
        candidates.sort(key=lambda c: _norm_score(c[1], len(c[0]),
                                                  cfg.length_norm_power),
                        reverse=True)
        next_beams = []
        for tokens, score, bc, _, tok in candidates:
            if tok == vocab.eos:
                finished.append((tokens, score))
            elif len(next_beams) < n:
                nc = bc.clone()
                nlogits = extend(model, nc, [tok])[0]
                next_beams.append((tokens, score, nc, nlogits))
            if len(next_beams) >= n:
                break
        beams = next_beams
        if not beams:
            break
    if not finished:
        finished = [(t, s) for t, s, _, _ in beams]
    if not finished:
        return [], float("-inf")
    best = max(finished, key=lambda f: _norm_score(f[1], len(f[0]),
                                                   cfg.length_norm_power))
    return best[0], _norm_score(best[1], len(best[0]), cfg.length_norm_power)


def _norm_score(logprob, length, power):
    return logprob / max(length, 1) ** power


def decode_text_output(model, images, prefix, cfg=DecodeConfig(), window=False):
    """Decode and render the suffix as text.

    Control ids are dropped before rendering: EOS terminates the output
    anyway, and a model is free to emit the others even though no target
    suffix contains them.
    """
    from .vocab import decode_text
    tokens, score = decode(model, images, prefix, cfg, window=window)
    vocab = model.vocab
    tokens = [t for t in tokens if not vocab.is_control(t)]
    return decode_text(tokens, vocab), score


def bench(model, batch_sizes=(1, 8, 64), prefill_len=None, cache_capacity=None,
          repeats=3, max_new=8, rng=None):
    """Prefill/extend throughput harness; returns a list of report rows.

    Walltimes are medians over ``repeats`` after one discarded warmup
    iteration; extend walltime is per token per stream.
    """
    rng = rng or np.random.default_rng(0)
    vocab = model.vocab
    res = model.cfg.encoder.res
    n_img = model.cfg.n_img
    n_prefix = (prefill_len - n_img - 2) if prefill_len else 6
    if n_prefix < 0:
        raise ValueError("prefill_len smaller than the image block")
    plen = n_img + n_prefix + 2
    capacity = cache_capacity or plen + max_new
    if capacity <= plen:
        raise ValueError("cache capacity must exceed prefill length")
    rows = []
    for bs in batch_sizes:
        images = rng.random((bs, model.cfg.n_images, res, res, 3)).astype(np.float32)
        prefixes = [list(rng.integers(0, 256, size=n_prefix)) for _ in range(bs)]
        prefill_times, extend_times = [], []
        mem_peak = 0
        for it in range(repeats + 1):
            tracemalloc.start()
            t0 = time.perf_counter()
            cache, logits = prefill(model, images, prefixes, capacity)
            t1 = time.perf_counter()
            toks = logits.argmax(axis=-1)
            for _ in range(max_new):
                logits = extend(model, cache, toks)
                toks = logits.argmax(axis=-1)
            t2 = time.perf_counter()
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            if it == 0:
                continue    # discard warmup
            prefill_times.append(t1 - t0)
            extend_times.append((t2 - t1) / max_new)
            mem_peak = max(mem_peak, peak + cache.live_bytes())
        pf = float(np.median(prefill_times))
        ex = float(np.median(extend_times))
        rows.append({
            "batch": bs,
            "prefill_len": plen,
            "cache_capacity": capacity,
            "prefill_walltime_ms": pf * 1e3,
            "extend_walltime_ms": ex * 1e3 / bs,
            "prefill_tokens_per_sec": bs * plen / pf,
            "extend_tokens_per_sec": bs / ex,
            "prefill_walltime_std_ms": float(np.std(prefill_times)) * 1e3,
            "extend_walltime_std_ms": float(np.std(extend_times)) * 1e3,
            "peak_memory_bytes": int(mem_peak),
        })
    return rows
