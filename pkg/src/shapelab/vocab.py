"""Vocabulary layout and byte-level tokenizer.

The vocabulary is laid out as contiguous reserved blocks:

    [0, 256)       raw UTF-8 bytes
    [256, 261)     control tokens: BOS, EOS, SEP, PAD, UNK
    [261, 1285)    1024 location tokens <loc0000>..<loc1023>
    [1285, 1413)   128 segmentation tokens <seg000>..<seg127>

Text is tokenized one token per UTF-8 byte, which is lossless and
deterministic. SEP has a dedicated id distinct from the newline byte, so a
separator can never be merged with prefix or suffix content.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

BYTE_BLOCK_SIZE = 256
N_CONTROL = 5
N_LOC = 1024
N_SEG = 128

_LOC_RE = re.compile(r"<loc(\d{4})>")
_SEG_RE = re.compile(r"<seg(\d{3})>")
_SPECIAL_RE = re.compile(r"<loc\d{4}>|<seg\d{3}>")


@dataclass(frozen=True)
class VocabSpec:
    """Block layout of the token id space."""

    byte_start: int = 0
    control_start: int = BYTE_BLOCK_SIZE
    loc_start: int = BYTE_BLOCK_SIZE + N_CONTROL
    seg_start: int = BYTE_BLOCK_SIZE + N_CONTROL + N_LOC
    size: int = BYTE_BLOCK_SIZE + N_CONTROL + N_LOC + N_SEG

    @property
    def bos(self):
        return self.control_start

    @property
    def eos(self):
        return self.control_start + 1

    @property
    def sep(self):
        return self.control_start + 2

    @property
    def pad(self):
        return self.control_start + 3

    @property
    def unk(self):
        return self.control_start + 4

    def is_byte(self, tid):
        return self.byte_start <= tid < self.byte_start + BYTE_BLOCK_SIZE

    def is_control(self, tid):
        return self.control_start <= tid < self.control_start + N_CONTROL

    def is_loc(self, tid):
        return self.loc_start <= tid < self.loc_start + N_LOC

    def is_seg(self, tid):
        return self.seg_start <= tid < self.seg_start + N_SEG

    def loc_id(self, k):
        if not 0 <= k < N_LOC:
            raise ValueError(f"location bin {k} out of range")
        return self.loc_start + k

    def seg_id(self, k):
        if not 0 <= k < N_SEG:
            raise ValueError(f"segmentation code {k} out of range")
        return self.seg_start + k

    def loc_bin(self, tid):
        if not self.is_loc(tid):
            raise ValueError(f"id {tid} is not a location token")
        return tid - self.loc_start

    def seg_code(self, tid):
        if not self.is_seg(tid):
            raise ValueError(f"id {tid} is not a segmentation token")
        return tid - self.seg_start

    def to_dict(self):
        return {
            "byte_start": self.byte_start,
            "control_start": self.control_start,
            "loc_start": self.loc_start,
            "seg_start": self.seg_start,
            "size": self.size,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def encode_text(text, vocab=None, for_prefix=False):
    """Tokenize UTF-8 text, one id per byte.

    ``<locNNNN>`` / ``<segNNN>`` spellings are recognized and mapped to
    their reserved ids so formatted suffixes roundtrip. When
    ``for_prefix`` is set, a raw newline is rejected (the separator id is
    inserted by sequence assembly, never by the tokenizer).
    """
    vocab = vocab or VocabSpec()
    if for_prefix and "\n" in text:
        raise ValueError("newline is not allowed inside a prefix")
    ids = []
    pos = 0
    for m in _SPECIAL_RE.finditer(text):
        ids.extend(text[pos:m.start()].encode("utf-8"))
        tok = m.group(0)
        if tok.startswith("<loc"):
            ids.append(vocab.loc_id(int(tok[4:8])))
        else:
            ids.append(vocab.seg_id(int(tok[4:7])))
        pos = m.end()
    ids.extend(text[pos:].encode("utf-8"))
    return ids


def decode_text(ids, vocab=None):
    """Inverse of ``encode_text`` on control-free sequences.

    Location and segmentation ids render as their literal spellings; byte
    ids concatenate back to UTF-8 (malformed sequences, which a model is
    free to emit, decode with replacement characters). Control ids must be
    stripped by the caller first.
    """
    vocab = vocab or VocabSpec()
    parts = []
    pending = bytearray()
    for tid in ids:
        if vocab.is_byte(tid):
            pending.append(tid)
            continue
        if pending:
            parts.append(pending.decode("utf-8", errors="replace"))
            pending = bytearray()
        if vocab.is_loc(tid):
            parts.append(f"<loc{vocab.loc_bin(tid):04d}>")
        elif vocab.is_seg(tid):
            parts.append(f"<seg{vocab.seg_code(tid):03d}>")
        else:
            raise ValueError(f"cannot decode control or invalid id {tid}")
    if pending:
        parts.append(pending.decode("utf-8", errors="replace"))
    return "".join(parts)
