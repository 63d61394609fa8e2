"""Bit-packed binary codes, XOR/popcount Hamming distance and exhaustive
ranked retrieval."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CODES_MAGIC = b"PWB1"
_CODES_HEADER = struct.Struct("<IIQ")


def sign(V):
    """Elementwise sign with ``sign(0) = +1``, as float ±1."""
    return np.where(np.asarray(V) >= 0, 1.0, -1.0)


@dataclass(frozen=True)
class BinaryCodes:
    """``n`` codes of ``r`` bits; code ``i`` is ``words[i]`` (little-endian
    words, bit ``j`` set iff entry ``j`` is +1, padding bits zero)."""

    r: int
    words: np.ndarray  # (n, ceil(r/64)) uint64

    @property
    def n(self):
        return self.words.shape[0]

    def __len__(self):
        return self.n

    def __getitem__(self, idx):
        idx = np.atleast_1d(np.arange(self.n)[idx])
        return BinaryCodes(self.r, self.words[idx])

    def unpack(self):
        return unpack(self)


def n_words(r):
    return (r + 63) // 64


def pack(codes):
    """Pack an ``r x n`` matrix of ±1 entries."""
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[:, None]
    if not np.all((codes == 1) | (codes == -1)):
        raise ValueError("codes must contain only +1/-1 entries")
    r, n = codes.shape
    nw = n_words(r)
    bits = np.zeros((n, nw * 64), dtype=np.uint8)
    bits[:, :r] = (codes.T > 0)
    # packbits is big-endian within a byte; 'little' puts bit j at position j
    packed = np.packbits(bits, axis=1, bitorder="little")
    words = packed.view("<u8").astype(np.uint64).reshape(n, nw)
    return BinaryCodes(r, words)


def unpack(codes):
    """Inverse of ``pack``: the ``r x n`` ±1 float matrix."""
    raw = codes.words.astype("<u8").view(np.uint8).reshape(codes.n, -1)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, :codes.r]
    return np.where(bits.T == 1, 1.0, -1.0)


def _padding_mask(r):
    nw = n_words(r)
    mask = np.full(nw, np.uint64(0xFFFFFFFFFFFFFFFF))
    rem = r % 64
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def hamming_distance(a, b):
    """Number of differing bits between two single codes."""
    if a.r != b.r:
        raise ValueError(f"code length mismatch: {a.r} vs {b.r}")
    if a.n != 1 or b.n != 1:
        raise ValueError("hamming_distance compares single codes; use hamming_matrix")
    x = (a.words[0] ^ b.words[0]) & _padding_mask(a.r)
    return int(np.bitwise_count(x).sum())


def hamming_matrix(queries, database):
    """``(n_q, n_db)`` matrix of Hamming distances."""
    if queries.r != database.r:
        raise ValueError(f"code length mismatch: {queries.r} vs {database.r}")
    mask = _padding_mask(queries.r)
    out = np.zeros((queries.n, database.n), dtype=np.int64)
    for w in range(queries.words.shape[1]):
        x = (queries.words[:, w, None] ^ database.words[None, :, w]) & mask[w]
        out += np.bitwise_count(x)
    return out


@dataclass(frozen=True)
class RankedResult:
    """Per-query database indices by ascending distance, and those distances."""

    indices: np.ndarray    # (n_q, n_db)
    distances: np.ndarray  # (n_q, n_db), nondecreasing along rows


def retrieve(queries, database):
    """Rank the whole database for every query; ties go to the lower index."""
    D = hamming_matrix(queries, database)
    order = np.argsort(D, axis=1, kind="stable")
    return RankedResult(order, np.take_along_axis(D, order, axis=1))


def save_codes(path, codes):
    with open(path, "wb") as fh:
        fh.write(CODES_MAGIC)
        fh.write(_CODES_HEADER.pack(1, codes.r, codes.n))
        fh.write(codes.words.astype("<u8").tobytes())


def load_codes(path):
    raw = Path(path).read_bytes()
    head = len(CODES_MAGIC) + _CODES_HEADER.size
    if len(raw) < head or raw[:4] != CODES_MAGIC:
        raise ValueError(f"{path}: malformed codes header")
    version, r, n = _CODES_HEADER.unpack_from(raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    nw = n_words(r)
    if len(raw) - head != n * nw * 8:
        raise ValueError(f"{path}: payload size does not match r={r}, n={n}")
    words = np.frombuffer(raw, dtype="<u8", offset=head).astype(np.uint64).reshape(n, nw)
    if r % 64 and np.any(words[:, -1] & ~_padding_mask(r)[-1]):
        raise ValueError(f"{path}: nonzero padding bits")
    return BinaryCodes(int(r), words)
