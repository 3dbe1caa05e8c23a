"""Independent bit-flip corruption of stored words.

Random masks come from counter-based Philox streams keyed by
``(seed, trial, parameter index)`` so a trial draws the same flips no matter
which worker runs it or in what order.  Exact corrupted-value laws are
obtained by enumerating all ``2**width`` flip patterns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import BitWord, NumericFormat, decode_codes

WEIGHTS_ONLY = "weights_only"
WEIGHTS_AND_QUANT_PARAMS = "weights_and_quant_params"
LUT_TABLES = "lut_tables"
SCOPES = (WEIGHTS_ONLY, WEIGHTS_AND_QUANT_PARAMS, LUT_TABLES)

MAX_ENUMERATION_WIDTH = 20


class EnumerationCapacityError(ValueError):
    """Raised when exhaustive enumeration would exceed the exactness budget."""


@dataclass(frozen=True)
class CorruptionSpec:
    p: float
    seed: int = 0
    scope: str = WEIGHTS_AND_QUANT_PARAMS

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"flip probability must lie in [0, 1], got {self.p}")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def make_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent Philox stream for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def flip_uniforms(stream: np.random.Generator, n_words: int, width: int) -> np.ndarray:
    """One uniform per stored bit; bit ``(i, k)`` flips at rate p iff ``u[i, k] < p``.

    Thresholding the same draws at several rates yields nested flip sets,
    which keeps BER sweeps coupled across the grid.
    """
    return stream.random((n_words, width))


def masks_from_uniforms(u: np.ndarray, p: float) -> np.ndarray:
    """Pack per-bit flip decisions ``u < p`` into uint64 XOR masks."""
    flips = (u < p).astype(np.uint64)
    weights = np.left_shift(np.uint64(1), np.arange(u.shape[-1], dtype=np.uint64))
    return (flips * weights).sum(axis=-1, dtype=np.uint64)


def sample_flip_mask(nbits: int, p: float, stream: np.random.Generator) -> BitWord:
    if not 1 <= nbits <= 64:
        raise ValueError("mask width must be in 1..64")
    u = flip_uniforms(stream, 1, nbits)
    return BitWord(int(masks_from_uniforms(u, p)[0]), nbits)


def apply_mask(word: BitWord, mask: BitWord) -> BitWord:
    if word.width != mask.width:
        raise ValueError(f"width mismatch: word {word.width}, mask {mask.width}")
    return BitWord(word.code ^ mask.code, word.width)


def popcount_codes(codes: np.ndarray) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint64).copy()
    count = np.zeros(c.shape, dtype=np.int64)
    while np.any(c):
        count += (c & np.uint64(1)).astype(np.int64)
        c >>= np.uint64(1)
    return count


def mask_probabilities(width: int, p: float) -> np.ndarray:
    """Probability of each of the ``2**width`` masks, indexed by mask code."""
    flips = popcount_codes(np.arange(1 << width, dtype=np.uint64))
    return np.power(p, flips) * np.power(1.0 - p, width - flips)


@dataclass
class ValueDistribution:
    """Discrete law over decoded values; non-finite atoms are kept but flagged."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.values.shape != self.probs.shape:
            raise ValueError("values and probabilities differ in length")
        if np.any(self.probs < 0):
            raise ValueError("negative probability")
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {self.probs.sum()!r}, not 1")

    @property
    def special(self) -> np.ndarray:
        return ~np.isfinite(self.values)

    @property
    def atoms(self) -> list:
        return list(zip(self.values.tolist(), self.probs.tolist()))

    def as_dict(self) -> dict:
        return dict(self.atoms)

    def collapsed(self) -> "ValueDistribution":
        """Merge atoms with equal value (NaNs merge together)."""
        vals, inv = np.unique(self.values, return_inverse=True)
        probs = np.zeros(len(vals))
        np.add.at(probs, inv, self.probs)
        return ValueDistribution(vals, probs)


def corrupted_distribution(word: BitWord, fmt: NumericFormat, p: float) -> ValueDistribution:
    """Exact law of the decoded value after independent flips at rate ``p``."""
    if word.width != fmt.width:
        raise ValueError(f"width mismatch: word has {word.width} bits, format {fmt.width}")
    if word.width > MAX_ENUMERATION_WIDTH:
        raise EnumerationCapacityError(
            f"enumerating {word.width}-bit words needs 2**{word.width} atoms; "
            f"limit is {MAX_ENUMERATION_WIDTH} bits"
        )
    masks = np.arange(1 << word.width, dtype=np.uint64)
    probs = mask_probabilities(word.width, p)
    keep = probs > 0
    values = decode_codes(masks[keep] ^ np.uint64(word.code), fmt)
    return ValueDistribution(values, probs[keep]).collapsed()


def moments(dist: ValueDistribution, exclude_specials: bool = True,
            renormalize: bool = False) -> tuple:
    """Mean and raw second moment of the finite atoms.

    Special atoms are dropped without renormalizing, i.e. the moments are
    taken against the finite sub-probability measure.  Pass
    ``renormalize=True`` to condition on a finite outcome instead.
    """
    special = dist.special
    if special.all():
        raise ValueError("distribution has no finite atoms")
    if special.any() and not exclude_specials:
        return float("nan"), float("nan")
    v = dist.values[~special]
    w = dist.probs[~special]
    if renormalize:
        w = w / w.sum()
    return float(np.dot(w, v)), float(np.dot(w, v * v))
