"""Brute-force oracles: exhaustive enumeration over every joint flip mask.

Nothing here uses the closed-form moments; values are decoded from the
corrupted codes and averaged with their exact mask probabilities.  The
``run_checks`` suite pits each closed form against its oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import analytic
from .fault_model import MAX_ENUMERATION_WIDTH, EnumerationCapacityError, popcount_codes
from .formats import (
    EXTENDED,
    BINARY,
    AffineQuantLayerParams,
    BitWord,
    FloatFormat,
    IntFormat,
    LutTable,
    decode_codes,
    encode_float,
    encode_int,
)


def _joint_masks(total_bits: int, p: float, budget: int):
    if total_bits > budget:
        raise EnumerationCapacityError(
            f"{total_bits} flippable bits exceed the enumeration budget of {budget}"
        )
    masks = np.arange(1 << total_bits, dtype=np.uint64)
    flips = popcount_codes(masks)
    probs = np.power(p, flips) * np.power(1.0 - p, total_bits - flips)
    keep = probs > 0
    return masks[keep], probs[keep]


def _field(masks: np.ndarray, offset: int, width: int) -> np.ndarray:
    return (masks >> np.uint64(offset)) & np.uint64((1 << width) - 1)


@dataclass(frozen=True)
class ErrorStats:
    mean: float          # E[y' - y]
    second: float        # E[(y' - y)^2]

    @property
    def variance(self) -> float:
        return self.second - self.mean ** 2


def _stats(delta: np.ndarray, probs: np.ndarray) -> ErrorStats:
    finite = np.isfinite(delta)
    d, w = delta[finite], probs[finite]
    return ErrorStats(float(np.dot(w, d)), float(np.dot(w, d * d)))


def neuron_error(x, codes, fmt, p: float, budget: int = MAX_ENUMERATION_WIDTH) -> ErrorStats:
    """Exact moments of ``y' - y`` for ``y = sum x_i w_i`` by joint enumeration."""
    x = np.asarray(x, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.uint64)
    width = fmt.width
    masks, probs = _joint_masks(width * len(codes), p, budget)
    w = decode_codes(codes, fmt)
    y = 0.0
    y_new = np.zeros(len(masks))
    for i, c in enumerate(codes):
        w_new = decode_codes(_field(masks, i * width, width) ^ c, fmt)
        y_new = y_new + x[i] * w_new
        y = y + x[i] * w[i]          # same summation order as y_new
    with np.errstate(invalid="ignore"):
        return _stats(y_new - y, probs)


def aq_error(x, weight_codes, params: AffineQuantLayerParams, p: float,
             corrupt_scale: bool = True, corrupt_zero_point: bool = True,
             budget: int = MAX_ENUMERATION_WIDTH) -> ErrorStats:
    """Joint enumeration for ``y = S * sum x_i (w_i - Z)`` over weight/Z/S masks."""
    x = np.asarray(x, dtype=np.float64)
    codes = np.asarray(weight_codes, dtype=np.uint64)
    wfmt, zfmt, sfmt = params.weight_format, params.zero_point_format, params.scale_format
    bw = wfmt.bits
    bz = zfmt.bits if corrupt_zero_point else 0
    bs = sfmt.width if corrupt_scale else 0
    n = len(codes)
    masks, probs = _joint_masks(n * bw + bz + bs, p, budget)

    w = decode_codes(codes, wfmt)
    z = params.zero_point
    s = params.scale
    acc = np.zeros(len(masks))
    acc_clean = 0.0
    for i, c in enumerate(codes):
        acc = acc + x[i] * decode_codes(_field(masks, i * bw, bw) ^ c, wfmt)
        acc_clean = acc_clean + x[i] * w[i]
    y = s * (acc_clean - z * x.sum())
    if bz:
        z_new = decode_codes(_field(masks, n * bw, bz) ^ np.uint64(params.zero_point_word.code), zfmt)
    else:
        z_new = np.full(len(masks), float(z))
    if bs:
        s_new = decode_codes(_field(masks, n * bw + bz, bs) ^ np.uint64(params.scale_word.code), sfmt)
    else:
        s_new = np.full(len(masks), s)
    with np.errstate(invalid="ignore", over="ignore"):
        y_new = s_new * (acc - z_new * x.sum())
        return _stats(y_new - y, probs)


def lut_single_flip_effect(table: LutTable, index: int) -> np.ndarray:
    """Per-address output change after flipping table entry ``index``."""
    clean = table.as_array()
    flipped = clean.copy()
    flipped[index] ^= 1
    return np.abs(flipped.astype(int) - clean.astype(int))


def full_corruption_recovery(table: LutTable, address_probs) -> float:
    """``P(y' = y)`` when address and contents are both complemented."""
    t = table.as_array()
    addresses = np.arange(table.size)
    corrupted = 1 - t[addresses ^ (table.size - 1)]
    return float(np.dot(np.asarray(address_probs, dtype=np.float64), corrupted == t))


# ---------------------------------------------------------------------------
# Check suite
# ---------------------------------------------------------------------------


P_GRID = (0.0, 0.01, 0.1, 0.5, 0.9, 1.0)


@dataclass
class CheckResult:
    name: str
    cases: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def rel_error(a: float, b: float) -> float:
    if a == b:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b))


def _random_int_instance(rng, n, bits):
    fmt = IntFormat(bits)
    w = rng.integers(fmt.min_value, fmt.max_value + 1, size=n)
    x = rng.normal(size=n)
    return x, [encode_int(int(v), fmt) for v in w], fmt


def _random_float_instance(rng, n, fmt):
    codes = rng.integers(0, 1 << fmt.width, size=n)
    x = rng.normal(size=n)
    return x, [BitWord(int(c), fmt.width) for c in codes]


def _alpha(table, probs):
    from .recovery import alpha
    return alpha(table, probs)


def default_formulas() -> Dict[str, Callable]:
    return {
        "int": analytic.int_neuron_mse,
        "float": analytic.float_neuron_mse,
        "bnn": analytic.bnn_neuron_mse,
        "aq_protected": analytic.aq_protected_mse,
        "aq_full": analytic.aq_corrupted_full_mse,
        "aq_accumulation": analytic.aq_corrupted_accumulation_variance,
        "recovery": _alpha,
    }


def run_checks(budget: int = 16, seed: int = 0, tolerance: float = 1e-10,
               formulas: Optional[Dict[str, Callable]] = None,
               p_grid=P_GRID) -> List[CheckResult]:
    """Closed form vs. enumeration for every neuron-level identity.

    ``formulas`` overrides individual closed forms, which lets a deliberately
    broken formula be fed through the same harness.
    """
    if budget > MAX_ENUMERATION_WIDTH:
        raise ValueError(f"budget may not exceed {MAX_ENUMERATION_WIDTH} bits")
    f = default_formulas()
    f.update(formulas or {})
    rng = np.random.default_rng(seed)
    results = []

    def check(name, pairs):
        errs = [rel_error(a, b) for a, b in pairs]
        results.append(CheckResult(name, len(errs), max(errs) if errs else 0.0, tolerance))

    pairs = []
    for bits in range(1, 7):
        for n in range(1, 4):
            if n * bits > budget:
                continue
            x, words, fmt = _random_int_instance(rng, n, bits)
            neuron = analytic.NeuronInstance(x, words, fmt)
            for p in p_grid:
                pairs.append((f["int"](neuron, p).total,
                              neuron_error(x, neuron.codes, fmt, p, budget).second))
    check("integer weights", pairs)

    pairs = []
    for e, m in ((2, 1), (2, 2), (3, 2), (4, 3)):
        fmt = FloatFormat(e, m, specials=EXTENDED)
        n = max(1, min(2, budget // fmt.width))
        x, words = _random_float_instance(rng, n, fmt)
        neuron = analytic.NeuronInstance(x, words, fmt)
        for p in p_grid:
            pairs.append((f["float"](neuron, p).total,
                          neuron_error(x, neuron.codes, fmt, p, budget).second))
    check("float weights (extended)", pairs)

    pairs = []
    for n in range(1, min(8, budget) + 1):
        x = rng.normal(size=n)
        words = [BitWord(int(b), 1) for b in rng.integers(0, 2, size=n)]
        neuron = analytic.NeuronInstance(x, words, BINARY)
        for p in p_grid:
            pairs.append((f["bnn"](neuron, p).total,
                          neuron_error(x, neuron.codes, BINARY, p, budget).second))
    check("binary weights", pairs)

    prot, accum, full = [], [], []
    sfmt = FloatFormat(2, 1, specials=EXTENDED)
    for bw, bz, n in ((2, 2, 2), (2, 1, 1), (3, 2, 2), (2, 2, 3)):
        if n * bw + bz + sfmt.width > budget:
            continue
        wfmt, zfmt = IntFormat(bw), IntFormat(bz)
        x = rng.normal(size=n)
        w = rng.integers(wfmt.min_value, wfmt.max_value + 1, size=n)
        z = int(rng.integers(zfmt.min_value, zfmt.max_value + 1))
        scale_word = encode_float(float(rng.choice([0.5, 0.75, 1.0, 1.5])), sfmt)
        params = AffineQuantLayerParams(scale_word, sfmt, encode_int(z, zfmt), zfmt, wfmt)
        words = [encode_int(int(v), wfmt) for v in w]
        neuron = analytic.NeuronInstance(x, words, wfmt)
        for p in p_grid:
            o = aq_error(x, neuron.codes, params, p, False, False, budget)
            prot.append((f["aq_protected"](neuron, params, p).total, o.second))
            o = aq_error(x, neuron.codes, params, p, False, True, budget)
            accum.append((f["aq_accumulation"](neuron, params, p), o.variance / params.scale ** 2))
            o = aq_error(x, neuron.codes, params, p, True, True, budget)
            full.append((f["aq_full"](neuron, params, p).total, o.second))
    check("affine quantization, protected", prot)
    check("affine quantization, accumulation variance", accum)
    check("affine quantization, full corruption", full)

    pairs = []
    for k in range(1, 7):
        for _ in range(20):
            table = LutTable.from_array(rng.integers(0, 2, size=1 << k))
            probs = rng.dirichlet(np.ones(1 << k))
            pairs.append((f["recovery"](table, probs), full_corruption_recovery(table, probs)))
    check("LUT recovery equals anti-symmetry", pairs)
    return results
