"""Closed-form expected squared error under independent parameter bit flips.

All neuron-level results share one shape: with ``dw_i = w_i' - w_i``
independent across weights,

    E[(y' - y)^2] = sum_i x_i^2 Var(dw_i) + (sum_i x_i E[dw_i])^2

and each format only changes the per-weight moments of ``dw``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.special import expit

from .fault_model import corrupted_distribution, moments, MAX_ENUMERATION_WIDTH
from .formats import (
    EXTENDED,
    AffineQuantLayerParams,
    BinaryFormat,
    BitWord,
    FloatFormat,
    IntFormat,
    NumericFormat,
    decode_codes,
)


@dataclass(frozen=True)
class MseBreakdown:
    variance_term: float
    bias_term: float

    @property
    def total(self) -> float:
        return self.variance_term + self.bias_term

    def scaled(self, factor: float) -> "MseBreakdown":
        return MseBreakdown(self.variance_term * factor, self.bias_term * factor)


@dataclass
class NeuronInstance:
    """A single neuron ``y = sum_i w_i x_i`` with stored weight words."""

    x: np.ndarray
    weights: Sequence[BitWord]
    fmt: NumericFormat

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if len(self.weights) != len(self.x):
            raise ValueError(f"{len(self.weights)} weights for {len(self.x)} inputs")
        for w in self.weights:
            if w.width != self.fmt.width:
                raise ValueError("weight width does not match the neuron format")

    @property
    def codes(self) -> np.ndarray:
        return np.array([w.code for w in self.weights], dtype=np.uint64)

    @property
    def clean_weights(self) -> np.ndarray:
        return decode_codes(self.codes, self.fmt)

    @property
    def y(self) -> float:
        return float(np.dot(self.clean_weights, self.x))


@dataclass
class NoiseDistribution:
    """Discrete law of the pre-activation perturbation ``xi``."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("noise probabilities must sum to 1")

    @classmethod
    def point(cls, xi: float) -> "NoiseDistribution":
        return cls([xi], [1.0])

    @property
    def second_moment(self) -> float:
        return float(np.dot(self.probs, self.values ** 2))


def combine(x: np.ndarray, mean_dw: np.ndarray, var_dw: np.ndarray) -> MseBreakdown:
    """Bias/variance assembly for one neuron from per-weight error moments."""
    x = np.asarray(x, dtype=np.float64)
    variance = float(np.dot(x * x, np.maximum(var_dw, 0.0)))
    bias = float(np.dot(x, mean_dw)) ** 2
    return MseBreakdown(variance, bias)


# ---------------------------------------------------------------------------
# Integers
# ---------------------------------------------------------------------------


def int_error_moments(w, bits: int, p: float):
    """``E[dw] = p(-1 - 2w)`` and ``Var(dw) = p(1-p)(4^B - 1)/3``."""
    w = np.asarray(w, dtype=np.float64)
    mean = p * (-1.0 - 2.0 * w)
    var = np.full_like(w, p * (1.0 - p) * (4.0 ** bits - 1.0) / 3.0)
    return mean, var


def int_neuron_mse(neuron: NeuronInstance, p: float) -> MseBreakdown:
    """Expected squared error for two's-complement weights.

    The bias term is written with the mean ``p(-1 - 2w)``; the form
    ``p^2 (sum x_i (1 + 2 w_i))^2`` is the same quantity since it is squared.
    """
    if not isinstance(neuron.fmt, IntFormat):
        raise TypeError("int_neuron_mse needs an IntFormat neuron")
    mean, var = int_error_moments(neuron.clean_weights, neuron.fmt.bits, p)
    return combine(neuron.x, mean, var)


# ---------------------------------------------------------------------------
# Floats
# ---------------------------------------------------------------------------


def _require_extended(fmt: FloatFormat):
    if fmt.specials != EXTENDED:
        raise ValueError(
            "product-form float moments assume every exponent pattern is finite; "
            "use fault_model.corrupted_distribution for ieee formats"
        )


def float_moments_codes(codes, fmt: FloatFormat, p: float):
    """Vectorized ``(E[w'], E[w'^2])`` as sign x mantissa x exponent factors."""
    _require_extended(fmt)
    c = np.asarray(codes, dtype=np.uint64)
    m, ne = fmt.mantissa_bits, fmt.exponent_bits

    negative = ((c >> np.uint64(m + ne)) & np.uint64(1)).astype(np.float64)
    sign_mean = (1.0 - 2.0 * p) * (1.0 - 2.0 * negative)

    mant_mean = np.ones(c.shape)
    spread = 0.0
    for k in range(1, m + 1):
        f = ((c >> np.uint64(m - k)) & np.uint64(1)).astype(np.float64)
        mant_mean += f * 2.0 ** -k + p * (1.0 - 2.0 * f) * 2.0 ** -k
        spread += 4.0 ** -k
    mant_sq = mant_mean ** 2 + p * (1.0 - p) * spread

    efield = ((c >> np.uint64(m)) & np.uint64((1 << ne) - 1)).astype(np.int64)
    exp_mean = np.ldexp(1.0, efield - fmt.bias)
    exp_sq = np.ldexp(1.0, 2 * (efield - fmt.bias))
    with np.errstate(over="ignore"):
        for j in range(ne):
            b = ((efield >> j) & 1).astype(np.float64)
            step = (1.0 - 2.0 * b) * 2.0 ** j
            exp_mean = exp_mean * ((1.0 - p) + p * np.exp2(step))
            exp_sq = exp_sq * ((1.0 - p) + p * np.exp2(2.0 * step))

    return sign_mean * mant_mean * exp_mean, mant_sq * exp_sq


def float_weight_moments(word: BitWord, fmt: FloatFormat, p: float):
    if word.width != fmt.width:
        raise ValueError("word width does not match the float format")
    g, o = float_moments_codes(np.array([word.code], dtype=np.uint64), fmt, p)
    return float(g[0]), float(o[0])


def float_error_moments(codes, fmt: FloatFormat, p: float):
    gamma, omega = float_moments_codes(codes, fmt, p)
    w = decode_codes(codes, fmt)
    return gamma - w, omega - gamma ** 2


def float_neuron_mse(neuron: NeuronInstance, p: float) -> MseBreakdown:
    if not isinstance(neuron.fmt, FloatFormat):
        raise TypeError("float_neuron_mse needs a FloatFormat neuron")
    mean, var = float_error_moments(neuron.codes, neuron.fmt, p)
    return combine(neuron.x, mean, var)


def exponent_second_moment_product(fmt: FloatFormat, efield, p):
    """``2^{2(e-bias)} prod_j [(1-p) + p 2^{2(1-2b_j)2^j}]`` broadcast over e and p."""
    e = np.asarray(efield, dtype=np.int64)[..., None]
    p = np.asarray(p, dtype=np.float64)
    out = np.ldexp(1.0, 2 * (e - fmt.bias)) * np.ones_like(p)
    for j in range(fmt.exponent_bits):
        b = (e >> j) & 1
        out = out * ((1.0 - p) + p * np.exp2(2.0 * (1 - 2 * b) * 2.0 ** j))
    return out


def exponent_second_moment_bound(fmt: FloatFormat, p_grid=None) -> float:
    """Worst case of ``E[Exp'^2]`` over stored exponent patterns and the p grid."""
    if p_grid is None:
        p_grid = np.linspace(0.0, 1.0, 101)
    fields = np.arange(1 << fmt.exponent_bits)
    return float(exponent_second_moment_product(fmt, fields, p_grid).max())


# ---------------------------------------------------------------------------
# Affine quantization
# ---------------------------------------------------------------------------


def int_word_moments(word: BitWord, fmt: IntFormat, p: float):
    """Mean and variance of a corrupted integer word (closed form)."""
    w = float(decode_codes(np.array([word.code], dtype=np.uint64), fmt)[0])
    mean_dw, var = int_error_moments(w, fmt.bits, p)
    return w + float(mean_dw), float(var)


def scale_moments(params: AffineQuantLayerParams, p: float):
    """``(E[S'], E[S'^2])`` of the stored scale word.

    Extended formats use the product formulas; ieee formats fall back to
    enumeration (specials dropped, no renormalization) when narrow enough.
    """
    fmt = params.scale_format
    if fmt.specials == EXTENDED:
        return float_weight_moments(params.scale_word, fmt, p)
    if fmt.width <= MAX_ENUMERATION_WIDTH:
        return moments(corrupted_distribution(params.scale_word, fmt, p))
    raise ValueError(
        f"no exact scale moments for {fmt.width}-bit ieee scales; "
        "analyze it in extended mode instead"
    )


def _check_aq(neuron: NeuronInstance, params: AffineQuantLayerParams):
    if neuron.fmt != params.weight_format:
        raise ValueError("neuron weights are not stored in the layer's weight format")


def aq_protected_mse(neuron: NeuronInstance, params: AffineQuantLayerParams,
                     p: float) -> MseBreakdown:
    """Only the integer weights are corrupted; the error is ``S^2`` times the integer MSE."""
    _check_aq(neuron, params)
    return int_neuron_mse(neuron, p).scaled(params.scale ** 2)


def aq_corrupted_accumulation_variance(neuron: NeuronInstance,
                                       params: AffineQuantLayerParams, p: float) -> float:
    """``Var(H')`` for ``H' = sum_i x_i (w_i' - Z')`` with corrupted weights and zero-point."""
    _check_aq(neuron, params)
    _, var_w = int_error_moments(neuron.clean_weights, neuron.fmt.bits, p)
    _, var_z = int_word_moments(params.zero_point_word, params.zero_point_format, p)
    x = neuron.x
    return float(np.dot(x * x, var_w) + x.sum() ** 2 * var_z)


def aq_corrupted_full_mse(neuron: NeuronInstance, params: AffineQuantLayerParams,
                          p: float) -> MseBreakdown:
    """MSE of ``y' = S' H'`` with scale, zero-point and weights all corrupted.

    Uses independence of the three parameter groups:
    ``E[y'] = E[S'] E[H']`` and ``E[y'^2] = E[S'^2] E[H'^2]``.
    """
    _check_aq(neuron, params)
    x = neuron.x
    w = neuron.clean_weights
    mean_dw, _ = int_error_moments(w, neuron.fmt.bits, p)
    mean_z, _ = int_word_moments(params.zero_point_word, params.zero_point_format, p)
    mean_h = float(np.dot(x, w + mean_dw)) - mean_z * x.sum()
    var_h = aq_corrupted_accumulation_variance(neuron, params, p)
    s_mean, s_sq = scale_moments(params, p)

    y = params.scale * (float(np.dot(x, w)) - params.zero_point * x.sum())
    mean_y = s_mean * mean_h
    # S' is deterministic at p in {0, 1}; skip the cancelling difference there
    var_s = 0.0 if p in (0.0, 1.0) else max(s_sq - s_mean ** 2, 0.0)
    var_y = s_sq * var_h + var_s * mean_h ** 2
    return MseBreakdown(var_y, (mean_y - y) ** 2)


# ---------------------------------------------------------------------------
# Binary
# ---------------------------------------------------------------------------


def binary_error_moments(w, p: float):
    w = np.asarray(w, dtype=np.float64)
    return -2.0 * p * w, np.full_like(w, 4.0 * p * (1.0 - p))


def bnn_neuron_mse(neuron: NeuronInstance, p: float) -> MseBreakdown:
    """``4p(1-p)||x||^2 + 4p^2 (sum x_i w_i)^2`` for +-1 weights."""
    if not isinstance(neuron.fmt, BinaryFormat):
        raise TypeError("bnn_neuron_mse needs binary (+-1) weights")
    mean, var = binary_error_moments(neuron.clean_weights, p)
    return combine(neuron.x, mean, var)


def weight_error_moments(codes, fmt: NumericFormat, p: float):
    """Per-weight ``(E[dw], Var(dw))`` for any plain (non-affine) format."""
    if isinstance(fmt, IntFormat):
        return int_error_moments(decode_codes(codes, fmt), fmt.bits, p)
    if isinstance(fmt, BinaryFormat):
        return binary_error_moments(decode_codes(codes, fmt), p)
    if isinstance(fmt, FloatFormat):
        return float_error_moments(codes, fmt, p)
    raise TypeError(f"unsupported format {fmt!r}")


def neuron_mse(neuron: NeuronInstance, p: float) -> MseBreakdown:
    mean, var = weight_error_moments(neuron.codes, neuron.fmt, p)
    return combine(neuron.x, mean, var)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def relu_propagated_mse(y: float, noise: NoiseDistribution) -> float:
    """``E[(ReLU(y + xi) - ReLU(y))^2]`` for a discrete ``xi``."""
    xi, pr = noise.values, noise.probs
    if y > 0:
        passing = xi > -y
        return float(np.dot(pr[passing], xi[passing] ** 2) + y * y * pr[~passing].sum())
    return float(np.dot(pr, np.maximum(0.0, y + xi) ** 2))


def step(v):
    """Zero-temperature sigmoid: ``1`` if ``v > 0`` else ``0``."""
    return (np.asarray(v) > 0).astype(np.float64)


def sigmoid_propagated_mse(y: float, tau: float, noise: NoiseDistribution) -> float:
    """``E[(sigma_tau(y + xi) - sigma_tau(y))^2]``; ``tau=0`` is the step limit."""
    if tau < 0:
        raise ValueError("temperature must be non-negative")
    xi, pr = noise.values, noise.probs
    if tau == 0:
        # probability of a sign change, summed with correct rounding
        return math.fsum(pr[step(y + xi) != step(y)])
    d = expit((y + xi) / tau) - expit(y / tau)
    return float(np.dot(pr, d * d))


def linearized_sigmoid_mse(tau: float, noise: NoiseDistribution) -> float:
    """High-temperature approximation ``E[xi^2] / (16 tau^2)``."""
    return noise.second_moment / (16.0 * tau * tau)


def noise_distribution(neuron: NeuronInstance, p: float) -> NoiseDistribution:
    """Exact law of ``xi = sum_i x_i dw_i`` by convolving per-weight laws."""
    values = np.zeros(1)
    probs = np.ones(1)
    for xi, word in zip(neuron.x, neuron.weights):
        d = corrupted_distribution(word, neuron.fmt, p)
        w = float(decode_codes(np.array([word.code], dtype=np.uint64), neuron.fmt)[0])
        step_vals = xi * (d.values - w)
        values = (values[:, None] + step_vals[None, :]).ravel()
        probs = (probs[:, None] * d.probs[None, :]).ravel()
        values, inv = np.unique(values, return_inverse=True)
        merged = np.zeros(len(values))
        np.add.at(merged, inv, probs)
        probs = merged
    return NoiseDistribution(values, probs)


# ---------------------------------------------------------------------------
# Width, sparsity and depth
# ---------------------------------------------------------------------------


def width_sparsity_predictor(k_active: int, var_dw: float, mean_dw: float,
                             sigma_x: float, mu_x: float) -> MseBreakdown:
    """Unit-constant scaling law: ``k Var(dw) sigma_x^2 + k^2 E[dw]^2 mu_x^2``.

    Only ratios between predictions are meaningful.
    """
    if k_active < 0:
        raise ValueError("active input count must be non-negative")
    return MseBreakdown(k_active * var_dw * sigma_x ** 2,
                        k_active ** 2 * mean_dw ** 2 * mu_x ** 2)


def depth_mse(lambda_gain: float, nu: float, depth: int) -> float:
    """End-to-end MSE ``nu (1 - lambda^{2L}) / (1 - lambda^2)`` (``nu L`` at lambda = 1).

    Evaluated in exact rational arithmetic for moderate depths so it agrees
    with the layer recursion to the last bit.
    """
    if depth < 0 or nu < 0 or lambda_gain < 0:
        raise ValueError("depth, noise and gain must be non-negative")
    if depth > 2048:
        g = lambda_gain * lambda_gain
        return nu * depth if g == 1.0 else nu * (1.0 - g ** depth) / (1.0 - g)
    g = Fraction(lambda_gain) ** 2
    if g == 1:
        return float(Fraction(nu) * depth)
    return float(Fraction(nu) * (1 - g ** depth) / (1 - g))


def depth_recursion(lambda_gain: float, nu: float, depth: int, exact: bool = True):
    """Iterate ``e_l^2 = lambda^2 e_{l-1}^2 + nu`` from zero."""
    if exact:
        g, n, e = Fraction(lambda_gain) ** 2, Fraction(nu), Fraction(0)
    else:
        g, n, e = lambda_gain ** 2, nu, 0.0
    for _ in range(depth):
        e = g * e + n
    return float(e)
