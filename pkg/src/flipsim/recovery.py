"""Anti-symmetry of LUTs and symmetric recovery under full corruption.

At ``p = 1`` every stored bit flips: a LUT reading a complemented address
from a complemented table returns ``not T[~x]``, which equals the clean
``T[x]`` exactly when the table is anti-symmetric at ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .fault_model import LUT_TABLES, CorruptionSpec, apply_mask
from .formats import BitWord, LutTable
from .netsim import LutLayer, LutNetwork, Thermometer, corrupt_network, clean_accuracy, evaluate_sweep

PER_LAYER = "per_layer"
PER_PAIR = "per_pair"


def _address_probs(table: LutTable, address_dist) -> np.ndarray:
    if address_dist is None:
        return np.full(table.size, 1.0 / table.size)
    probs = np.asarray(address_dist, dtype=np.float64)
    if probs.shape != (table.size,):
        raise ValueError(f"address distribution needs {table.size} entries")
    if abs(probs.sum() - 1.0) > 1e-12:
        raise ValueError("address distribution must sum to 1")
    return probs


def alpha(table: LutTable, address_dist=None) -> float:
    """``P(T[~x] != T[x])`` with ``x`` drawn from ``address_dist`` (uniform by default)."""
    probs = _address_probs(table, address_dist)
    t = table.as_array()
    complement = np.arange(table.size) ^ (table.size - 1)
    return math.fsum(probs[t != t[complement]]) / math.fsum(probs)


def recovery_probability_single(table: LutTable, address_dist=None) -> float:
    """``P(y' = y)`` when both the address and the table contents are fully flipped."""
    probs = _address_probs(table, address_dist)
    corrupted = apply_mask(table.entries, BitWord((1 << table.size) - 1, table.size))
    all_ones = BitWord((1 << table.k) - 1, table.k)
    hits = []
    for x in range(table.size):
        x_bar = apply_mask(BitWord(x, table.k), all_ones).code
        y_new = (corrupted.code >> x_bar) & 1
        if y_new == table[x]:
            hits.append(probs[x])
    return math.fsum(hits) / math.fsum(probs)


def construct_antisymmetric(k: int, seed: int = 0) -> LutTable:
    """Random table with ``T[~x] = not T[x]`` at every address."""
    rng = np.random.default_rng(seed)
    size = 1 << k
    t = np.zeros(size, dtype=np.uint8)
    low = np.arange(size // 2)           # top address bit clear
    t[low] = rng.integers(0, 2, size=len(low))
    t[low ^ (size - 1)] = 1 - t[low]
    return LutTable.from_array(t)


def predicted_recovery(alpha_value: float, depth: int, convention: str = PER_LAYER) -> float:
    """Independence approximation ``alpha^L`` (per layer) or ``alpha^(L/2)`` (per pair)."""
    if not 0.0 <= alpha_value <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if convention == PER_LAYER:
        return alpha_value ** depth
    if convention == PER_PAIR:
        if depth % 2:
            raise ValueError("per-pair convention needs an even depth")
        return alpha_value ** (depth // 2)
    raise ValueError(f"unknown convention {convention!r}")


# ---------------------------------------------------------------------------
# Network level
# ---------------------------------------------------------------------------


@dataclass
class AntiSymmetryReport:
    per_lut_alpha: List[List[float]]   # indexed [layer][lut]
    mean_alpha: float
    min_alpha: float
    depth: int
    predicted_recovery: float


def empirical_address_distributions(net: LutNetwork, X) -> List[np.ndarray]:
    """Per layer, a ``(n_luts, 2**k)`` matrix of address frequencies over ``X``."""
    outs = net.layer_outputs(X)
    dists = []
    for layer, bits in zip(net.layers, outs):
        addr = layer.addresses(bits).astype(np.int64)
        counts = np.zeros((layer.n_luts, 1 << layer.k))
        for i in range(layer.n_luts):
            counts[i] = np.bincount(addr[:, i], minlength=1 << layer.k)
        dists.append(counts / len(addr))
    return dists


def network_alpha(net: LutNetwork, X=None, convention: str = PER_LAYER) -> AntiSymmetryReport:
    """Alpha of every LUT; empirical address law over ``X`` or uniform when ``X`` is None."""
    per_layer = []
    dists = empirical_address_distributions(net, X) if X is not None else None
    for li, layer in enumerate(net.layers):
        row = []
        for i in range(layer.n_luts):
            d = None if dists is None else dists[li][i]
            row.append(alpha(layer.table(i), d))
        per_layer.append(row)
    flat = np.concatenate([np.asarray(r) for r in per_layer])
    depth = len(net.layers)
    mean = float(flat.mean())
    conv = convention if (convention == PER_LAYER or depth % 2 == 0) else PER_LAYER
    return AntiSymmetryReport(per_layer, mean, float(flat.min()), depth,
                              predicted_recovery(mean, depth, conv))


def antisymmetric_network(n_features: int, widths: Sequence[int], k: int, n_classes: int,
                          seed: int = 0, n_thresholds: int = 4, X=None) -> LutNetwork:
    """LUT network whose every table is perfectly anti-symmetric (alpha = 1)."""
    rng = np.random.default_rng(seed)
    if X is not None:
        binarizer = Thermometer.uniform(X, n_thresholds)
    else:
        binarizer = Thermometer(np.tile(np.linspace(-1, 1, n_thresholds), (n_features, 1)))
    layers = []
    n_in = binarizer.n_bits
    for li, width in enumerate(widths):
        conn = np.stack([rng.choice(n_in, size=k, replace=n_in < k) for _ in range(width)])
        tables = [construct_antisymmetric(k, int(rng.integers(2**63))).entries.code
                  for _ in range(width)]
        layers.append(LutLayer(np.array(tables, dtype=np.uint64), conn, k))
        n_in = width
    head = np.arange(widths[-1]) % n_classes
    return LutNetwork(binarizer, layers, head, n_classes)


@dataclass
class ParityRow:
    depth: int
    p: float
    mean_accuracy: float
    std_accuracy: float
    clean_accuracy: float
    trials: int
    flippable_bits: int


def parity_sweep(networks: dict, dataset, p_grid: Sequence[float], seed: int = 0,
                 trials: int = 100) -> List[ParityRow]:
    """Accuracy vs. BER for LUT networks keyed by depth (``p = 1`` included by the caller)."""
    rows = []
    for depth in sorted(networks):
        net = networks[depth]
        clean = clean_accuracy(net, dataset)
        reports = evaluate_sweep(net, dataset, p_grid, trials, seed, LUT_TABLES)
        for p, r in zip(p_grid, reports):
            rows.append(ParityRow(depth, float(p), r.mean_accuracy, r.std_accuracy, clean,
                                  r.trials, r.flippable_bits))
    return rows


def terminal_bits(net: LutNetwork, X, corrupted: Optional[LutNetwork] = None) -> np.ndarray:
    return (corrupted or net).layer_outputs(X)[-1]


def fully_corrupted(net: LutNetwork, seed: int = 0) -> LutNetwork:
    return corrupt_network(net, CorruptionSpec(1.0, seed, LUT_TABLES), 0)
