"""Inference for MLPs and LUT networks whose parameters are raw stored bits.

Every parameter tensor of a network is a flat ``uint64`` code array with a
fixed bit width (dense weights, affine scale/zero-point words, LUT truth
tables).  Corruption draws one uniform per stored bit from a stream keyed by
``(seed, trial, tensor index)`` and XORs the resulting masks into a private
copy of the network; the clean network is never touched.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .datasets import Dataset
from .fault_model import (
    LUT_TABLES,
    WEIGHTS_AND_QUANT_PARAMS,
    CorruptionSpec,
    flip_uniforms,
    make_stream,
    masks_from_uniforms,
)
from .formats import (
    AffineQuantLayerParams,
    BitWord,
    LutTable,
    NumericFormat,
    decode_codes,
)

ACTIVATIONS = ("relu", "sigmoid", "tanh", "sign", "identity")


def activate(y: np.ndarray, name: str, tau: float = 1.0) -> np.ndarray:
    if name == "identity":
        return y
    if name == "relu":
        return np.maximum(y, 0.0)
    if name == "tanh":
        return np.tanh(y)
    if name == "sigmoid":
        if tau == 0:
            return np.where(np.isnan(y), np.nan, (y > 0).astype(np.float64))
        return expit(y / tau)
    if name == "sign":
        return np.where(np.isnan(y), np.nan, np.where(y >= 0, 1.0, -1.0))
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# Dense networks
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    """Fully connected layer; with ``bias`` the last weight column sees a constant 1.

    ``mask`` marks kept connections.  Pruned weights decode to zero and their
    bits are not part of the flippable population.
    """

    codes: np.ndarray
    fmt: NumericFormat
    activation: str = "identity"
    tau: float = 1.0
    bias: bool = True
    aq: Optional[AffineQuantLayerParams] = None
    mask: Optional[np.ndarray] = None
    _weights: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint64)
        if self.codes.ndim != 2:
            raise ValueError("weight codes must form a matrix")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.aq is not None and self.fmt != self.aq.weight_format:
            raise ValueError("affine layer weights must use the affine weight format")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.codes.shape:
                raise ValueError("sparsity mask shape does not match the weights")

    @property
    def n_inputs(self) -> int:
        return self.codes.shape[1] - int(self.bias)

    @property
    def n_outputs(self) -> int:
        return self.codes.shape[0]

    def weights(self) -> np.ndarray:
        """Decoded real weight matrix, cached per layer instance."""
        if self._weights is None:
            w = decode_codes(self.codes, self.fmt)
            if self.aq is not None:
                w = self.aq.scale * (w - self.aq.zero_point)
            if self.mask is not None:
                w = np.where(self.mask, w, 0.0)
            self._weights = w
        return self._weights

    def preactivation(self, X: np.ndarray) -> np.ndarray:
        w = self.weights()
        with np.errstate(all="ignore"):
            out = X @ w[:, : self.n_inputs].T
            if self.bias:
                out = out + w[:, -1]
        return out

    def forward(self, X: np.ndarray) -> np.ndarray:
        with np.errstate(all="ignore"):
            return activate(self.preactivation(X), self.activation, self.tau)

    def kept_count(self) -> int:
        return int(self.codes.size if self.mask is None else self.mask.sum())


@dataclass
class MLPNetwork:
    layers: List[DenseLayer]
    n_classes: int

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_outputs != b.n_inputs:
                raise ValueError("consecutive layer dimensions do not agree")
        if self.layers and self.layers[-1].n_outputs != self.n_classes:
            raise ValueError("last layer width must equal the class count")

    @property
    def kind(self) -> str:
        return "mlp"

    @property
    def n_inputs(self) -> int:
        return self.layers[0].n_inputs

    def forward(self, X) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.n_inputs:
            raise ValueError(f"expected inputs with {self.n_inputs} features")
        for layer in self.layers:
            h = layer.forward(h)
        return h

    def format_tag(self) -> str:
        f = self.layers[0]
        if f.aq is not None:
            return f"aq-{f.fmt.tag}"
        return f.fmt.tag

    # corruption protocol ---------------------------------------------------

    def flip_population(self, scope: str) -> List[tuple]:
        if scope == LUT_TABLES:
            raise ValueError("scope 'lut_tables' does not apply to a weighted network")
        pop = []
        for i, layer in enumerate(self.layers):
            pop.append((2 * i, layer.kept_count(), layer.fmt.width))
            if layer.aq is not None and scope == WEIGHTS_AND_QUANT_PARAMS:
                pop.append((2 * i + 1, 1, layer.aq.scale_format.width))
                pop.append((2 * i + 1, 1, layer.aq.zero_point_format.bits))
        return pop

    def apply_flips(self, masks: Dict[int, List[np.ndarray]]) -> "MLPNetwork":
        layers = []
        for i, layer in enumerate(self.layers):
            codes = layer.codes
            if 2 * i in masks:
                codes = codes.copy()
                m = masks[2 * i][0]
                if layer.mask is None:
                    codes ^= m.reshape(codes.shape)
                else:
                    codes[layer.mask] ^= m
            aq = layer.aq
            if aq is not None and 2 * i + 1 in masks:
                ms, mz = masks[2 * i + 1]
                aq = replace(
                    aq,
                    scale_word=BitWord(aq.scale_word.code ^ int(ms[0]), aq.scale_word.width),
                    zero_point_word=BitWord(aq.zero_point_word.code ^ int(mz[0]),
                                            aq.zero_point_word.width),
                )
            layers.append(replace(layer, codes=codes, aq=aq, _weights=None))
        return MLPNetwork(layers, self.n_classes)


def mlp_forward(net: MLPNetwork, x) -> np.ndarray:
    """Logits for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("mlp_forward takes one input vector")
    return net.forward(x[None, :])[0]


# ---------------------------------------------------------------------------
# LUT networks
# ---------------------------------------------------------------------------


@dataclass
class Thermometer:
    """Per-feature thermometer code: bit ``(f, j)`` is ``x_f > thresholds[f, j]``."""

    thresholds: np.ndarray

    def __post_init__(self):
        self.thresholds = np.atleast_2d(np.asarray(self.thresholds, dtype=np.float64))

    @classmethod
    def uniform(cls, X, n_thresholds: int = 4) -> "Thermometer":
        X = np.asarray(X, dtype=np.float64)
        lo, hi = X.min(axis=0), X.max(axis=0)
        frac = np.arange(1, n_thresholds + 1) / (n_thresholds + 1)
        return cls(lo[:, None] + (hi - lo)[:, None] * frac[None, :])

    @classmethod
    def quantile(cls, X, n_thresholds: int = 4) -> "Thermometer":
        """Thresholds at evenly spaced empirical quantiles of each feature."""
        X = np.asarray(X, dtype=np.float64)
        q = np.arange(1, n_thresholds + 1) / (n_thresholds + 1)
        return cls(np.quantile(X, q, axis=0).T)

    @property
    def n_features(self) -> int:
        return self.thresholds.shape[0]

    @property
    def n_bits(self) -> int:
        return self.thresholds.size

    def encode(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"binarizer expects {self.n_features} features")
        return (X[:, :, None] > self.thresholds[None, :, :]).reshape(len(X), -1).astype(np.uint8)


@dataclass
class LutLayer:
    """``tables[i]`` holds LUT ``i`` as a ``2**k``-bit code; connection ``j`` drives address bit ``j``."""

    tables: np.ndarray
    connections: np.ndarray
    k: int

    def __post_init__(self):
        self.tables = np.asarray(self.tables, dtype=np.uint64)
        self.connections = np.asarray(self.connections, dtype=np.int64)
        if not 1 <= self.k <= 6:
            raise ValueError("LUT fan-in must be in 1..6")
        if self.connections.shape != (len(self.tables), self.k):
            raise ValueError("need exactly k connections per LUT")

    @property
    def n_luts(self) -> int:
        return len(self.tables)

    def addresses(self, bits: np.ndarray) -> np.ndarray:
        if self.connections.size and (self.connections.min() < 0 or
                                      self.connections.max() >= bits.shape[1]):
            raise ValueError("connection index out of range")
        sel = bits[:, self.connections].astype(np.uint64)
        shifts = np.arange(self.k, dtype=np.uint64)
        return (sel << shifts).sum(axis=2, dtype=np.uint64)

    def forward(self, bits: np.ndarray) -> np.ndarray:
        addr = self.addresses(bits)
        return ((self.tables[None, :] >> addr) & np.uint64(1)).astype(np.uint8)

    def table(self, i: int) -> LutTable:
        return LutTable(self.k, BitWord(int(self.tables[i]), 1 << self.k))


@dataclass
class LutNetwork:
    binarizer: Thermometer
    layers: List[LutLayer]
    head: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.head = np.asarray(self.head, dtype=np.int64)
        if len(self.head) != self.layers[-1].n_luts:
            raise ValueError("every terminal LUT needs a class bin")
        if self.head.min() < 0 or self.head.max() >= self.n_classes:
            raise ValueError("class bin out of range")

    @property
    def kind(self) -> str:
        return "lut"

    @property
    def n_inputs(self) -> int:
        return self.binarizer.n_features

    def format_tag(self) -> str:
        return "lut"

    def layer_outputs(self, X) -> List[np.ndarray]:
        """Bit vectors produced by the binarizer and by each LUT layer."""
        outs = [self.binarizer.encode(X)]
        for layer in self.layers:
            outs.append(layer.forward(outs[-1]))
        return outs

    def popcount(self, terminal: np.ndarray) -> np.ndarray:
        logits = np.zeros((len(terminal), self.n_classes))
        for c in range(self.n_classes):
            logits[:, c] = terminal[:, self.head == c].sum(axis=1)
        return logits

    def forward(self, X) -> np.ndarray:
        return self.popcount(self.layer_outputs(X)[-1])

    def flip_population(self, scope: str) -> List[tuple]:
        if scope != LUT_TABLES:
            raise ValueError("LUT networks are corrupted with scope 'lut_tables'")
        return [(i, layer.n_luts, 1 << layer.k) for i, layer in enumerate(self.layers)]

    def apply_flips(self, masks: Dict[int, List[np.ndarray]]) -> "LutNetwork":
        layers = []
        for i, layer in enumerate(self.layers):
            if i in masks:
                layer = replace(layer, tables=layer.tables ^ masks[i][0])
            layers.append(layer)
        return LutNetwork(self.binarizer, layers, self.head, self.n_classes)


def lut_forward(net: LutNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return net.forward(x[None, :])[0]


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------


def default_scope(net) -> str:
    return LUT_TABLES if net.kind == "lut" else WEIGHTS_AND_QUANT_PARAMS


def flippable_bits(net, scope: Optional[str] = None) -> int:
    """Flippable-bit census: number of stored bits exposed to corruption."""
    scope = scope or default_scope(net)
    return sum(n * w for _, n, w in net.flip_population(scope))


def draw_uniforms(net, seed: int, trial: int, scope: str) -> Dict[int, List[np.ndarray]]:
    """Per-bit uniforms for one trial, grouped by parameter tensor."""
    draws: Dict[int, List[np.ndarray]] = {}
    streams = {}
    for key, n, width in net.flip_population(scope):
        if key not in streams:
            streams[key] = make_stream(seed, trial, key)
        draws.setdefault(key, []).append(flip_uniforms(streams[key], n, width))
    return draws


def corrupt_with_uniforms(net, draws, p: float):
    masks = {k: [masks_from_uniforms(u, p) for u in us] for k, us in draws.items()}
    return net.apply_flips(masks)


def corrupt_network(net, spec: CorruptionSpec, trial: int):
    """Private corrupted copy of ``net`` for one trial."""
    return corrupt_with_uniforms(net, draw_uniforms(net, spec.seed, trial, spec.scope), spec.p)


def address_error_rate(table, flips: int) -> float:
    """Expected ``|dy|`` of one LUT under uniform addresses after ``flips`` distinct entry flips."""
    size = table.size if hasattr(table, "size") else 1 << table.k
    if not 0 <= flips <= size:
        raise ValueError(f"cannot flip {flips} of {size} entries")
    return flips / size


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mean_accuracy: float
    std_accuracy: float
    mean_output_mse: float
    trials: int
    special_value_rate: float
    flippable_bits: int = 0


def predict_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax with ties to the lowest class; rows with non-finite logits map to -1."""
    finite = np.all(np.isfinite(logits), axis=1)
    pred = np.argmax(np.where(finite[:, None], logits, 0.0), axis=1)
    return np.where(finite, pred, -1)


def _score(logits, clean_logits, labels):
    finite = np.isfinite(logits)
    special = float(np.mean(~finite.all(axis=1)))
    correct = int(np.sum(predict_logits(logits) == labels))
    with np.errstate(all="ignore"):
        sq = (logits - clean_logits) ** 2
    mse = float(sq[finite].mean()) if finite.any() else float("nan")
    return correct, mse, special


def _report(scores, census, n) -> EvalReport:
    # integer counts keep identical trials exactly equal to the clean accuracy
    c = np.array([s[0] for s in scores], dtype=np.int64)
    m = np.array([s[1] for s in scores])
    sp = np.array([s[2] for s in scores])
    m = m[~np.isnan(m)]
    mse = float(m.mean()) if len(m) else float("nan")
    t = len(c)
    mean = float(c.sum()) / (t * n)
    var = float(((c * t - c.sum()) ** 2).sum()) / (t ** 3 * n * n)
    return EvalReport(mean, var ** 0.5, mse, t, float(sp.mean()), census)


def _as_xy(dataset):
    if isinstance(dataset, Dataset):
        return dataset.features, dataset.labels
    X, y = dataset
    return np.asarray(X, dtype=np.float64), np.asarray(y)


def evaluate(net, dataset, spec: CorruptionSpec, trials: int = 100,
             n_jobs: int = 1) -> EvalReport:
    """Corrupt once per trial and score the whole dataset with that network."""
    return evaluate_sweep(net, dataset, [spec.p], trials, spec.seed, spec.scope, n_jobs)[0]


def evaluate_sweep(net, dataset, p_grid: Sequence[float], trials: int = 100,
                   seed: int = 0, scope: Optional[str] = None,
                   n_jobs: int = 1) -> List[EvalReport]:
    """One report per BER; each trial's draws are shared across the whole grid."""
    X, y = _as_xy(dataset)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if trials < 1:
        raise ValueError("need at least one trial")
    scope = scope or default_scope(net)
    for p in p_grid:
        CorruptionSpec(p, seed, scope)
    clean = net.forward(X)
    census = flippable_bits(net, scope)

    def run(trial):
        draws = draw_uniforms(net, seed, trial, scope)
        return [_score(corrupt_with_uniforms(net, draws, p).forward(X), clean, y)
                for p in p_grid]

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            per_trial = list(pool.map(run, range(trials)))
    else:
        per_trial = [run(t) for t in range(trials)]
    return [_report([pt[i] for pt in per_trial], census, len(y)) for i in range(len(p_grid))]


def clean_accuracy(net, dataset) -> float:
    X, y = _as_xy(dataset)
    return float(np.mean(predict_logits(net.forward(X)) == y))
