"""Desk-scale model production.

Dense models are trained with plain minibatch SGD (momentum, softmax
cross-entropy) in float64 and then stored in a target format: a float
format, per-layer affine integers, or +-1 binary weights.  LUT networks are
trained by greedy coordinate descent over individual table bits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .datasets import Dataset
from .formats import (
    BINARY,
    FP16,
    FP32,
    FP8,
    AffineQuantLayerParams,
    BitWord,
    FloatFormat,
    IntFormat,
    decode_float_codes,
    encode_float,
    encode_float_codes,
    encode_int,
    encode_int_codes,
)
from .netsim import ACTIVATIONS, DenseLayer, LutLayer, LutNetwork, MLPNetwork, Thermometer, activate

log = logging.getLogger(__name__)

FLOAT_TARGETS = {"fp32": FP32, "fp16": FP16, "fp8": FP8}
FILL_MODES = ("linear", "nearest", "keep")


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


def _parse_target(target: str):
    if target in FLOAT_TARGETS or target in ("binary", "lut"):
        return target
    if target.startswith("aq") and target[2:].isdigit() and 2 <= int(target[2:]) <= 32:
        return target
    raise ValueError(f"unknown target format {target!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Model-production settings.

    ``depth`` counts dense layers (depth 1 is a linear classifier) and
    ``width`` is the hidden width.  ``target`` is one of ``fp32``, ``fp16``,
    ``fp8``, ``aq<bits>`` (e.g. ``aq8``), ``binary`` or ``lut``; the
    ``lut_*`` fields only apply to the last.
    """

    width: int = 32
    depth: int = 2
    activation: str = "relu"
    tau: float = 1.0
    epochs: int = 60
    learning_rate: float = 0.05
    seed: int = 0
    target: str = "fp32"
    sparsity: float = 0.0
    batch_size: int = 32
    momentum: float = 0.9
    lut_layers: Tuple[Tuple[int, int], ...] = ((64, 4), (32, 4))
    n_thresholds: int = 4
    passes: int = 4
    fill: str = "linear"

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be at least 1")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.epochs < 0 or self.passes < 0:
            raise ValueError("epochs and passes must be non-negative")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning rate and batch size must be positive")
        if self.fill not in FILL_MODES:
            raise ValueError(f"fill must be one of {FILL_MODES}")
        _parse_target(self.target)
        object.__setattr__(self, "lut_layers", tuple(tuple(int(v) for v in t)
                                                     for t in self.lut_layers))


# ---------------------------------------------------------------------------
# Dense training (float64 master weights)
# ---------------------------------------------------------------------------


def _act_grad(z, h, name, tau):
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - h * h
    if name == "sigmoid" and tau > 0:
        return h * (1.0 - h) / tau
    # sign and hard step: straight-through estimator on [-1, 1]
    return (np.abs(z) <= 1.0).astype(np.float64)


def _effective(W, binary):
    return np.where(W >= 0, 1.0, -1.0) if binary else W


def _forward(Ws, X, act, tau, binary, masks=None):
    hs, zs = [X], []
    for i, W in enumerate(Ws):
        Wf = _effective(W, binary)
        if masks is not None:
            Wf = Wf * masks[i]
        with np.errstate(over="ignore", invalid="ignore"):
            z = hs[-1] @ Wf[:, :-1].T + Wf[:, -1]
        zs.append(z)
        if i < len(Ws) - 1:
            hs.append(activate(z, act, tau))
    return hs, zs


def _logit_scale(Ws, binary):
    # +-1 weights give logits of size ~sqrt(fan-in); rescale inside the loss only
    return 1.0 / np.sqrt(Ws[-1].shape[1]) if binary else 1.0


def _loss(Ws, X, y, config, binary, masks):
    _, zs = _forward(Ws, X, config.activation, config.tau, binary, masks)
    with np.errstate(all="ignore"):
        lp = log_softmax(zs[-1] * _logit_scale(Ws, binary), axis=1)
    return float(-lp[np.arange(len(y)), y].mean())


def _init_weights(sizes, activation, rng):
    Ws = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        gain = 2.0 if activation == "relu" else 1.0
        W = np.zeros((fan_out, fan_in + 1))
        W[:, :-1] = rng.normal(scale=np.sqrt(gain / fan_in), size=(fan_out, fan_in))
        Ws.append(W)
    return Ws


def _sgd(Ws, X, y, n_classes, config: TrainConfig, epochs, rng, binary=False, masks=None):
    n = len(y)
    onehot = np.eye(n_classes)[y]
    vel = [np.zeros_like(W) for W in Ws]
    scale = _logit_scale(Ws, binary)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            hs, zs = _forward(Ws, X[idx], config.activation, config.tau, binary, masks)
            with np.errstate(all="ignore"):
                g = (softmax(zs[-1] * scale, axis=1) - onehot[idx]) * (scale / len(idx))
            for i in range(len(Ws) - 1, -1, -1):
                h = hs[i]
                grad = np.empty_like(Ws[i])
                grad[:, :-1] = g.T @ h
                grad[:, -1] = g.sum(axis=0)
                if i > 0:
                    Wf = _effective(Ws[i], binary)
                    if masks is not None:
                        Wf = Wf * masks[i]
                    g = (g @ Wf[:, :-1]) * _act_grad(zs[i - 1], h, config.activation, config.tau)
                if binary:
                    grad *= np.abs(Ws[i]) <= 1.0
                if masks is not None:
                    grad *= masks[i]
                vel[i] = config.momentum * vel[i] - config.learning_rate * grad
                Ws[i] = Ws[i] + vel[i]
                if binary:
                    np.clip(Ws[i], -1.0, 1.0, out=Ws[i])
        loss = _loss(Ws, X, y, config, binary, masks)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
    return Ws


def _as_xy(dataset):
    if isinstance(dataset, Dataset):
        return dataset.features, dataset.labels, dataset.n_classes
    X, y = dataset
    y = np.asarray(y, dtype=np.int64)
    return np.asarray(X, dtype=np.float64), y, int(y.max()) + 1


def _dense_network(Ws, fmt, config, n_classes, masks=None) -> MLPNetwork:
    layers = []
    for i, W in enumerate(Ws):
        act = config.activation if i < len(Ws) - 1 else "identity"
        if fmt is BINARY:
            codes = (W >= 0).astype(np.uint64)
        else:
            codes = encode_float_codes(W, fmt)
        mask = None if masks is None else masks[i].astype(bool)
        layers.append(DenseLayer(codes, fmt, act, config.tau, True, None, mask))
    return MLPNetwork(layers, n_classes)


def _masks_of(net: MLPNetwork):
    if all(layer.mask is None for layer in net.layers):
        return None
    return [np.ones(layer.codes.shape) if layer.mask is None else layer.mask.astype(np.float64)
            for layer in net.layers]


def train_mlp(dataset, config: TrainConfig = TrainConfig(), test=None) -> MLPNetwork:
    """Train a dense classifier and store it in ``config.target``.

    With ``sparsity > 0`` the trained weights are magnitude-pruned and the
    surviving ones fine-tuned with the mask fixed.  Affine targets quantize
    after training; the binary target fine-tunes latent weights through the
    sign with a straight-through estimator.
    """
    target = _parse_target(config.target)
    if target == "lut":
        raise ValueError("use train_lut (or train_model) for LUT targets")
    X, y, n_classes = _as_xy(dataset)
    rng = np.random.default_rng(config.seed)
    sizes = [X.shape[1]] + [config.width] * (config.depth - 1) + [n_classes]
    Ws = _init_weights(sizes, config.activation, rng)
    Ws = _sgd(Ws, X, y, n_classes, config, config.epochs, rng)
    net = _dense_network(Ws, FP32, config, n_classes)
    masks = None
    tune = max(config.epochs // 2, 1 if config.epochs else 0)
    if config.sparsity > 0:
        net = prune_magnitude(net, config.sparsity)
        masks = _masks_of(net)
        Ws = _sgd(Ws, X, y, n_classes, config, tune, rng, masks=masks)
        net = _dense_network(Ws, FP32, config, n_classes, masks)

    if target in FLOAT_TARGETS:
        net = _dense_network(Ws, FLOAT_TARGETS[target], config, n_classes, masks)
    elif target == "binary":
        Ws = [np.clip(W, -1.0, 1.0) for W in Ws]
        Ws = _sgd(Ws, X, y, n_classes, config, tune, rng, binary=True, masks=masks)
        net = _dense_network(Ws, BINARY, config, n_classes, masks)
    else:
        net = quantize_affine(net, int(target[2:]))

    if log.isEnabledFor(logging.INFO):
        from .netsim import clean_accuracy
        msg = f"train accuracy {clean_accuracy(net, (X, y)):.4f}"
        if test is not None:
            msg += f", test accuracy {clean_accuracy(net, test):.4f}"
        log.info(msg)
    return net


# ---------------------------------------------------------------------------
# Post-training transforms
# ---------------------------------------------------------------------------


def _smallest_positive(fmt: FloatFormat) -> Tuple[float, int]:
    vals = decode_float_codes(np.array([0, 1], dtype=np.uint64), fmt)
    pos = [(v, c) for c, v in enumerate(vals) if v > 0]
    return min(pos)


def quantize_affine(net: MLPNetwork, weight_bits: int = 8, scale_format: FloatFormat = FP32,
                    zero_point_bits: Optional[int] = None) -> MLPNetwork:
    """Per-layer asymmetric min/max quantization to ``S * (q - Z)``.

    The range is widened to contain 0.  ``q`` and ``Z`` are stored as signed
    two's-complement words: ``Z = round(-min/S) - 2^(B-1)``.  The scale is
    rounded up to the next representable value when needed so every weight
    stays in range; dequantized weights are then within ``S/2`` of the
    originals.  A layer with ``max == min`` gets the smallest positive scale
    and ``Z = 0``.
    """
    wfmt = IntFormat(weight_bits)
    zfmt = IntFormat(zero_point_bits or weight_bits)
    levels = (1 << weight_bits) - 1
    layers = []
    for layer in net.layers:
        w = layer.weights()
        kept = w[layer.mask] if layer.mask is not None else w.ravel()
        lo = min(float(kept.min()), 0.0) if kept.size else 0.0
        hi = max(float(kept.max()), 0.0) if kept.size else 0.0
        if hi == lo:
            _, code = _smallest_positive(scale_format)
            s_word = BitWord(code, scale_format.width)
            z = 0
            q = np.zeros(w.shape, dtype=np.int64)
        else:
            ideal = (hi - lo) / levels
            s_word = encode_float(ideal, scale_format)
            if decode_float_codes(np.array([s_word.code], dtype=np.uint64), scale_format)[0] < ideal:
                s_word = BitWord(s_word.code + 1, scale_format.width)
            s = float(decode_float_codes(np.array([s_word.code], dtype=np.uint64), scale_format)[0])
            z = int(np.clip(np.rint(-lo / s) - (1 << (weight_bits - 1)), zfmt.min_value, zfmt.max_value))
            q = np.clip(np.rint(w / s) + z, wfmt.min_value, wfmt.max_value).astype(np.int64)
        if layer.mask is not None:
            q = np.where(layer.mask, q, z)
        aq = AffineQuantLayerParams(s_word, scale_format, encode_int(z, zfmt), zfmt, wfmt)
        layers.append(replace(layer, codes=encode_int_codes(q, wfmt), fmt=wfmt, aq=aq, _weights=None))
    return MLPNetwork(layers, net.n_classes)


def binarize(net: MLPNetwork) -> MLPNetwork:
    """Replace every weight with its sign, stored as one bit; sign(0) = +1."""
    layers = []
    for layer in net.layers:
        codes = (layer.weights() >= 0).astype(np.uint64)
        layers.append(replace(layer, codes=codes, fmt=BINARY, aq=None, _weights=None))
    return MLPNetwork(layers, net.n_classes)


def prune_magnitude(net: MLPNetwork, fraction: float) -> MLPNetwork:
    """Mask the ``floor(fraction * n)`` smallest-magnitude weights of each layer.

    Ties are broken by flat index.  Masked weights decode to zero and drop out
    of the flippable-bit census.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("pruning fraction must lie in [0, 1)")
    layers = []
    for layer in net.layers:
        w = layer.weights()
        m = int(np.floor(fraction * w.size + 1e-9))
        mask = np.ones(w.size, dtype=bool)
        mask[np.argsort(np.abs(w).ravel(), kind="stable")[:m]] = False
        mask = mask.reshape(w.shape)
        if layer.mask is not None:
            mask &= layer.mask
        layers.append(replace(layer, mask=mask if not mask.all() else layer.mask, _weights=None))
    return MLPNetwork(layers, net.n_classes)


# ---------------------------------------------------------------------------
# LUT networks: greedy bit-level descent
# ---------------------------------------------------------------------------


def _pack_tables(bits: np.ndarray) -> np.ndarray:
    weights = np.uint64(1) << np.arange(bits.shape[1], dtype=np.uint64)
    return (bits.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)


class _LutState:
    """Cached activations of every layer for the training set."""

    def __init__(self, tables, conns, ks, head_onehot, inputs, y):
        self.tables, self.conns, self.ks = tables, conns, ks
        self.onehot = head_onehot
        self.y = y
        self.bits = [inputs]
        self.addr = []
        for li in range(len(tables)):
            a = self.address(li, self.bits[li])
            self.addr.append(a)
            self.bits.append(self.lookup(li, a))
        self.err, self.margin = self.score(self.bits[-1], y)

    def address(self, li, bits):
        shifts = np.arange(self.ks[li], dtype=np.int64)
        return (bits[:, self.conns[li]].astype(np.int64) << shifts).sum(axis=2)

    def lookup(self, li, addr):
        return self.tables[li][np.arange(addr.shape[1]), addr]

    def score(self, terminal, y):
        logits = terminal.astype(np.int64) @ self.onehot
        rows = np.arange(len(y))
        true = logits[rows, y]
        others = logits.copy()
        others[rows, y] = np.iinfo(np.int64).min
        best_other = others.max(axis=1)
        pred = np.argmax(logits, axis=1)
        return (pred != y).astype(np.int64), true - best_other

    def propagate(self, li, rows, bits_next):
        """Downstream bits and addresses for ``rows`` given new outputs of layer ``li``."""
        bits, addrs = [bits_next], []
        for m in range(li + 1, len(self.tables)):
            a = self.address(m, bits[-1])
            addrs.append(a)
            bits.append(self.lookup(m, a))
        return bits, addrs


def _greedy(state: _LutState, passes: int) -> int:
    total = 0
    for _ in range(passes):
        accepted = 0
        for li, table in enumerate(state.tables):
            for i in range(table.shape[0]):
                col = state.addr[li][:, i]
                for a in np.unique(col):
                    rows = np.flatnonzero(col == a)
                    nb = state.bits[li + 1][rows].copy()
                    nb[:, i] ^= 1
                    bits, addrs = state.propagate(li, rows, nb)
                    err, margin = state.score(bits[-1], state.y[rows])
                    d_err = int(err.sum() - state.err[rows].sum())
                    d_margin = int(margin.sum() - state.margin[rows].sum())
                    if d_err < 0 or (d_err == 0 and d_margin > 0):
                        table[i, a] ^= 1
                        for off, b in enumerate(bits):
                            state.bits[li + 1 + off][rows] = b
                        for off, ad in enumerate(addrs):
                            state.addr[li + 1 + off][rows] = ad
                        state.err[rows], state.margin[rows] = err, margin
                        accepted += 1
        total += accepted
        if accepted == 0:
            break
    return total


def _fill_unvisited(table: np.ndarray, counts: np.ndarray, k: int, mode: str) -> None:
    """Assign entries that no training sample addresses."""
    if mode == "keep":
        return
    size = 1 << k
    addr = np.arange(size)
    bits = ((addr[:, None] >> np.arange(k)) & 1)
    visited = counts > 0
    for t in range(table.shape[0]):
        v = visited[t]
        if v.all() or not v.any():
            continue
        if mode == "nearest":
            dist = np.array([[bin(int(a) ^ int(b)).count("1") for b in addr[v]] for a in addr[~v]])
            vals = 2.0 * table[t, v] - 1.0
            near = dist == dist.min(axis=1, keepdims=True)
            vote = (near * (counts[t, v] * vals)[None, :]).sum(axis=1)
        else:
            # weighted least squares of the +-1 entry value on +-1 address bits
            A = np.column_stack([2.0 * bits - 1.0, np.ones(size)])
            sw = np.sqrt(counts[t, v])
            coef, *_ = np.linalg.lstsq(A[v] * sw[:, None], (2.0 * table[t, v] - 1.0) * sw, rcond=None)
            vote = A[~v] @ coef
        fill = table[t, ~v].copy()
        fill[vote > 0] = 1
        fill[vote < 0] = 0
        table[t, ~v] = fill


def train_lut(dataset, layers: Sequence[Tuple[int, int]] = ((64, 4), (32, 4)), seed: int = 0,
              passes: int = 4, n_thresholds: int = 4, binarizer: Optional[Thermometer] = None,
              fill: str = "linear") -> LutNetwork:
    """Greedy bit-level training of a layered LUT network with a popcount head.

    Tables start random.  Each pass visits every (LUT, addressed entry) and
    keeps a flip only if it strictly lowers the lexicographic loss
    (misclassifications, then negated total margin).  Training stops after
    ``passes`` passes or a pass with no accepted flip.  Entries no training
    sample reaches are then filled by ``fill``.
    """
    if fill not in FILL_MODES:
        raise ValueError(f"fill must be one of {FILL_MODES}")
    X, y, n_classes = _as_xy(dataset)
    layers = [tuple(int(v) for v in t) for t in layers]
    if not layers:
        raise ValueError("need at least one LUT layer")
    rng = np.random.default_rng(seed)
    binarizer = binarizer or Thermometer.quantile(X, n_thresholds)
    inputs = binarizer.encode(X)
    n_in = inputs.shape[1]
    tables, conns, ks = [], [], []
    for n_luts, k in layers:
        if not 1 <= k <= 6 or n_luts < 1:
            raise ValueError("each layer needs n_luts >= 1 and 1 <= k <= 6")
        conns.append(np.stack([rng.choice(n_in, size=k, replace=n_in < k) for _ in range(n_luts)]))
        tables.append(rng.integers(0, 2, size=(n_luts, 1 << k)).astype(np.uint8))
        ks.append(k)
        n_in = n_luts
    head = np.arange(layers[-1][0]) % n_classes
    onehot = np.eye(n_classes, dtype=np.int64)[head]
    state = _LutState(tables, conns, ks, onehot, inputs, y)
    accepted = _greedy(state, passes)
    log.info("LUT training accepted %d flips, %d training errors", accepted, int(state.err.sum()))
    for li, k in enumerate(ks):
        counts = np.zeros((tables[li].shape[0], 1 << k))
        for i in range(tables[li].shape[0]):
            counts[i] = np.bincount(state.addr[li][:, i], minlength=1 << k)
        _fill_unvisited(tables[li], counts, k, fill)
    lut_layers = [LutLayer(_pack_tables(t), c, k) for t, c, k in zip(tables, conns, ks)]
    return LutNetwork(binarizer, lut_layers, head, n_classes)


def lut_training_loss(net: LutNetwork, dataset) -> Tuple[int, int]:
    """(misclassifications, -total margin) of ``net`` on ``dataset``."""
    X, y, _ = _as_xy(dataset)
    logits = net.forward(X).astype(np.int64)
    rows = np.arange(len(y))
    others = logits.copy()
    others[rows, y] = np.iinfo(np.int64).min
    err = int((np.argmax(logits, axis=1) != y).sum())
    return err, -int((logits[rows, y] - others.max(axis=1)).sum())


def train_model(dataset, config: TrainConfig = TrainConfig(), test=None):
    """Dispatch on ``config.target``."""
    if config.target == "lut":
        return train_lut(dataset, config.lut_layers, config.seed, config.passes,
                         config.n_thresholds, fill=config.fill)
    return train_mlp(dataset, config, test)
