"""Sweep engine: BER sweeps, ablation grids, analytic predictions, CSV output.

Config files are INI-style with one section per command.  Every key is
checked against a fixed list; unknown keys or sections are errors.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import analytic
from .datasets import load_csv, make_synthetic
from .fault_model import (
    LUT_TABLES,
    SCOPES,
    WEIGHTS_AND_QUANT_PARAMS,
    WEIGHTS_ONLY,
)
from .formats import EXTENDED, BinaryFormat, FloatFormat, IntFormat, decode_codes
from .modelio import load_model
from .netsim import MLPNetwork, clean_accuracy, evaluate_sweep, flippable_bits
from .trainer import TrainConfig, TrainingDivergedError, train_model

CSV_VERSION = "# flipsim-sweep-csv v1"
COLUMNS = ("model_id", "format", "p", "trials", "mean_accuracy", "std_accuracy",
           "mean_mse", "special_rate", "flippable_bits")
DEFAULT_TRIALS = 100
SWEEP_GRID = tuple(float(v) for v in np.concatenate([np.logspace(-8, -3, 6),
                                                     np.round(np.linspace(0.01, 1.0, 12), 10)]))
# finer grid for locating half-accuracy thresholds
THRESHOLD_GRID = tuple(float(v) for v in np.unique(np.concatenate([
    np.logspace(-7, -1, 49), np.round(np.linspace(0.1, 0.5, 9), 10)])))


class ConfigError(ValueError):
    """Malformed or unknown configuration."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


SECTION_KEYS = {
    "sweep": {"model", "dataset", "p_grid", "trials", "seed", "scope", "output"},
    "analyze": {"model", "dataset", "p_grid", "scope", "output"},
    "ablate": {"axis", "grid", "dataset", "p_grid", "trials", "seed", "target", "output"},
    "recovery": {"dataset", "depths", "p_grid", "trials", "seed", "mode", "output"},
    "train": {"dataset", "seed", "output"} | set(TrainConfig.__dataclass_fields__) - {"seed"},
}


def read_config(path, section: str) -> Dict[str, str]:
    """Return the key/value pairs of ``section``, rejecting anything unknown."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for name in parser.sections():
        if name not in SECTION_KEYS:
            raise ConfigError(f"unknown config section [{name}]")
    if not parser.has_section(section):
        raise ConfigError(f"config has no [{section}] section")
    values = dict(parser.items(section))
    unknown = set(values) - SECTION_KEYS[section]
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return values


def parse_list(text: str) -> List[str]:
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def parse_p_grid(text: Optional[str], default=SWEEP_GRID) -> List[float]:
    if text is None or text.strip() == "default":
        return list(default)
    if text.strip() == "fine":
        return list(THRESHOLD_GRID)
    try:
        grid = [float(t) for t in parse_list(text)]
    except ValueError:
        raise ConfigError(f"p_grid must be a comma-separated list of numbers: {text!r}") from None
    if not grid:
        raise ConfigError("p_grid is empty")
    for p in grid:
        if not 0.0 <= p <= 1.0 or math.isnan(p):
            raise ConfigError(f"bit error rate {p} outside [0, 1]")
    return grid


def _int(values, key, default):
    if key not in values:
        return default
    try:
        return int(values[key])
    except ValueError:
        raise ConfigError(f"{key} must be an integer") from None


def load_dataset(spec: str, seed: int = 0):
    """``blobs``/``rings`` (optionally ``kind:key=value;key=value``) or a CSV path.

    Synthetic data is split 70/30 into (train, test); a CSV file is used
    whole for both.
    """
    spec = spec.strip()
    kind, _, opts = spec.partition(":")
    if kind in ("blobs", "rings"):
        kwargs = {"seed": 0}
        for item in filter(None, opts.split(";")):
            k, _, v = item.partition("=")
            if k.strip() not in ("n_per_class", "classes", "seed", "spread", "radius"):
                raise ConfigError(f"unknown dataset option {k!r}")
            kwargs[k.strip()] = float(v) if k.strip() in ("spread", "radius") else int(v)
        data = make_synthetic(kind, **kwargs)
        return data.split(0.3, seed=kwargs["seed"])
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"dataset {spec!r} is neither a synthetic kind nor a readable file")
    data = load_csv(path)
    return data, data


# ---------------------------------------------------------------------------
# Sweep rows and CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    model_id: str
    format: str
    p: float
    trials: int
    mean_accuracy: float
    std_accuracy: float
    mean_mse: float
    special_rate: float
    flippable_bits: int

    def cells(self) -> List[str]:
        return [self.model_id, self.format, repr(float(self.p)), str(self.trials),
                repr(self.mean_accuracy), repr(self.std_accuracy), repr(self.mean_mse),
                repr(self.special_rate), str(self.flippable_bits)]


def write_csv(rows: Sequence[SweepRow], path=None) -> str:
    """Serialize rows sorted by (model_id, p); also write to ``path`` if given."""
    buf = io.StringIO()
    buf.write(CSV_VERSION + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in sorted(rows, key=lambda r: (r.model_id, r.p)):
        w.writerow(row.cells())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_csv(path) -> List[SweepRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_VERSION:
        raise ValueError(f"{path}: missing '{CSV_VERSION}' header")
    reader = csv.reader(lines[1:])
    header = next(reader)
    if tuple(header) != COLUMNS:
        raise ValueError(f"{path}: unexpected columns {header}")
    out = []
    for r in reader:
        out.append(SweepRow(r[0], r[1], float(r[2]), int(r[3]), float(r[4]), float(r[5]),
                            float(r[6]), float(r[7]), int(r[8])))
    return out


def sweep_model(net, model_id: str, dataset, p_grid: Sequence[float], trials: int = DEFAULT_TRIALS,
                seed: int = 0, scope: Optional[str] = None, threads: int = 1) -> List[SweepRow]:
    """One row per BER for one model; LUT networks always use the table scope."""
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    if net.kind == "lut":
        scope = LUT_TABLES
    scope = scope or WEIGHTS_AND_QUANT_PARAMS
    reports = evaluate_sweep(net, dataset, p_grid, trials, seed, scope, threads)
    return [SweepRow(model_id, net.format_tag(), float(p), r.trials, r.mean_accuracy,
                     r.std_accuracy, r.mean_output_mse, r.special_value_rate, r.flippable_bits)
            for p, r in zip(p_grid, reports)]


def half_accuracy_threshold(p_grid: Sequence[float], accuracies: Sequence[float],
                            clean: float) -> float:
    """First grid BER (ascending) where mean accuracy drops below half of clean; inf if never."""
    for p, a in sorted(zip(p_grid, accuracies)):
        if a < 0.5 * clean:
            return float(p)
    return math.inf


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _resolve_models(specs: List[str], train_set, seed: int):
    """Model entries are JSON paths or ``train:<target>`` with default trainer settings."""
    models = []
    for spec in specs:
        if spec.startswith("train:"):
            target = spec[len("train:"):]
            config = default_train_config(target, seed)
            models.append((f"train-{target}", train_model(train_set, config)))
        else:
            path = Path(spec)
            try:
                models.append((path.stem, load_model(path)))
            except OSError as exc:
                raise ConfigError(f"cannot read model {spec}: {exc}") from None
    return models


def default_train_config(target: str, seed: int = 0, **overrides) -> TrainConfig:
    """Documented per-target defaults (sign activations for binary weights)."""
    base = dict(target=target, seed=seed, width=32, depth=3, epochs=60, learning_rate=0.01,
                activation="sign" if target == "binary" else "relu",
                lut_layers=((128, 6), (128, 4)), n_thresholds=16, passes=6)
    base.update(overrides)
    return TrainConfig(**base)


def cmd_sweep(config_path=None, out=None, seed=None, trials=None, threads: int = 1,
              values: Optional[Dict[str, str]] = None) -> List[SweepRow]:
    values = dict(values or read_config(config_path, "sweep"))
    if "model" not in values or "dataset" not in values:
        raise ConfigError("[sweep] needs 'model' and 'dataset'")
    seed = seed if seed is not None else _int(values, "seed", 0)
    trials = trials if trials is not None else _int(values, "trials", DEFAULT_TRIALS)
    scope = values.get("scope", WEIGHTS_AND_QUANT_PARAMS)
    if scope not in SCOPES:
        raise ConfigError(f"unknown scope {scope!r}")
    p_grid = parse_p_grid(values.get("p_grid"))
    train_set, test_set = load_dataset(values["dataset"])
    rows = []
    for model_id, net in _resolve_models(parse_list(values["model"]), train_set, seed):
        rows += sweep_model(net, model_id, test_set, p_grid, trials, seed, scope, threads)
    write_csv(rows, out or values.get("output"))
    return rows


# analytic predictions ---------------------------------------------------------


@dataclass(frozen=True)
class AnalyzeRow:
    model_id: str
    layer: str
    p: float
    predicted_mse: float
    method: str

    def cells(self):
        return [self.model_id, self.layer, repr(self.p), repr(self.predicted_mse), self.method]


ANALYZE_COLUMNS = ("model_id", "layer", "p", "predicted_mse", "method")


def _layer_moments(layer, p: float):
    """Per-weight (mean, var) of the decoded error plus a method label."""
    fmt = layer.fmt
    if isinstance(fmt, IntFormat):
        mean, var = analytic.weight_error_moments(layer.codes, fmt, p)
        return mean, var, "exact"
    if isinstance(fmt, BinaryFormat):
        mean, var = analytic.weight_error_moments(layer.codes, fmt, p)
        return mean, var, "exact"
    if isinstance(fmt, FloatFormat):
        ext = fmt.with_specials(EXTENDED)
        with np.errstate(all="ignore"):
            mean, var = analytic.float_error_moments(layer.codes, ext, p)
        return mean, var, "exact" if fmt.specials == EXTENDED else "extended-approximation"
    raise ConfigError(f"no analytic model for format {fmt!r}")


def layer_predicted_mse(layer, X: np.ndarray, p: float, scope: str) -> tuple:
    """Mean over samples and neurons of the layer-local pre-activation MSE."""
    Xa = np.hstack([X, np.ones((len(X), 1))]) if layer.bias else X
    mean, var, method = _layer_moments(layer, p)
    keep = np.ones(layer.codes.shape) if layer.mask is None else layer.mask.astype(np.float64)
    mean, var = mean * keep, var * keep
    with np.errstate(all="ignore"):
        if layer.aq is None:
            mse = (Xa ** 2) @ var.T + (Xa @ mean.T) ** 2
        else:
            aq = layer.aq
            w = decode_codes(layer.codes, layer.fmt) * keep
            xsum = Xa @ keep.T
            s, z = aq.scale, aq.zero_point
            y = s * (Xa @ w.T - z * xsum)
            if scope == WEIGHTS_ONLY:
                mse = s * s * ((Xa ** 2) @ var.T + (Xa @ mean.T) ** 2)
            else:
                mz, vz = analytic.int_word_moments(aq.zero_point_word, aq.zero_point_format, p)
                if aq.scale_format.specials != EXTENDED:
                    aq = replace(aq, scale_format=aq.scale_format.with_specials(EXTENDED))
                    method = "extended-approximation"
                s_mean, s_sq = analytic.scale_moments(aq, p)
                var_s = 0.0 if p in (0.0, 1.0) else max(s_sq - s_mean ** 2, 0.0)
                mean_h = Xa @ (w + mean).T - mz * xsum
                var_h = (Xa ** 2) @ var.T + xsum ** 2 * vz
                var_y = s_sq * var_h + var_s * mean_h ** 2
                mse = var_y + (s_mean * mean_h - y) ** 2
    return float(np.mean(mse)), method


def analyze_model(net, X, p_grid, model_id="model", scope=WEIGHTS_AND_QUANT_PARAMS) -> List[AnalyzeRow]:
    """Layer-local predictions on the clean activations of ``X``; ``total`` sums the layers."""
    if not isinstance(net, MLPNetwork):
        raise ConfigError("analytic predictions cover dense networks only")
    X = np.asarray(X, dtype=np.float64)
    rows = []
    for p in p_grid:
        h, total, methods = X, 0.0, set()
        for i, layer in enumerate(net.layers):
            mse, method = layer_predicted_mse(layer, h, float(p), scope)
            rows.append(AnalyzeRow(model_id, str(i), float(p), mse, method))
            total += mse
            methods.add(method)
            h = layer.forward(h)
        rows.append(AnalyzeRow(model_id, "total", float(p), total, "+".join(sorted(methods))))
    return rows


def write_analyze_csv(rows, path=None) -> str:
    buf = io.StringIO()
    buf.write("# flipsim-analyze-csv v1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANALYZE_COLUMNS)
    order = {"total": 1 << 30}
    for r in sorted(rows, key=lambda r: (r.model_id, r.p, order.get(r.layer, 0) or int(r.layer))):
        w.writerow(r.cells())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def cmd_analyze(config_path=None, out=None, values=None, seed=None) -> List[AnalyzeRow]:
    values = dict(values or read_config(config_path, "analyze"))
    if "model" not in values or "dataset" not in values:
        raise ConfigError("[analyze] needs 'model' and 'dataset'")
    scope = values.get("scope", WEIGHTS_AND_QUANT_PARAMS)
    p_grid = parse_p_grid(values.get("p_grid"))
    train_set, test_set = load_dataset(values["dataset"])
    rows = []
    for model_id, net in _resolve_models(parse_list(values["model"]), train_set, seed or 0):
        rows += analyze_model(net, test_set.features, p_grid, model_id, scope)
    write_analyze_csv(rows, out or values.get("output"))
    return rows


# ablations -----------------------------------------------------------------------


AXES = ("width", "depth", "activation", "sparsity", "precision")
DEFAULT_GRIDS = {
    "width": "16, 64, 256",
    "depth": "1, 2, 3, 4",
    "activation": "relu, sigmoid, tanh, sign",
    "sparsity": "0.9, 0.95",
    "precision": "fp32, fp16, fp8, aq8, aq4, binary, lut",
}
# maximal slope of each activation; the avalanche gain used by the predictor
ACTIVATION_GAIN = {"relu": 1.0, "identity": 1.0, "tanh": 1.0, "sign": 0.0}


@dataclass
class AblationPoint:
    axis: str
    value: str
    model_id: str
    census: int = 0
    clean_accuracy: float = float("nan")
    threshold: float = float("nan")
    predicted_score: float = float("nan")
    predicted_rank: int = 0
    status: str = "ok"
    rows: List[SweepRow] = field(default_factory=list)


SUMMARY_COLUMNS = ("axis", "value", "model_id", "flippable_bits", "clean_accuracy",
                   "threshold", "predicted_score", "predicted_rank", "status")


def _dense_census(sizes) -> int:
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def matched_dense_width(kept_weights: int, n_in: int, n_out: int, depth: int) -> int:
    """Hidden width whose dense weight count is closest to ``kept_weights`` (smallest on ties)."""
    best, best_gap = 1, None
    for w in range(1, 4097):
        gap = abs(_dense_census([n_in] + [w] * (depth - 1) + [n_out]) - kept_weights)
        if best_gap is None or gap < best_gap:
            best, best_gap = w, gap
    return best


def predicted_score(net, X, p_ref: float = 1e-3) -> float:
    """Avalanche predictor: mean layer-local MSE pushed through the depth recursion."""
    if not isinstance(net, MLPNetwork):
        return float("nan")
    rows = analyze_model(net, X, [p_ref])
    local = [r.predicted_mse for r in rows if r.layer != "total"]
    hidden = net.layers[0]
    act = hidden.activation if len(net.layers) > 1 else "identity"
    gain = ACTIVATION_GAIN.get(act, 1.0 / (4.0 * hidden.tau) if hidden.tau > 0 else 0.0)
    return float(analytic.depth_mse(gain, float(np.mean(local)), len(net.layers)))


def cmd_ablate(axis: str, grid: Optional[Sequence[str]] = None, dataset: str = "blobs",
               seed: int = 0, trials: int = DEFAULT_TRIALS, p_grid=None, target: str = "fp32",
               threads: int = 1, out=None) -> List[AblationPoint]:
    """Train one model per grid value, sweep it, and rank by half-accuracy threshold.

    The sparsity axis adds a dense model matched to each sparse model's
    flippable-bit census (``dense@<value>``).
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    grid = list(grid) if grid else parse_list(DEFAULT_GRIDS[axis])
    p_grid = list(p_grid) if p_grid else list(THRESHOLD_GRID)
    train_set, test_set = load_dataset(dataset)
    sparse_base = 128
    jobs = []
    for value in grid:
        if axis == "width":
            jobs.append((value, f"width={value}", default_train_config(target, seed, width=int(value))))
        elif axis == "depth":
            jobs.append((value, f"depth={value}", default_train_config(target, seed, depth=int(value))))
        elif axis == "activation":
            jobs.append((value, f"activation={value}",
                         default_train_config(target, seed, activation=value)))
        elif axis == "precision":
            jobs.append((value, f"precision={value}", default_train_config(value, seed)))
        else:
            frac = float(value)
            sparse_cfg = default_train_config(target, seed, width=sparse_base, sparsity=frac)
            jobs.append((value, f"sparse={value}", sparse_cfg))
            jobs.append((value, f"dense@{value}", None))   # filled after the sparse model exists

    points, trained = [], {}
    for value, model_id, config in jobs:
        point = AblationPoint(axis, str(value), model_id)
        try:
            if config is None:
                sparse = trained[f"sparse={value}"]
                kept = sum(layer.kept_count() for layer in sparse.layers)
                width = matched_dense_width(kept, test_set.n_features, test_set.n_classes,
                                            len(sparse.layers))
                config = default_train_config(target, seed, width=width)
                point.value = f"{value}:width={width}"
            net = train_model(train_set, config)
            trained[model_id] = net
        except (TrainingDivergedError, FloatingPointError) as exc:
            point.status = f"diverged: {exc}"
            points.append(point)
            continue
        point.rows = sweep_model(net, model_id, test_set, p_grid, trials, seed, None, threads)
        point.census = flippable_bits(net, LUT_TABLES if net.kind == "lut" else WEIGHTS_AND_QUANT_PARAMS)
        point.clean_accuracy = clean_accuracy(net, test_set)
        point.threshold = half_accuracy_threshold(p_grid, [r.mean_accuracy for r in point.rows],
                                                  point.clean_accuracy)
        point.predicted_score = predicted_score(net, test_set.features)
        points.append(point)

    scored = sorted((p for p in points if np.isfinite(p.predicted_score)),
                    key=lambda p: (p.predicted_score, p.model_id))
    for rank, p in enumerate(scored, 1):
        p.predicted_rank = rank
    if out is not None:
        write_csv([r for p in points for r in p.rows], out)
        write_summary(points, Path(str(out) + ".summary.csv"))
    return points


def write_summary(points: Sequence[AblationPoint], path=None) -> str:
    buf = io.StringIO()
    buf.write("# flipsim-ablation-summary v1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for p in points:
        w.writerow([p.axis, p.value, p.model_id, p.census, repr(p.clean_accuracy),
                    repr(p.threshold), repr(p.predicted_score), p.predicted_rank, p.status])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# recovery ---------------------------------------------------------------------


def lut_depth_layers(depth: int, width: int = 128, first_k: int = 6, k: int = 4):
    return [(width, first_k)] + [(width, k)] * (depth - 1)


def cmd_recovery(dataset: str = "blobs", depths: Sequence[int] = (1, 2, 3, 4, 5, 6),
                 p_grid=None, trials: int = DEFAULT_TRIALS, seed: int = 0, mode: str = "trained",
                 threads: int = 1, out=None):
    """Parity sweep over LUT networks of each depth; returns (rows, alpha reports)."""
    from .recovery import antisymmetric_network, network_alpha
    from .trainer import train_lut

    if mode not in ("trained", "constructed"):
        raise ConfigError("mode must be 'trained' or 'constructed'")
    p_grid = list(p_grid) if p_grid else list(SWEEP_GRID)
    if 1.0 not in p_grid:
        p_grid.append(1.0)
    train_set, test_set = load_dataset(dataset)
    rows, reports = [], {}
    for depth in depths:
        if mode == "trained":
            net = train_lut(train_set, lut_depth_layers(depth), seed=seed, passes=6, n_thresholds=16)
        else:
            net = antisymmetric_network(train_set.n_features, [128] * depth, 4,
                                        train_set.n_classes, seed=seed, X=train_set.features)
        reports[depth] = network_alpha(net, train_set.features)
        rows += sweep_model(net, f"lut-L{depth}", test_set, p_grid, trials, seed, LUT_TABLES, threads)
    write_csv(rows, out)
    return rows, reports
