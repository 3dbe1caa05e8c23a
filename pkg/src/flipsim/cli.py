"""``flipsim`` command line.

Every subcommand accepts ``--config``, ``--out``, ``--seed``, ``--trials``
and ``--threads``.  On failure a single JSON object is printed to stderr
and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import harness
from .harness import ConfigError, parse_list, parse_p_grid, read_config

EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_INCOMPLETE = 3


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", help="output path (stdout when omitted for text reports)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--trials", type=int, help="trials per BER point")
    p.add_argument("--threads", type=int, default=1, help="worker threads for trials")


def _section(args, name):
    return read_config(args.config, name) if args.config else {}


def run_sweep(args) -> int:
    if not args.config:
        raise ConfigError("sweep needs --config")
    values = read_config(args.config, "sweep")
    rows = harness.cmd_sweep(None, args.out, args.seed, args.trials, args.threads, values)
    if not (args.out or values.get("output")):
        sys.stdout.write(harness.write_csv(rows))
    return 0


def run_analyze(args) -> int:
    if not args.config:
        raise ConfigError("analyze needs --config")
    values = read_config(args.config, "analyze")
    rows = harness.cmd_analyze(values=values, seed=args.seed)
    out = args.out or values.get("output")
    text = harness.write_analyze_csv(rows, out)
    if not out:
        sys.stdout.write(text)
    return 0


def run_oracle(args) -> int:
    from .oracle import run_checks

    results = run_checks(budget=args.budget, seed=args.seed or 0)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.cases} cases, "
             f"max relative error {r.max_rel_error:.3e} (tolerance {r.tolerance:g})"
             for r in results]
    _emit("\n".join(lines) + "\n", args.out)
    return 0 if all(r.passed for r in results) else EXIT_FAILED


def run_ablate(args) -> int:
    values = _section(args, "ablate")
    axis = args.axis or values.get("axis")
    if not axis:
        raise ConfigError("ablate needs an axis (--axis or config key 'axis')")
    grid = parse_list(args.grid or values.get("grid", "")) or None
    seed = args.seed if args.seed is not None else int(values.get("seed", 0))
    trials = args.trials or int(values.get("trials", harness.DEFAULT_TRIALS))
    p_grid = parse_p_grid(values.get("p_grid"), harness.THRESHOLD_GRID)
    out = args.out or values.get("output")
    points = harness.cmd_ablate(axis, grid, args.dataset or values.get("dataset", "blobs"), seed,
                                trials, p_grid, args.target or values.get("target", "fp32"),
                                args.threads, out)
    if not out:
        sys.stdout.write(harness.write_csv([r for p in points for r in p.rows]))
    sys.stderr.write(harness.write_summary(points))
    failed = [p for p in points if p.status != "ok"]
    if failed:
        sys.stderr.write(json.dumps({"status": "incomplete", "command": "ablate",
                                     "failed_points": [p.model_id for p in failed]}) + "\n")
        return EXIT_INCOMPLETE
    return 0


def run_train(args) -> int:
    from .modelio import save_model
    from .netsim import clean_accuracy
    from .trainer import train_model

    values = _section(args, "train")
    config_seed = int(values.pop("seed", 0))
    seed = args.seed if args.seed is not None else config_seed
    dataset = values.pop("dataset", "blobs")
    config_out = values.pop("output", None)
    out = args.out or config_out
    if not out:
        raise ConfigError("train needs --out or config key 'output'")
    overrides = {}
    for key, text in values.items():
        overrides[key] = _coerce(key, text)
    target = overrides.pop("target", args.target or "fp32")
    config = harness.default_train_config(target, seed, **overrides)
    train_set, test_set = harness.load_dataset(dataset)
    net = train_model(train_set, config)
    save_model(net, out)
    print(json.dumps({"status": "ok", "model": str(out), "format": net.format_tag(),
                      "train_accuracy": clean_accuracy(net, train_set),
                      "test_accuracy": clean_accuracy(net, test_set)}))
    return 0


def _coerce(key, text):
    from .trainer import TrainConfig

    default = TrainConfig.__dataclass_fields__[key].default
    try:
        if key == "lut_layers":
            pairs = [t.strip() for t in text.split(";") if t.strip()]
            return tuple(tuple(int(v) for v in pair.split("x")) for pair in pairs)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def run_recovery(args) -> int:
    values = _section(args, "recovery")
    depths = [int(d) for d in parse_list(args.depths or values.get("depths", "1,2,3,4,5,6"))]
    seed = args.seed if args.seed is not None else int(values.get("seed", 0))
    trials = args.trials or int(values.get("trials", harness.DEFAULT_TRIALS))
    p_grid = parse_p_grid(values.get("p_grid"))
    out = args.out or values.get("output")
    rows, reports = harness.cmd_recovery(args.dataset or values.get("dataset", "blobs"), depths,
                                         p_grid, trials, seed,
                                         args.mode or values.get("mode", "trained"),
                                         args.threads, out)
    if not out:
        sys.stdout.write(harness.write_csv(rows))
    for depth, rep in sorted(reports.items()):
        pair = (rep.mean_alpha ** (depth / 2)) if depth % 2 == 0 else math.nan
        sys.stderr.write(json.dumps({"depth": depth, "mean_alpha": rep.mean_alpha,
                                     "min_alpha": rep.min_alpha,
                                     "predicted_per_layer": rep.predicted_recovery,
                                     "predicted_per_pair": pair}) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flipsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="BER sweep of one or more models")
    _common(p)
    p.set_defaults(func=run_sweep)

    p = sub.add_parser("analyze", help="closed-form layer MSE predictions")
    _common(p)
    p.set_defaults(func=run_analyze)

    p = sub.add_parser("oracle", help="closed forms vs. exhaustive enumeration")
    _common(p)
    p.add_argument("--budget", type=int, default=16, help="max enumerated bits per instance (<= 20)")
    p.set_defaults(func=run_oracle)

    p = sub.add_parser("ablate", help="train and sweep one model per grid value")
    _common(p)
    p.add_argument("--axis", choices=harness.AXES)
    p.add_argument("--grid", help="comma-separated grid values")
    p.add_argument("--dataset")
    p.add_argument("--target", help="storage format of the trained models")
    p.set_defaults(func=run_ablate)

    p = sub.add_parser("train", help="train a model and write it as JSON")
    _common(p)
    p.add_argument("--target")
    p.set_defaults(func=run_train)

    p = sub.add_parser("recovery", help="parity sweep of LUT networks by depth")
    _common(p)
    p.add_argument("--depths")
    p.add_argument("--dataset")
    p.add_argument("--mode", choices=("trained", "constructed"))
    p.set_defaults(func=run_recovery)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.trials is not None and args.trials < 1:
            raise ConfigError("--trials must be at least 1")
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        code = EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_FAILED
        sys.stderr.write(json.dumps({"status": "error", "command": args.command,
                                     "type": type(exc).__name__, "message": str(exc)}) + "\n")
        return code
    except Exception as exc:  # noqa: BLE001 - surface anything as a machine-readable line
        sys.stderr.write(json.dumps({"status": "error", "command": args.command,
                                     "type": type(exc).__name__, "message": str(exc)}) + "\n")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
