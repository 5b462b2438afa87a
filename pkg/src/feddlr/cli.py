"""Config-driven experiment runner.

Subcommands:
  run       one training run (fedavg or feddlr) -> metrics CSV + summary JSON
  compare   paired fedavg vs feddlr runs, shared seed -> both outputs + delta
  sweep-e   one feddlr run per energy threshold -> per-run CSVs + combined table
  macs      static MAC/parameter report for an architecture and rank list

Config files are flat ``key = value`` lines ('#' comments allowed). Keys
mirror the training-config field names; unknown keys are hard errors. Exit
codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import metrics
from .data import DataError
from .federation import (
    ConfigError,
    CsvSpec,
    SyntheticSpec,
    TrainConfig,
    run_training,
)
from .nn import LrSchedule, NnError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

# key -> (parser, description); mirrors TrainConfig plus experiment extras
_CONFIG_KEYS = {
    "mode": (str, "fedavg | feddlr"),
    "clients": (int, "number of clients K"),
    "local_iters": (int, "local SGD iterations per round R"),
    "total_iters": (int, "total SGD iterations T"),
    "batch_size": (int, "mini-batch size b"),
    "e_client": (float, "upload energy threshold in (0, 1]"),
    "e_server": (float, "broadcast energy threshold in (0, 1]"),
    "lr_eta0": (float, "initial learning rate"),
    "lr_decay_base": (float, "learning-rate decay base"),
    "lr_decay_period": (int, "learning-rate decay period in iterations"),
    "seed": (int, "run seed"),
    "hidden_dims": ("int_list", "comma-separated hidden layer sizes"),
    "broadcast_count": (str, "once | per_client"),
    "allow_dense_fallback": ("bool", "encode dense when factors are not smaller"),
    "capture_traces": ("bool", "record constant-estimation traces"),
    "data_source": (str, "synthetic | csv"),
    "classes": (int, "number of classes"),
    "input_dim": (int, "feature dimension"),
    "train_per_class": (int, "training samples per class"),
    "test_per_class": (int, "held-out samples per class"),
    "separation": (float, "class-mean separation scale"),
    "csv_train_path": (str, "training CSV path"),
    "csv_test_path": (str, "test CSV path"),
    "e_sweep": ("float_list", "comma-separated thresholds for sweep-e"),
}


def _parse_value(key: str, raw: str):
    kind, _ = _CONFIG_KEYS[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "bool":
            try:
                return _BOOL_VALUES[raw.lower()]
            except KeyError:
                raise ValueError(f"expected a boolean, got {raw!r}") from None
        if kind == "int_list":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "float_list":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}: line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{origin}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{origin}: line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def config_from_values(values: dict) -> tuple[TrainConfig, tuple[float, ...]]:
    """Build a TrainConfig plus the sweep list from parsed key/values."""
    source = values.get("data_source", "synthetic")
    if source == "synthetic":
        dataset = SyntheticSpec(
            classes=values.get("classes", 10),
            dim=values.get("input_dim", 32),
            train_per_class=values.get("train_per_class", 200),
            test_per_class=values.get("test_per_class", 100),
            separation=values.get("separation", 4.6),
        )
    elif source == "csv":
        try:
            dataset = CsvSpec(
                train_path=values["csv_train_path"],
                test_path=values["csv_test_path"],
                num_classes=values["classes"],
                dim=values.get("input_dim", 0),
            )
        except KeyError as exc:
            raise ConfigError(f"csv data source requires key {exc.args[0]!r}") from exc
    else:
        raise ConfigError(f"data_source must be 'synthetic' or 'csv', got {source!r}")
    lr = LrSchedule(
        eta0=values.get("lr_eta0", 0.1),
        decay_base=values.get("lr_decay_base", 0.5),
        decay_period=values.get("lr_decay_period", 10000),
    )
    cfg = TrainConfig(
        mode=values.get("mode", "feddlr"),
        clients=values.get("clients", 10),
        local_iters=values.get("local_iters", 25),
        total_iters=values.get("total_iters", 1000),
        batch_size=values.get("batch_size", 20),
        e_client=values.get("e_client", 0.99),
        e_server=values.get("e_server", 0.99),
        lr=lr,
        seed=values.get("seed", 0),
        hidden_dims=tuple(values.get("hidden_dims", (64, 64))),
        dataset=dataset,
        broadcast_count=values.get("broadcast_count", metrics.BROADCAST_PER_CLIENT),
        allow_dense_fallback=values.get("allow_dense_fallback", True),
        capture_traces=values.get("capture_traces", False),
    )
    cfg.validate()
    sweep = tuple(values.get("e_sweep", ()))
    for e in sweep:
        if not 0.0 < e <= 1.0:
            raise ConfigError(f"e_sweep values must lie in (0, 1], got {e}")
    return cfg, sweep


def load_config(path, seed_override=None) -> tuple[TrainConfig, tuple[float, ...]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values = parse_config_text(text, origin=str(path))
    if seed_override is not None:
        values["seed"] = int(seed_override)
    return config_from_values(values)


def _execute(cfg: TrainConfig, out_dir: Path, tag: str, quiet: bool) -> metrics.MetricsLog:
    log = run_training(cfg)
    csv_path = out_dir / f"metrics_{tag}.csv"
    json_path = out_dir / f"summary_{tag}.json"
    metrics.write_metrics_csv(log, csv_path)
    metrics.write_summary_json(log, json_path)
    if not quiet:
        last = log.records[-1]
        print(
            f"[{tag}] rounds={len(log.records)} final_acc={last.test_accuracy:.4f} "
            f"total_params={last.cum_params} -> {csv_path}"
        )
    return log


def cmd_run(cfg: TrainConfig, sweep, out_dir: Path, quiet: bool) -> int:
    _execute(cfg, out_dir, cfg.mode, quiet)
    return EXIT_OK


def cmd_compare(cfg: TrainConfig, sweep, out_dir: Path, quiet: bool) -> int:
    from dataclasses import replace

    logs = {}
    for mode in ("fedavg", "feddlr"):
        logs[mode] = _execute(replace(cfg, mode=mode), out_dir, mode, quiet)
    delta = {
        "seed": cfg.seed,
        "final_accuracy_fedavg": logs["fedavg"].final_accuracy(),
        "final_accuracy_feddlr": logs["feddlr"].final_accuracy(),
        "total_params_fedavg": logs["fedavg"].total_params(),
        "total_params_feddlr": logs["feddlr"].total_params(),
        "params_ratio": (
            logs["feddlr"].total_params() / logs["fedavg"].total_params()
            if logs["fedavg"].total_params()
            else None
        ),
    }
    with open(out_dir / "compare_delta.json", "w", newline="\n") as fh:
        json.dump(delta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not quiet:
        print(f"[compare] params ratio feddlr/fedavg = {delta['params_ratio']:.4f}")
    return EXIT_OK


def cmd_sweep(cfg: TrainConfig, sweep, out_dir: Path, quiet: bool) -> int:
    from dataclasses import replace

    if not sweep:
        raise ConfigError("sweep-e requires a non-empty e_sweep list in the config")
    rows = []
    for e in sweep:
        run_cfg = replace(cfg, mode="feddlr", e_client=e, e_server=e)
        tag = f"e{e:g}"
        log = _execute(run_cfg, out_dir, tag, quiet)
        rows.append(
            {
                "e": e,
                "final_accuracy": log.final_accuracy(),
                "total_params": log.total_params(),
                "total_uplink_bytes": log.records[-1].cum_uplink_bytes,
                "total_downlink_bytes": log.records[-1].cum_downlink_bytes,
            }
        )
    with open(out_dir / "sweep_combined.csv", "w", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


def cmd_macs(args) -> int:
    dims = tuple(int(v) for v in args.arch.split(",") if v.strip())
    if len(dims) < 2:
        raise ConfigError("--arch needs at least two comma-separated dimensions")
    shapes = [(out, inp) for inp, out in zip(dims[:-1], dims[1:])]
    ranks = None
    if args.ranks:
        ranks = tuple(int(v) for v in args.ranks.split(",") if v.strip())
        if len(ranks) != len(shapes):
            raise ConfigError(
                f"--ranks needs {len(shapes)} values for this architecture, got {len(ranks)}"
            )
    try:
        report = metrics.mac_count(shapes, ranks)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"architecture: {'->'.join(str(d) for d in dims)}")
    print(f"dense:    {report.dense_macs} MACs/sample, {report.params_dense} params")
    print(f"low-rank: {report.lowrank_macs} MACs/sample, {report.params_lowrank} params")
    print(f"mac_ratio: {report.mac_ratio:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feddlr", description="Federated training with dual-side low-rank compression"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "execute one training run"),
        ("compare", "paired fedavg vs feddlr runs with a shared seed"),
        ("sweep-e", "one feddlr run per threshold in e_sweep"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=".", help="output directory (created if missing)")
        p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    p = sub.add_parser("macs", help="static MAC/parameter report")
    p.add_argument("--arch", required=True, help="comma-separated layer widths, e.g. 32,64,64,10")
    p.add_argument("--ranks", default=None, help="comma-separated rank per weight matrix")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "macs":
            return cmd_macs(args)
        cfg, sweep = load_config(args.config, args.seed)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        handler = {
            "run": cmd_run,
            "compare": cmd_compare,
            "sweep-e": cmd_sweep,
        }[args.command]
        return handler(cfg, sweep, out_dir, args.quiet)
    except (ConfigError, NnError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, DataError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
