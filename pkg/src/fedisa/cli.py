"""``fedisa`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as dp
from . import experiments as ex
from . import numeric as nc
from . import sim
from .errors import ConfigError, FedisaError, PartitionError, UnsupportedModeError
from .metrics import MetricsReport, compute_metrics

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONFIG = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    """``"0-5"`` or ``"0,2,4"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _add_setting_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    g = p.add_argument_group("run settings (override --preset and --config)")
    if with_mode:
        g.add_argument("--mode", choices=sim.MODES)
    g.add_argument("--k", type=int, help="number of clients")
    g.add_argument("--rounds", type=int, help="aggregation cap")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--partition-scheme", choices=dp.PARTITION_SCHEMES)
    g.add_argument("--lr", type=float, help="client learning rate")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--local-epochs", type=int)
    g.add_argument("--cd-epochs", type=int, help="CD-1 pretraining epochs per layer (0 disables)")
    g.add_argument("--sample-cost", type=float, help="virtual seconds per processed sample")
    g.add_argument("--server-lr", type=float)
    g.add_argument("--fedsgd-lr", type=float)
    g.add_argument("--staleness-exponent", type=float)
    g.add_argument("--cutoff", type=float, help="fixed cut-off time instead of calibration")
    g.add_argument("--latency", choices=("constant", "uniform", "exponential"))
    g.add_argument("--latency-params", type=_float_list, help="comma-separated distribution parameters")
    g.add_argument("--straggler-fraction", type=float)
    g.add_argument("--pause", type=float, help="pause duration in virtual seconds")
    g.add_argument("--pause-multiple", type=float, help="pause as a multiple of mean compute cost")
    g.add_argument("--onset-round", type=int)
    g.add_argument("--pause-every-round", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--time-budget", type=float)
    g.add_argument("--budget-cutoffs", type=float, help="time budget in units of the calibrated cut-off")
    g.add_argument("--metric", choices=("accuracy", "precision", "recall", "f1"))
    g.add_argument("--tolerance", type=float)
    g.add_argument("--patience", type=int)
    g.add_argument("--target", type=float)
    g.add_argument("--stop-at-convergence", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--widths", type=_int_list, help="encoder widths, e.g. 100,72,48,24,12")
    g.add_argument("--train-on", choices=("natural", "all"))
    g.add_argument("--quantize", action=argparse.BooleanOptionalAction, default=None)


def _settings_from(args) -> dict:
    file_settings = {}
    preset = args.preset
    if args.config:
        try:
            file_settings = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config: no such file {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {args.config}: {exc}") from None
        if not isinstance(file_settings, dict):
            raise ConfigError("config: top level must be an object")
        preset = preset or file_settings.pop("preset", None)
        file_settings.pop("preset", None)
    flags = {k: getattr(args, k, None) for k in ex.DEFAULTS}
    return ex.resolve_settings(preset or "default", file_settings, flags)


def _print_metrics(label: str, m: MetricsReport) -> None:
    print(f"{label}: accuracy {ex.g6(m.accuracy)}  precision {ex.g6(m.precision)}  recall {ex.g6(m.recall)}  "
          f"f1 {ex.g6(m.f1)}  (tp {m.tp}, fp {m.fp}, tn {m.tn}, fn {m.fn})")


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------ subcommands

def cmd_synth_data(args) -> int:
    raw = dp.synthesize(
        n_rows=args.rows, n_features=args.features, n_files=args.files,
        attack_fraction=args.attack_fraction, missing_rate=args.missing_rate, seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for g, name in enumerate(raw.sources):
        dp.write_psa_csv(raw, out / f"{name}.csv", group=g)
    print(f"wrote {len(raw.sources)} files, {len(raw)} rows x {args.features} features to {out}")
    return EXIT_OK


def _expand_inputs(paths: list[str]) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            found = sorted(p.glob("*.csv"))
            if not found:
                raise FileNotFoundError(f"no .csv files in {p}")
            files.extend(found)
        else:
            files.append(p)
    return files


def cmd_preprocess(args) -> int:
    raw = dp.load_psa_many(_expand_inputs(args.input), n_features=args.features)
    prepared = dp.preprocess(raw, n_components=args.components, knn_k=args.knn_k, ratio=args.ratio, seed=args.seed)
    dp.save_processed(args.out, prepared)
    print(f"{len(raw)} rows from {len(raw.sources)} file(s) -> train {len(prepared.train)}, test {len(prepared.test)}, "
          f"{prepared.train.features.shape[1]} columns in [0, 1]; written to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    settings = _settings_from(args)
    prepared = dp.load_processed(args.data)
    try:
        partition = ex.make_partition(prepared.train, settings)
    except PartitionError as exc:
        raise ConfigError(f"k: {exc}") from None
    cfg = ex.build_run_config(settings, partition)
    result = sim.run_simulation(cfg, partition, prepared.test)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim.write_run_result(out / "run.json", result)
    sim.write_event_log(out / "events.csv", result.events)
    sim.write_aggregation_log(out / "aggregations.jsonl", result.reports)
    nc.save_checkpoint(out / "model.json", result.final_params, result.final_tau)
    _dump_json(out / "metrics.json", {"schema_version": sim.RESULT_SCHEMA, "final": result.final_metrics.to_dict(),
                                      "best": result.best_metrics.to_dict()})
    print(f"mode {cfg.mode}, K={cfg.n_clients}, {len(result.timeline) - 1} aggregations, stop: {result.stop_reason}")
    if result.cutoff is not None:
        print(f"cut-off time {ex.g6(result.cutoff)}")
    state = "converged" if result.converged else "not converged"
    print(f"virtual training time {ex.g6(result.training_time)} ({state})")
    _print_metrics("final", result.final_metrics)
    _print_metrics("best ", result.best_metrics)
    return EXIT_OK


def cmd_sweep(args) -> int:
    settings = _settings_from(args)
    seeds = tuple(args.seeds) if args.seeds else (int(settings["seed"]),)
    modes = tuple(args.modes.split(",")) if args.modes else sim.MODES
    spec = ex.SweepSpec(
        settings=settings,
        modes=modes,
        affected=tuple(args.affected) if args.affected is not None else None,
        pauses=tuple(args.pauses) if args.pauses is not None else None,
        seeds=seeds,
    )
    if args.data:
        prepared = dp.load_processed(args.data)
        datasets = {s: (prepared.train, prepared.test) for s in seeds}
    else:
        datasets = {}
        for s in seeds:
            prepared = ex.desk_data(s, n_rows=args.synthetic_rows)
            datasets[s] = (prepared.train, prepared.test)
    try:
        rows, per_file = ex.run_sweep(spec, datasets)
    except PartitionError as exc:
        raise ConfigError(f"k: {exc}") from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(ex.table_csv(rows, ex.SWEEP_COLUMNS))
    (out / "per_file.csv").write_text(ex.table_csv(per_file, ("mode", "affected_nodes", "pause", "seed", "file", "accuracy", "f1", "rows")))
    summary = ex.human_summary(rows)
    (out / "summary.txt").write_text(summary)
    _dump_json(out / "sweep.json", {"schema_version": sim.RESULT_SCHEMA, "axis": spec.axis, "settings": settings,
                                    "seeds": list(seeds), "rows": rows})
    print(summary, end="")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, tau = nc.load_checkpoint(args.model)
    if args.tau is not None:
        tau = args.tau
    if tau is None and args.policy != "softmax":
        raise ConfigError("tau: checkpoint has no threshold; pass --tau")
    prepared = dp.load_processed(args.data)
    split = prepared.test if args.split == "test" else prepared.train
    try:
        pred = nc.predict(params, tau if tau is not None else 0.0, split.features, policy=args.policy)
    except UnsupportedModeError as exc:
        raise ConfigError(f"policy: {exc}") from None
    report = compute_metrics(pred, split.labels)
    _print_metrics(f"{args.split} ({len(split)} rows)", report)
    if args.out:
        _dump_json(Path(args.out), {"schema_version": sim.RESULT_SCHEMA, "metrics": report.to_dict()})
    if args.run:
        stored = sim.read_run_result(args.run)["final"]
        if stored != report.to_dict():
            print("metrics differ from the stored run record", file=sys.stderr)
            return EXIT_DATA
        print("matches the stored run record")
    return EXIT_OK


# ------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedisa", description="Semi-asynchronous federated intrusion detection for SCADA data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a seeded synthetic dataset in the PSA file layout")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rows", type=int, default=2000)
    p.add_argument("--features", type=int, default=dp.PSA_FEATURES)
    p.add_argument("--files", type=int, default=15)
    p.add_argument("--attack-fraction", type=float, default=0.3)
    p.add_argument("--missing-rate", type=float, default=0.002)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("preprocess", help="impute, reduce and scale raw CSV files")
    p.add_argument("--input", nargs="+", required=True, help="CSV files or directories of CSV files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--features", type=int, default=dp.PSA_FEATURES, help="raw feature columns per file")
    p.add_argument("--components", type=int, default=100)
    p.add_argument("--knn-k", type=int, default=5)
    p.add_argument("--ratio", type=float, default=0.7, help="training fraction")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("simulate", help="run one federated training simulation")
    p.add_argument("--data", required=True, help="processed dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file of settings (keys as flag names with underscores)")
    p.add_argument("--preset", choices=sorted(ex.PRESETS))
    _add_setting_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run aggregation modes across straggler counts or pauses")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="processed dataset directory (shared by all seeds)")
    src.add_argument("--synthetic", action="store_true", help="generate synthetic data per seed")
    p.add_argument("--synthetic-rows", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(ex.PRESETS))
    p.add_argument("--modes", help="comma-separated subset of " + ",".join(sim.MODES))
    p.add_argument("--affected", type=_int_list, help="affected-node counts, e.g. 0-5")
    p.add_argument("--pauses", type=_float_list, help="pause durations in seconds")
    p.add_argument("--seeds", type=_int_list, help="master seeds, e.g. 0-5")
    _add_setting_flags(p, with_mode=False)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="score a saved model on a processed split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--policy", choices=nc.DECISION_POLICIES, default="threshold")
    p.add_argument("--tau", type=float, help="override the stored threshold")
    p.add_argument("--run", help="run.json whose final metrics must be reproduced")
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FedisaError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
