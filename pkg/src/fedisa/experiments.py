"""Experiment settings, presets and sweeps shared by the CLI and the acceptance suite.

Settings are a flat mapping whose keys mirror the CLI flags. They are
resolved in the order defaults < preset < config file < flags and then turned
into a ``RunConfig``. The pause may be given in virtual seconds or as a
multiple of the mean per-round client compute cost, which depends on the
partition.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import data as dp
from . import numeric as nc
from . import sim
from .errors import ConfigError
from .metrics import per_group_metrics

DEFAULTS: dict = {
    "mode": "semi-async",
    "k": 10,
    "rounds": 20,
    "seed": 0,
    "partition_scheme": "iid-shuffle",
    "lr": 1e-3,
    "batch_size": 100,
    "local_epochs": 1,
    "cd_epochs": 0,
    "sample_cost": 1e-3,
    "server_lr": None,
    "fedsgd_lr": None,
    "staleness_exponent": 0.5,
    "cutoff": None,
    "latency": "constant",
    "latency_params": [0.0],
    "straggler_fraction": 0.0,
    "pause": 0.0,
    "pause_multiple": None,
    "onset_round": 0,
    "pause_every_round": True,
    "time_budget": None,
    "budget_cutoffs": None,
    "metric": "accuracy",
    "tolerance": 0.01,
    "patience": 5,
    "target": None,
    "stop_at_convergence": False,
    "widths": list(nc.DEFAULT_WIDTHS),
    "train_on": "natural",
    "quantize": False,
}

# Desk-scale settings behind the robustness and training-time experiments.
# Client lr and local work are sized so the synthetic task is learnt within
# the 20-30 round desk budget; an lr of 1e-3 would need thousands of rounds.
_DESK = {
    "k": 10,
    "lr": 0.3,
    "batch_size": 50,
    "local_epochs": 3,
    "fedsgd_lr": 1.0,
    "latency": "exponential",
    "latency_params": [20.0],
}

PRESETS: dict[str, dict] = {
    "default": {},
    # accuracy after a fixed virtual-time budget of 20 cut-offs
    "robustness": {**_DESK, "rounds": 20, "budget_cutoffs": 20.0, "pause_multiple": 6.0},
    # virtual time until accuracy >= 0.9 for 3 consecutive aggregations
    "training-time": {
        **_DESK,
        "rounds": 30,
        "straggler_fraction": 0.2,
        "pause_multiple": 2.0,
        "target": 0.9,
        "patience": 3,
        "stop_at_convergence": True,
    },
}


def resolve_settings(preset: str = "default", file_settings: dict | None = None, flags: dict | None = None) -> dict:
    """Merge defaults, preset, config file and flags (later wins; None flags are ignored)."""
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    out = dict(DEFAULTS)
    out.update(PRESETS[preset])
    for source in (file_settings or {}, {k: v for k, v in (flags or {}).items() if v is not None}):
        unknown = sorted(set(source) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown setting(s): {', '.join(unknown)}")
        out.update(source)
    return out


def _field(settings: dict, name: str, cast):
    value = settings[name]
    if value is None:
        return None
    try:
        return cast(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r}") from None


def build_run_config(settings: dict, partition: dp.Partition | None = None) -> sim.RunConfig:
    """RunConfig from resolved settings; ``partition`` is needed only for ``pause_multiple``."""
    def wrap(name, fn):
        try:
            return fn()
        except ConfigError as exc:
            raise ConfigError(f"{name}: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None

    train = wrap("training", lambda: nc.TrainConfig(
        batch_size=_field(settings, "batch_size", int),
        learning_rate=_field(settings, "lr", float),
        local_epochs=_field(settings, "local_epochs", int),
        cd_pretrain_epochs=_field(settings, "cd_epochs", int),
        rng_seed=0,
        sample_cost=_field(settings, "sample_cost", float),
    ))
    params = settings["latency_params"]
    if isinstance(params, (int, float)):
        params = [params]
    latency = wrap("latency", lambda: sim.LatencyModel(settings["latency"], tuple(float(p) for p in params)))
    convergence = wrap("convergence", lambda: sim.ConvergenceRule(
        metric=settings["metric"],
        tolerance=_field(settings, "tolerance", float),
        patience=_field(settings, "patience", int),
        target=_field(settings, "target", float),
    ))
    if convergence.patience < 1:
        raise ConfigError("patience: must be at least 1")
    if convergence.metric not in ("accuracy", "precision", "recall", "f1"):
        raise ConfigError(f"metric: unknown metric {convergence.metric!r}")
    cfg = wrap("run", lambda: sim.RunConfig(
        n_clients=_field(settings, "k", int),
        rounds=_field(settings, "rounds", int),
        mode=settings["mode"],
        train=train,
        downlink=latency,
        uplink=latency,
        cutoff=_field(settings, "cutoff", float),
        staleness_exponent=_field(settings, "staleness_exponent", float),
        server_lr=_field(settings, "server_lr", float),
        fedsgd_lr=_field(settings, "fedsgd_lr", float),
        widths=tuple(int(w) for w in settings["widths"]),
        convergence=convergence,
        stop_at_convergence=bool(settings["stop_at_convergence"]),
        time_budget=_field(settings, "time_budget", float),
        budget_cutoffs=_field(settings, "budget_cutoffs", float),
        train_on=settings["train_on"],
        quantize=bool(settings["quantize"]),
        seed=_field(settings, "seed", int),
    ))
    pause = _field(settings, "pause", float)
    multiple = _field(settings, "pause_multiple", float)
    if multiple is not None:
        if partition is None:
            raise ConfigError("pause_multiple: needs the client partition")
        if multiple < 0:
            raise ConfigError("pause_multiple: must be non-negative")
        pause = multiple * sim.mean_compute_cost(cfg, partition)
    stragglers = wrap("straggler", lambda: sim.StragglerPolicy(
        affected_fraction=_field(settings, "straggler_fraction", float),
        pause_duration=pause,
        onset_round=_field(settings, "onset_round", int),
        every_round=bool(settings["pause_every_round"]),
    ))
    return replace(cfg, stragglers=stragglers)


def make_partition(train: dp.ProcessedDataset, settings: dict) -> dp.Partition:
    return dp.partition(train, int(settings["k"]), settings["partition_scheme"], int(settings["seed"]))


def desk_data(seed: int, n_rows: int = 2000, n_components: int = 100) -> dp.Prepared:
    """Seeded synthetic dataset pushed through the full preprocessing pipeline."""
    return dp.preprocess(dp.synthesize(n_rows=n_rows, seed=seed), n_components=n_components, seed=seed)


# ---------------------------------------------------------------- sweeps

SWEEP_AXES = ("affected", "pause", "mode")


@dataclass(frozen=True)
class SweepSpec:
    """Modes crossed with at most one varying axis.

    ``affected`` lists affected-node counts (0..K), ``pauses`` lists pause
    durations in seconds. Giving both is rejected. Every cell of a sweep
    runs on the same seeds so modes and axis values are compared like for like.
    """

    settings: dict
    modes: tuple[str, ...] = sim.MODES
    affected: tuple[int, ...] | None = None
    pauses: tuple[float, ...] | None = None
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.affected is not None and self.pauses is not None:
            raise ConfigError("a sweep varies exactly one axis: give affected nodes or pauses, not both")
        bad = [m for m in self.modes if m not in sim.MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes: unknown or empty {bad}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        k = int(self.settings["k"])
        if self.affected is not None and any(not 0 <= a <= k for a in self.affected):
            raise ConfigError(f"affected: counts must lie in 0..{k}")

    @property
    def axis(self) -> str:
        if self.affected is not None:
            return "affected"
        if self.pauses is not None:
            return "pause"
        return "mode"

    def cells(self) -> list[tuple[str, dict]]:
        values: Sequence = [None]
        if self.affected is not None:
            values = self.affected
        elif self.pauses is not None:
            values = self.pauses
        out = []
        k = int(self.settings["k"])
        for mode in self.modes:
            for v in values:
                s = dict(self.settings, mode=mode)
                if self.axis == "affected":
                    s["straggler_fraction"] = v / k
                elif self.axis == "pause":
                    s["pause"] = float(v)
                    s["pause_multiple"] = None
                out.append((mode, s))
        return out


SWEEP_COLUMNS = (
    "mode", "affected_nodes", "pause", "seed", "final_accuracy", "final_f1",
    "best_accuracy", "virtual_training_time", "converged", "aggregations",
)


def _affected_count(cfg: sim.RunConfig) -> int:
    return cfg.stragglers.count(cfg.n_clients)


def run_cell(settings: dict, train: dp.ProcessedDataset, test: dp.ProcessedDataset) -> tuple[dict, list[dict]]:
    """One sweep cell: returns its table row and per-file rows."""
    partition = make_partition(train, settings)
    cfg = build_run_config(settings, partition)
    result = sim.run_simulation(cfg, partition, test)
    row = {
        "mode": cfg.mode,
        "affected_nodes": _affected_count(cfg),
        "pause": cfg.stragglers.pause_duration,
        "seed": cfg.seed,
        "final_accuracy": result.final_metrics.accuracy,
        "final_f1": result.final_metrics.f1,
        "best_accuracy": result.best_metrics.accuracy,
        "virtual_training_time": result.training_time,
        "converged": result.converged,
        "aggregations": len(result.timeline) - 1,
    }
    pred = nc.detect_batch(result.final_params, result.final_tau, test.features)
    per_file = [
        {"mode": cfg.mode, "affected_nodes": row["affected_nodes"], "pause": row["pause"], "seed": cfg.seed,
         "file": g, "accuracy": m.accuracy, "f1": m.f1, "rows": m.tp + m.fp + m.tn + m.fn}
        for g, m in per_group_metrics(pred, test.labels, test.groups).items()
    ]
    return row, per_file


def _row_key(row: dict):
    return (sim.MODES.index(row["mode"]), row["affected_nodes"], row["pause"], row["seed"])


def run_sweep(spec: SweepSpec, datasets: dict[int, tuple[dp.ProcessedDataset, dp.ProcessedDataset]]) -> tuple[list[dict], list[dict]]:
    """Run every (cell, seed); ``datasets`` maps seed -> (train, test). Rows come back canonically sorted."""
    rows, per_file = [], []
    for seed in spec.seeds:
        train, test = datasets[seed]
        for _, settings in spec.cells():
            row, files = run_cell(dict(settings, seed=seed), train, test)
            rows.append(row)
            per_file.extend(files)
    rows.sort(key=_row_key)
    per_file.sort(key=lambda r: (*_row_key(r), r["file"]))
    return rows, per_file


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def g6(x: float) -> str:
    return f"{x:.6g}"


def robustness_summary(rows: list[dict]) -> dict[str, dict]:
    """Per mode: seed-averaged accuracy at the smallest and largest affected counts and their drop."""
    out = {}
    for mode in sim.MODES:
        mine = [r for r in rows if r["mode"] == mode]
        if not mine:
            continue
        lo = min(r["affected_nodes"] for r in mine)
        hi = max(r["affected_nodes"] for r in mine)
        base = float(np.mean([r["final_accuracy"] for r in mine if r["affected_nodes"] == lo]))
        worst = float(np.mean([r["final_accuracy"] for r in mine if r["affected_nodes"] == hi]))
        out[mode] = {"affected_lo": lo, "affected_hi": hi, "baseline": base, "stressed": worst, "drop": base - worst}
    return out


def time_ratio(rows: list[dict], affected: int, mode: str = "semi-async", reference: str = "fedavg") -> float:
    """Seed-pooled virtual training time of ``mode`` over ``reference`` at one affected count."""
    def total(m):
        return sum(r["virtual_training_time"] for r in rows if r["mode"] == m and r["affected_nodes"] == affected)
    ref = total(reference)
    if ref <= 0:
        raise ValueError(f"no {reference} rows with {affected} affected nodes")
    return total(mode) / ref


def human_summary(rows: list[dict]) -> str:
    lines = [f"{'mode':<11} {'affected':>8} {'pause':>9} {'seed':>5} {'final_acc':>10} {'best_acc':>9} {'train_time':>11} conv"]
    for r in rows:
        lines.append(
            f"{r['mode']:<11} {r['affected_nodes']:>8} {g6(r['pause']):>9} {r['seed']:>5} "
            f"{g6(r['final_accuracy']):>10} {g6(r['best_accuracy']):>9} {g6(r['virtual_training_time']):>11} "
            f"{'yes' if r['converged'] else 'no'}"
        )
    summary = robustness_summary(rows)
    if summary and any(s["affected_hi"] != s["affected_lo"] for s in summary.values()):
        lines.append("")
        lines.append("mean accuracy drop from fewest to most affected nodes:")
        for mode, s in summary.items():
            lines.append(f"  {mode:<11} {g6(s['baseline'])} -> {g6(s['stressed'])}  drop {g6(s['drop'])}")
    return "\n".join(lines) + "\n"
