"""Discrete-event simulation of K SCADA sub-systems and one control centre.

Everything runs on virtual time. Client compute time is the deterministic
cost reported by local training, network delays come from counter-based
random streams and aggregation/evaluation take no virtual time. Events are
processed in (time, sequence) order, so a run is a pure function of its
configuration and master seed.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from . import numeric as nc
from .data import Partition, ProcessedDataset
from .errors import ConfigError
from .metrics import MetricsReport, compute_metrics
from .protocol import (
    AggregationReport,
    ControlCentreState,
    GroupReport,
    UpdateMessage,
    aggregate_fedavg,
    aggregate_fedsgd,
    aggregate_semi_async,
    buffer_push,
    calibrate_cutoff,
    dequantize_sign,
    quantize_sign,
)

MODES = ("semi-async", "fedavg", "fedsgd")
EVENT_KINDS = ("broadcast-arrival", "local-train-done", "update-arrival", "cutoff-fired", "pause-start", "pause-end")

# purpose codes for derived random streams
_INIT, _TRAIN, _DOWN, _UP, _WARM_DOWN, _WARM_UP, _STRAGGLERS, _PRETRAIN = range(8)


def derive_seed(master: int, *keys: int) -> int:
    """Independent 63-bit seed for a (purpose, client, round, ...) key."""
    state = np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


@dataclass(frozen=True)
class LatencyModel:
    kind: str = "constant"
    params: tuple[float, ...] = (0.0,)
    seed: int = 0

    def __post_init__(self):
        p = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", p)
        ok = {
            "constant": len(p) == 1 and p[0] >= 0,
            "uniform": len(p) == 2 and 0 <= p[0] <= p[1],
            "exponential": len(p) == 1 and p[0] > 0,
        }
        if self.kind not in ok:
            raise ConfigError(f"unknown latency distribution {self.kind!r}")
        if not ok[self.kind] or not all(math.isfinite(v) for v in p):
            raise ConfigError(f"invalid parameters {p} for {self.kind} latency")

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "uniform":
            return 0.5 * (self.params[0] + self.params[1])
        return 1.0 / self.params[0]


def sample_latency(model: LatencyModel, position: int, stream: int = 0) -> float:
    """The ``position``-th delay of a stream; depends only on (seed, stream, position).

    Exponential parameters are rates (mean ``1 / rate``).
    """
    if position < 0:
        raise ConfigError("stream position must be non-negative")
    if model.kind == "constant":
        return model.params[0]
    key = np.random.SeedSequence([int(model.seed), int(stream)]).generate_state(2, np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key, counter=int(position)))
    if model.kind == "uniform":
        lo, hi = model.params
        return float(lo + (hi - lo) * rng.random())
    return float(rng.exponential(1.0 / model.params[0]))


@dataclass(frozen=True)
class StragglerPolicy:
    affected_fraction: float = 0.0
    pause_duration: float = 0.0
    onset_round: int = 0
    seed: int = 0
    every_round: bool = True

    def __post_init__(self):
        if not 0.0 <= self.affected_fraction <= 1.0:
            raise ConfigError("affected_fraction must lie in [0, 1]")
        if self.pause_duration < 0:
            raise ConfigError("pause_duration must be non-negative")

    def count(self, n_clients: int) -> int:
        return int(math.floor(self.affected_fraction * n_clients + 1e-9))

    def select(self, n_clients: int) -> frozenset[int]:
        """Deterministic choice of affected clients; nested as the fraction grows."""
        order = np.random.default_rng(self.seed).permutation(n_clients)
        return frozenset(int(c) for c in order[: self.count(n_clients)])


@dataclass(frozen=True)
class Schedule:
    """Per-(client, round) timing: network delays plus straggler pauses."""

    n_clients: int
    downlink: LatencyModel = LatencyModel()
    uplink: LatencyModel = LatencyModel()
    paused: frozenset[int] = frozenset()
    pause_duration: float = 0.0
    onset_round: int = 0
    every_round: bool = True

    def downlink_delay(self, client: int, rnd: int) -> float:
        return sample_latency(self.downlink, rnd, stream=client)

    def uplink_delay(self, client: int, rnd: int) -> float:
        return sample_latency(self.uplink, rnd, stream=client)

    def pause(self, client: int, rnd: int) -> float:
        if client not in self.paused:
            return 0.0
        hit = rnd >= self.onset_round if self.every_round else rnd == self.onset_round
        return self.pause_duration if hit else 0.0


def inject_stragglers(policy: StragglerPolicy, schedule: Schedule) -> Schedule:
    """Pause the policy's clients after local training in affected rounds."""
    if not 0.0 <= policy.affected_fraction <= 1.0:
        raise ConfigError("affected_fraction must lie in [0, 1]")
    return replace(
        schedule,
        paused=policy.select(schedule.n_clients),
        pause_duration=policy.pause_duration,
        onset_round=policy.onset_round,
        every_round=policy.every_round,
    )


@dataclass(frozen=True)
class ConvergenceRule:
    """Fires once ``patience`` consecutive aggregations satisfy the condition.

    Without a target the condition is "metric within ``tolerance`` of the
    best value seen so far"; with a target it is "metric >= target".
    """

    metric: str = "accuracy"
    tolerance: float = 0.01
    patience: int = 5
    target: float | None = None

    def fired_at(self, values: list[float]) -> int | None:
        """Index into ``values`` where the rule first fires, or None."""
        for i in range(self.patience - 1, len(values)):
            window = values[i - self.patience + 1: i + 1]
            if self.target is not None:
                ok = all(v >= self.target for v in window)
            else:
                best = max(values[: i + 1])
                ok = all(v >= best - self.tolerance for v in window)
            if ok:
                return i
        return None


@dataclass(frozen=True)
class RunConfig:
    n_clients: int = 10
    rounds: int = 20
    mode: str = "semi-async"
    train: nc.TrainConfig = nc.TrainConfig()
    downlink: LatencyModel = LatencyModel()
    uplink: LatencyModel = LatencyModel()
    stragglers: StragglerPolicy = StragglerPolicy()
    cutoff: float | None = None  # None: calibrate from a warm-up round
    staleness_exponent: float = 0.5
    server_lr: float | None = None  # None: client learning rate
    fedsgd_lr: float | None = None  # FedSGD step size; None: server_lr
    widths: tuple[int, ...] = nc.DEFAULT_WIDTHS
    convergence: ConvergenceRule = ConvergenceRule()
    stop_at_convergence: bool = False
    time_budget: float | None = None
    budget_cutoffs: float | None = None  # budget as a multiple of the calibrated cut-off
    train_on: str = "natural"
    quantize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be at least 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.cutoff is not None and not self.cutoff > 0:
            raise ConfigError("cutoff must be positive")
        if self.train_on not in ("natural", "all"):
            raise ConfigError("train_on must be 'natural' or 'all'")
        for name in ("server_lr", "fedsgd_lr", "staleness_exponent"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"{name} must be positive")
        if self.time_budget is not None and self.time_budget <= 0:
            raise ConfigError("time_budget must be positive")
        if self.budget_cutoffs is not None and self.budget_cutoffs <= 0:
            raise ConfigError("budget_cutoffs must be positive")
        if self.time_budget is not None and self.budget_cutoffs is not None:
            raise ConfigError("set at most one of time_budget and budget_cutoffs")

    @property
    def effective_server_lr(self) -> float:
        if self.mode == "fedsgd" and self.fedsgd_lr is not None:
            return self.fedsgd_lr
        return self.train.learning_rate if self.server_lr is None else self.server_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class RunResult:
    config: dict
    cutoff: float | None
    time_budget: float | None
    timeline: list[dict]
    reports: list[dict]
    events: list[dict]
    final_params: nc.ModelParams
    final_tau: float
    final_metrics: MetricsReport
    best_metrics: MetricsReport
    training_time: float
    converged: bool
    convergence_round: int | None
    stop_reason: str
    history: list[nc.ModelParams] = field(default_factory=list, repr=False)  # global model after each aggregation, index 0 = initial

    def summary(self) -> dict:
        return {
            "training_time": self.training_time,
            "converged": self.converged,
            "convergence_round": self.convergence_round,
            "rounds_completed": len(self.timeline) - 1,
            "stop_reason": self.stop_reason,
            "final": self.final_metrics.to_dict(),
            "best": self.best_metrics.to_dict(),
        }


def local_rows(data: ProcessedDataset, train_on: str) -> np.ndarray:
    if train_on == "natural":
        return data.features[data.labels == nc.NATURAL]
    return data.features


def calibration_waits(cfg: RunConfig, partition: Partition) -> list[float]:
    """Per-client wait (downlink + compute + uplink) of a learning-free warm-up round."""
    down = replace(cfg.downlink, seed=derive_seed(cfg.seed, _WARM_DOWN))
    up = replace(cfg.uplink, seed=derive_seed(cfg.seed, _WARM_UP))
    waits = []
    for k, client in enumerate(partition.clients):
        n = local_rows(client, cfg.train_on).shape[0]
        compute = n * cfg.train.local_epochs * cfg.train.sample_cost
        waits.append(sample_latency(down, 0, k) + compute + sample_latency(up, 0, k))
    return waits


def mean_compute_cost(cfg: RunConfig, partition: Partition) -> float:
    """Average per-round local compute time across clients."""
    costs = [local_rows(c, cfg.train_on).shape[0] * cfg.train.local_epochs * cfg.train.sample_cost for c in partition.clients]
    return float(np.mean(costs))


def build_schedule(cfg: RunConfig) -> Schedule:
    base = Schedule(
        n_clients=cfg.n_clients,
        downlink=replace(cfg.downlink, seed=derive_seed(cfg.seed, _DOWN)),
        uplink=replace(cfg.uplink, seed=derive_seed(cfg.seed, _UP)),
    )
    policy = replace(cfg.stragglers, seed=derive_seed(cfg.seed, _STRAGGLERS))
    return inject_stragglers(policy, base)


def evaluate(params: nc.ModelParams, train_features: np.ndarray, test: ProcessedDataset) -> tuple[float, MetricsReport]:
    """Threshold from the training split's reconstruction errors, then score the test split."""
    tau = nc.select_threshold(nc.reconstruction_errors(params, train_features))
    return tau, compute_metrics(nc.detect_batch(params, tau, test.features), test.labels)


class _EventQueue:
    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.log: list[dict] = []

    def push(self, time: float, kind: str, client: int, rnd: int, payload: Any = None) -> None:
        heapq.heappush(self._heap, (time, self._seq, kind, client, rnd, payload))
        self._seq += 1

    def pop(self):
        time, seq, kind, client, rnd, payload = heapq.heappop(self._heap)
        self.log.append({"time": time, "sequence": seq, "kind": kind, "client": client, "round": rnd})
        return time, kind, client, rnd, payload

    def __bool__(self) -> bool:
        return bool(self._heap)


class _Run:
    def __init__(self, cfg: RunConfig, partition: Partition, testset: ProcessedDataset):
        if partition.k != cfg.n_clients:
            raise ConfigError(f"partition has {partition.k} clients, config expects {cfg.n_clients}")
        self.cfg = cfg
        self.test = testset
        self.local = [local_rows(c, cfg.train_on) for c in partition.clients]
        empty = [k for k, rows in enumerate(self.local) if rows.shape[0] == 0]
        if empty:
            raise ConfigError(f"clients {empty} have no training rows")
        self.train_features = np.vstack([c.features for c in partition.clients])
        self.schedule = build_schedule(cfg)
        self.queue = _EventQueue()
        self.timeline: list[dict] = []
        self.reports: list[dict] = []
        self.snapshots: list[tuple[nc.ModelParams, float, MetricsReport]] = []
        calibrated = cfg.cutoff if cfg.cutoff is not None else calibrate_cutoff(calibration_waits(cfg, partition))
        self.cutoff = calibrated if cfg.mode == "semi-async" else None
        self.budget = cfg.time_budget
        if cfg.budget_cutoffs is not None:
            self.budget = cfg.budget_cutoffs * calibrated
        params = nc.dae_init(cfg.widths, derive_seed(cfg.seed, _INIT))
        self.params = self._pretrain(params)
        self.stop_reason = "round-cap"

    def _pretrain(self, params: nc.ModelParams) -> nc.ModelParams:
        epochs = self.cfg.train.cd_pretrain_epochs
        if epochs == 0:
            return params
        stacks = [
            nc.pretrain_stack(params, rows, epochs, self.cfg.train.learning_rate, derive_seed(self.cfg.seed, _PRETRAIN, k))
            for k, rows in enumerate(self.local)
        ]
        merged = aggregate_fedavg(stacks, [rows.shape[0] for rows in self.local])
        return replace(merged, version=0)

    def _train_cfg(self, client: int, rnd: int) -> nc.TrainConfig:
        return replace(self.cfg.train, rng_seed=derive_seed(self.cfg.seed, _TRAIN, client, rnd))

    def _record(self, time: float, params: nc.ModelParams) -> bool:
        """Evaluate after an aggregation; returns True when the run should stop."""
        tau, report = evaluate(params, self.train_features, self.test)
        entry = {"round": len(self.timeline), "version": params.version, "time": time, "tau": tau}
        entry.update(report.to_dict())
        self.timeline.append(entry)
        self.snapshots.append((params, tau, report))
        if len(self.timeline) == 1:
            return False
        if self.cfg.stop_at_convergence:
            values = [e[self.cfg.convergence.metric] for e in self.timeline[1:]]
            if self.cfg.convergence.fired_at(values) is not None:
                self.stop_reason = "converged"
                return True
        if len(self.timeline) - 1 >= self.cfg.rounds:
            return True
        return False

    def _over_budget(self, time: float) -> bool:
        if self.budget is not None and time > self.budget + 1e-12:
            self.stop_reason = "time-budget"
            return True
        return False

    def _start_round(self, rnd: int, time: float) -> None:
        for k in range(self.cfg.n_clients):
            self.queue.push(time + self.schedule.downlink_delay(k, rnd), "broadcast-arrival", k, rnd, self.params)
        if self.cutoff is not None:
            self.queue.push(time + self.cutoff, "cutoff-fired", -1, rnd)

    def _local_work(self, client: int, rnd: int, params: nc.ModelParams, time: float) -> None:
        rows = self.local[client]
        cfg = self._train_cfg(client, rnd)
        if self.cfg.mode == "fedavg":
            new, _, processed = nc.local_sgd(params, rows, cfg)
            payload = (new, rows.shape[0])
            cost = processed * cfg.sample_cost
        elif self.cfg.mode == "fedsgd":
            grad = nc.backward(params, rows)
            payload = grad
            cost = rows.shape[0] * cfg.sample_cost
        else:
            grad, cost = nc.train_local(params, rows, cfg)
            if self.cfg.quantize:
                grad = dequantize_sign(quantize_sign(grad))
            payload = UpdateMessage(client, grad, params.version, cost, rows.shape[0])
        pause = self.schedule.pause(client, rnd)
        if pause > 0:
            self.queue.push(time + cost, "pause-start", client, rnd)
            self.queue.push(time + cost + pause, "pause-end", client, rnd)
        self.queue.push(time + cost + pause, "local-train-done", client, rnd, payload)

    def run(self) -> RunResult:
        if self.cfg.mode == "semi-async":
            self._run_semi_async()
        else:
            self._run_sync()
        return self._result()

    def _run_semi_async(self) -> None:
        state = ControlCentreState(
            global_params=self.params,
            cutoff_time=self.cutoff,
            n_clients=self.cfg.n_clients,
            staleness_exponent=self.cfg.staleness_exponent,
            server_lr=self.cfg.effective_server_lr,
        )
        busy = [False] * self.cfg.n_clients
        self._record(0.0, self.params)
        if self._over_budget(self.cutoff):
            return
        self._start_round(0, 0.0)
        while self.queue:
            time, kind, client, rnd, payload = self.queue.pop()
            if kind == "broadcast-arrival":
                # a client still busy with an older model ignores the broadcast
                if not busy[client]:
                    busy[client] = True
                    self._local_work(client, rnd, payload, time)
            elif kind == "local-train-done":
                busy[client] = False
                self.queue.push(time + self.schedule.uplink_delay(client, rnd), "update-arrival", client, rnd, payload)
            elif kind == "update-arrival":
                buffer_push(state, replace(payload, arrival_time=time))
            elif kind == "cutoff-fired":
                state, report = aggregate_semi_async(state, cutoff_time=time)
                self.params = state.global_params
                self.reports.append(report.to_dict())
                if self._record(time, self.params) or self._over_budget(time + self.cutoff):
                    return
                self._start_round(rnd + 1, time)

    def _run_sync(self) -> None:
        self._record(0.0, self.params)
        rnd = 0
        received: dict[int, Any] = {}
        self._start_round(rnd, 0.0)
        while self.queue:
            time, kind, client, r, payload = self.queue.pop()
            if kind == "broadcast-arrival":
                self._local_work(client, r, payload, time)
            elif kind == "local-train-done":
                self.queue.push(time + self.schedule.uplink_delay(client, r), "update-arrival", client, r, payload)
            elif kind == "update-arrival":
                received[client] = payload
                if len(received) < self.cfg.n_clients:
                    continue
                if self._over_budget(time):
                    return
                ids = sorted(received)
                if self.cfg.mode == "fedavg":
                    self.params = aggregate_fedavg([received[k][0] for k in ids], [received[k][1] for k in ids])
                else:
                    grads = [received[k] for k in ids]
                    self.params = aggregate_fedsgd(self.params, grads, [g.sample_count for g in grads], self.cfg.effective_server_lr)
                report = AggregationReport(
                    new_version=self.params.version,
                    groups=(GroupReport(self.params.version - 1, tuple(ids), 0, 1.0),),
                    carried_over=(),
                    time=time,
                )
                self.reports.append(report.to_dict())
                received = {}
                if self._record(time, self.params):
                    return
                rnd += 1
                self._start_round(rnd, time)

    def _result(self) -> RunResult:
        rule = self.cfg.convergence
        values = [e[rule.metric] for e in self.timeline[1:]]
        fired = rule.fired_at(values)
        if fired is not None:
            training_time = self.timeline[fired + 1]["time"]
        else:
            training_time = self.timeline[-1]["time"]
        params, tau, final = self.snapshots[-1]
        best = max((s[2] for s in self.snapshots[1:]), key=lambda m: m.accuracy, default=final)
        return RunResult(
            config=self.cfg.to_dict(),
            cutoff=self.cutoff,
            time_budget=self.budget,
            timeline=self.timeline,
            reports=self.reports,
            events=self.queue.log,
            final_params=params,
            final_tau=tau,
            final_metrics=final,
            best_metrics=best,
            training_time=training_time,
            converged=fired is not None,
            convergence_round=None if fired is None else fired + 1,
            stop_reason=self.stop_reason,
            history=[snap[0] for snap in self.snapshots],
        )


def run_simulation(cfg: RunConfig, partition: Partition, testset: ProcessedDataset) -> RunResult:
    """Simulate federated training and evaluate the global model after every aggregation.

    Semi-async rounds aggregate whatever reached the buffer by the cut-off;
    synchronous rounds wait for every client, stragglers included. A run
    ends at the round cap, at the time budget (no aggregation later than
    the budget) or, if requested, when the convergence rule fires.
    """
    return _Run(cfg, partition, testset).run()


def virtual_training_time(result: RunResult) -> float:
    """Virtual time at which the convergence rule fired, else the time of the last aggregation."""
    return result.training_time


RESULT_SCHEMA = 1


def run_config_from_dict(d: dict) -> RunConfig:
    """Inverse of ``RunConfig.to_dict``; unknown keys raise ConfigError."""
    d = dict(d)
    nested = {
        "train": nc.TrainConfig,
        "downlink": LatencyModel,
        "uplink": LatencyModel,
        "stragglers": StragglerPolicy,
        "convergence": ConvergenceRule,
    }
    try:
        for key, cls in nested.items():
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                if "params" in sub:
                    sub["params"] = tuple(sub["params"])
                d[key] = cls(**sub)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return RunConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def result_record(result: RunResult) -> dict:
    return {
        "schema_version": RESULT_SCHEMA,
        "config": result.config,
        "cutoff": result.cutoff,
        "time_budget": result.time_budget,
        "timeline": result.timeline,
        "final_tau": result.final_tau,
        **result.summary(),
    }


def write_run_result(path, result: RunResult) -> None:
    with open(path, "w") as fh:
        json.dump(result_record(result), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_run_result(path) -> dict:
    with open(path) as fh:
        record = json.load(fh)
    if record.get("schema_version") != RESULT_SCHEMA:
        raise ConfigError(f"{path}: unsupported run record schema {record.get('schema_version')!r}")
    return record


def write_event_log(path, events: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "sequence", "kind", "client", "round"])
        for e in events:
            writer.writerow([repr(float(e["time"])), e["sequence"], e["kind"], e["client"], e["round"]])


def read_event_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"time": float(r["time"]), "sequence": int(r["sequence"]), "kind": r["kind"], "client": int(r["client"]), "round": int(r["round"])}
            for r in csv.DictReader(fh)
        ]


def write_aggregation_log(path, reports: list[dict]) -> None:
    """One JSON record per aggregation; virtual times only, so reruns are byte-identical."""
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep, sort_keys=True) + "\n")
