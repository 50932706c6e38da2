"""Control-centre aggregation: buffered semi-asynchronous rounds and the
synchronous FedAvg / FedSGD baselines.

The control centre owns a single mutable ``ControlCentreState``. All
mutations go through ``buffer_push`` and ``aggregate_semi_async``, which the
simulator calls in event order, so a replayed message sequence reproduces
the same trajectory bit for bit.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import CalibrationError, ProtocolError, StalenessError
from .numeric import Gradient, ModelParams


@dataclass(frozen=True)
class UpdateMessage:
    client_id: int
    grad: Gradient
    base_version: int
    compute_cost: float
    sample_count: int
    arrival_time: float = 0.0


@dataclass(frozen=True)
class GroupReport:
    base_version: int
    client_ids: tuple[int, ...]
    staleness: int
    weight: float


@dataclass(frozen=True)
class AggregationReport:
    new_version: int
    groups: tuple[GroupReport, ...]
    carried_over: tuple[int, ...]
    time: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [dict(g, client_ids=list(g["client_ids"])) for g in d["groups"]]
        d["carried_over"] = list(self.carried_over)
        return d


@dataclass
class ControlCentreState:
    global_params: ModelParams
    cutoff_time: float
    n_clients: int
    staleness_exponent: float = 0.5
    server_lr: float = 1e-3
    buffer: list[UpdateMessage] = field(default_factory=list)
    client_costs: list[float] = field(default_factory=list)
    round_counter: int = 0

    def __post_init__(self):
        if not self.cutoff_time > 0:
            raise ProtocolError("cut-off time must be positive")
        if self.staleness_exponent <= 0 or self.server_lr <= 0:
            raise ProtocolError("staleness exponent and server learning rate must be positive")
        if not self.client_costs:
            self.client_costs = [0.0] * self.n_clients

    @property
    def version(self) -> int:
        return self.global_params.version


def _check_layout(reference: Sequence[np.ndarray], arrays: Sequence[np.ndarray]) -> None:
    if len(reference) != len(arrays) or any(a.shape != b.shape for a, b in zip(reference, arrays)):
        raise ProtocolError("update layout does not match the global model")


def buffer_push(state: ControlCentreState, msg: UpdateMessage) -> ControlCentreState:
    """Queue ``msg``, dropping any older pending update from the same client."""
    if not 0 <= msg.client_id < state.n_clients:
        raise ProtocolError(f"unknown client {msg.client_id}")
    if not 0 <= msg.base_version <= state.version:
        raise ProtocolError(f"base version {msg.base_version} is ahead of global {state.version}")
    if msg.sample_count < 1:
        raise ProtocolError("sample_count must be positive")
    _check_layout(state.global_params.arrays(), msg.grad.arrays)
    state.buffer = [m for m in state.buffer if m.client_id != msg.client_id]
    state.buffer.append(msg)
    state.client_costs[msg.client_id] = msg.compute_cost
    return state


def staleness_weight(current_version: int, base_version: int, a: float = 0.5) -> float:
    """Polynomial decay ``(1 + staleness) ** -a``."""
    if base_version > current_version:
        raise StalenessError(f"base version {base_version} is newer than {current_version}")
    if a <= 0:
        raise ValueError("staleness exponent must be positive")
    return float((1 + current_version - base_version) ** (-a))


def weighted_mean(arrays_list: Sequence[Sequence[np.ndarray]], counts: Sequence[int]) -> list[np.ndarray]:
    """Sample-weighted mean, written as first + sum(w * (x - first)) so identical inputs come back unchanged."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or counts.size != len(arrays_list):
        raise ProtocolError("need one positive count per input")
    if np.any(counts <= 0):
        raise ProtocolError("sample counts must be positive")
    first = arrays_list[0]
    for other in arrays_list[1:]:
        _check_layout(first, other)
    weights = counts / counts.sum()
    out = []
    for i, base in enumerate(first):
        acc = np.zeros_like(base)
        for w, arrays in zip(weights[1:], arrays_list[1:]):
            acc += w * (arrays[i] - base)
        out.append(base + acc)
    return out


def aggregate_semi_async(state: ControlCentreState, cutoff_time: float | None = None) -> tuple[ControlCentreState, AggregationReport]:
    """Aggregate the buffered updates at a cut-off.

    Updates that arrived by ``cutoff_time`` (all of them when it is None)
    are grouped by the model version they were computed on. Each group's
    sample-weighted mean gradient is applied with step
    ``server_lr * staleness_weight``, stalest group first. Later arrivals stay
    buffered. The global version advances by one even when nothing was
    aggregated.
    """
    snapshot = [m for m in state.buffer if cutoff_time is None or m.arrival_time <= cutoff_time]
    current = state.version
    groups: dict[int, list[UpdateMessage]] = defaultdict(list)
    for m in snapshot:
        groups[m.base_version].append(m)
    arrays = state.global_params.arrays()
    reports = []
    for v in sorted(groups):
        members = groups[v]
        mean = weighted_mean([m.grad.arrays for m in members], [m.sample_count for m in members])
        lam = staleness_weight(current, v, state.staleness_exponent)
        step = state.server_lr * lam
        arrays = [p - step * g for p, g in zip(arrays, mean)]
        reports.append(GroupReport(v, tuple(m.client_id for m in members), current - v, lam))
    aggregated = {id(m) for m in snapshot}
    state.buffer = [m for m in state.buffer if id(m) not in aggregated]
    state.global_params = state.global_params.with_arrays(arrays, version=current + 1)
    state.round_counter += 1
    report = AggregationReport(
        new_version=current + 1,
        groups=tuple(reports),
        carried_over=tuple(m.client_id for m in state.buffer),
        time=0.0 if cutoff_time is None else float(cutoff_time),
    )
    return state, report


def aggregate_fedavg(params_list: Sequence[ModelParams], sample_counts: Sequence[int]) -> ModelParams:
    """Parameter-wise average weighted by local sample counts; version is max input + 1."""
    if not params_list:
        raise ProtocolError("nothing to average")
    mean = weighted_mean([p.arrays() for p in params_list], sample_counts)
    return params_list[0].with_arrays(mean, version=max(p.version for p in params_list) + 1)


def aggregate_fedsgd(global_params: ModelParams, grads: Sequence[Gradient], sample_counts: Sequence[int], lr: float) -> ModelParams:
    """One server step along the sample-weighted mean of the client gradients."""
    if not grads:
        raise ProtocolError("no gradients to aggregate")
    arrays = global_params.arrays()
    for g in grads:
        _check_layout(arrays, g.arrays)
    mean = weighted_mean([g.arrays for g in grads], sample_counts)
    return global_params.with_arrays([p - lr * g for p, g in zip(arrays, mean)], version=global_params.version + 1)


@dataclass(frozen=True)
class SignQuantized:
    signs: tuple[np.ndarray, ...]  # int8 in {-1, 0, 1}, one per parameter array
    scales: tuple[float, ...]  # mean magnitude, one per parameter array
    sample_count: int


def quantize_sign(grad: Gradient) -> SignQuantized:
    """One-bit compression: element signs plus the mean magnitude of each weight or bias array."""
    signs = tuple(np.sign(a).astype(np.int8) for a in grad.arrays)
    scales = tuple(float(np.abs(a).mean()) if a.size else 0.0 for a in grad.arrays)
    return SignQuantized(signs, scales, grad.sample_count)


def dequantize_sign(q: SignQuantized) -> Gradient:
    arrays = [s.astype(np.float64) * scale for s, scale in zip(q.signs, q.scales)]
    return Gradient(tuple(arrays), q.sample_count)


def calibrate_cutoff(observed_waits: Sequence[float]) -> float:
    """Cut-off time set to twice the average client waiting time."""
    waits = np.asarray(observed_waits, dtype=np.float64)
    if waits.size == 0:
        raise CalibrationError("no waiting times observed")
    if np.any(waits < 0) or not np.all(np.isfinite(waits)):
        raise CalibrationError("waiting times must be finite and non-negative")
    return float(2.0 * waits.mean())
