from dataclasses import replace

import numpy as np
import pytest

from fedisa import data as dp
from fedisa import numeric as nc
from fedisa import sim
from fedisa.errors import ConfigError

WIDTHS = (10, 6, 3)


def base_cfg(**kw):
    opts = dict(
        n_clients=4,
        rounds=3,
        widths=WIDTHS,
        train=nc.TrainConfig(batch_size=1000, learning_rate=0.2, local_epochs=1),
    )
    opts.update(kw)
    return sim.RunConfig(**opts)


def equal_partition(ds, k):
    """k clients holding the same number of natural rows (and nothing else)."""
    nat = np.flatnonzero(ds.labels == nc.NATURAL)
    per = nat.size // k
    idx = [nat[c * per:(c + 1) * per] for c in range(k)]
    return dp.Partition(tuple(ds.subset(i) for i in idx), tuple(idx), "manual", 0)


# ---------------------------------------------------------------- latency / stragglers

def test_latency_examples():
    assert all(sim.sample_latency(sim.LatencyModel("constant", (0.4,)), i) == 0.4 for i in range(5))
    assert all(sim.sample_latency(sim.LatencyModel("uniform", (1, 1), seed=3), i) == 1.0 for i in range(5))


def test_exponential_mean_within_two_percent():
    model = sim.LatencyModel("exponential", (4.0,), seed=12)
    draws = np.array([sim.sample_latency(model, i) for i in range(100_000)])
    assert abs(draws.mean() - 0.25) / 0.25 < 0.02
    assert np.all(draws >= 0) and np.all(np.isfinite(draws))


def test_latency_is_counter_based():
    model = sim.LatencyModel("uniform", (0.0, 2.0), seed=5)
    forward = [sim.sample_latency(model, i, stream=1) for i in range(20)]
    backward = [sim.sample_latency(model, i, stream=1) for i in reversed(range(20))][::-1]
    assert forward == backward
    assert forward != [sim.sample_latency(model, i, stream=2) for i in range(20)]


@pytest.mark.parametrize("kind,params", [("constant", (-1,)), ("uniform", (2, 1)), ("exponential", (0,)), ("gamma", (1,))])
def test_latency_invalid(kind, params):
    with pytest.raises(ConfigError):
        sim.LatencyModel(kind, params)


def test_straggler_selection_counts():
    sched = sim.Schedule(10)
    assert sim.inject_stragglers(sim.StragglerPolicy(0.0, 1.0), sched).paused == frozenset()
    assert len(sim.inject_stragglers(sim.StragglerPolicy(1.0, 1.0), sched).paused) == 10
    three = sim.inject_stragglers(sim.StragglerPolicy(0.3, 1.0, seed=4), sched)
    assert len(three.paused) == 3
    assert three.paused == sim.inject_stragglers(sim.StragglerPolicy(0.3, 1.0, seed=4), sched).paused
    assert three.paused <= sim.StragglerPolicy(0.5, 1.0, seed=4).select(10)
    with pytest.raises(ConfigError):
        sim.StragglerPolicy(1.5, 1.0)


def test_pause_onset_and_single_round():
    sched = sim.inject_stragglers(sim.StragglerPolicy(1.0, 2.0, onset_round=2), sim.Schedule(2))
    assert [sched.pause(0, r) for r in range(4)] == [0.0, 0.0, 2.0, 2.0]
    once = sim.inject_stragglers(sim.StragglerPolicy(1.0, 2.0, onset_round=1, every_round=False), sim.Schedule(2))
    assert [once.pause(1, r) for r in range(3)] == [0.0, 2.0, 0.0]


# ---------------------------------------------------------------- convergence rule

def test_convergence_rule_running_best():
    rule = sim.ConvergenceRule(tolerance=0.01, patience=3)
    assert rule.fired_at([0.5, 0.7, 0.9, 0.905, 0.899]) == 4
    assert rule.fired_at([0.5, 0.7, 0.9]) is None
    target = sim.ConvergenceRule(target=0.8, patience=2)
    assert target.fired_at([0.85, 0.7, 0.81, 0.9]) == 3


# ---------------------------------------------------------------- run_simulation

def test_mismatched_k(small_data):
    part = dp.partition(small_data.train, 3, seed=0)
    with pytest.raises(ConfigError):
        sim.run_simulation(base_cfg(n_clients=4), part, small_data.test)


def test_semi_async_matches_fedsgd_when_fresh(small_data):
    part = dp.partition(small_data.train, 4, seed=1)
    cfg = base_cfg(rounds=5, cutoff=100.0)
    semi = sim.run_simulation(cfg, part, small_data.test)
    sgd = sim.run_simulation(replace(cfg, mode="fedsgd"), part, small_data.test)
    assert len(semi.history) == len(sgd.history) == 6
    assert not np.array_equal(semi.history[0].arrays()[0], semi.history[-1].arrays()[0])
    for a, b in zip(semi.history, sgd.history):
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)
    assert [e["accuracy"] for e in semi.timeline] == [e["accuracy"] for e in sgd.timeline]


def test_single_client_is_serial_local_training(small_data):
    part = dp.partition(small_data.train, 1, seed=0)
    train = nc.TrainConfig(batch_size=16, learning_rate=0.1, local_epochs=2)
    cfg = base_cfg(n_clients=1, rounds=3, train=train, mode="fedavg")
    res = sim.run_simulation(cfg, part, small_data.test)
    rows = part.clients[0].features[part.clients[0].labels == nc.NATURAL]
    p = res.history[0]
    for r in range(3):
        seed = sim.derive_seed(cfg.seed, 1, 0, r)
        p, _, _ = nc.local_sgd(p, rows, replace(train, rng_seed=seed))
    for x, y in zip(p.arrays(), res.final_params.arrays()):
        np.testing.assert_array_equal(x, y)

    semi = sim.run_simulation(replace(cfg, mode="semi-async"), part, small_data.test)
    for x, y in zip(p.arrays(), semi.final_params.arrays()):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-10)


def test_run_is_deterministic(small_data):
    part = dp.partition(small_data.train, 4, seed=2)
    cfg = base_cfg(
        rounds=4,
        downlink=sim.LatencyModel("exponential", (10.0,)),
        uplink=sim.LatencyModel("uniform", (0.0, 0.1)),
        stragglers=sim.StragglerPolicy(0.5, 0.3),
        seed=9,
    )
    a = sim.run_simulation(cfg, part, small_data.test)
    b = sim.run_simulation(cfg, part, small_data.test)
    assert a.timeline == b.timeline and a.events == b.events and a.reports == b.reports
    for x, y in zip(a.final_params.arrays(), b.final_params.arrays()):
        np.testing.assert_array_equal(x, y)
    c = sim.run_simulation(replace(cfg, seed=10), part, small_data.test)
    assert c.events != a.events


def _round_times(res):
    return [e["time"] for e in res.timeline[1:]]


def test_sync_round_duration_grows_with_pause(small_data):
    part = equal_partition(small_data.train, 2)
    d, cost_per_sample = 0.05, 1e-3
    n = part.clients[0].features.shape[0]
    c = n * cost_per_sample
    lat = sim.LatencyModel("constant", (d,))
    for pause in (0.5, 1.0):
        cfg = base_cfg(n_clients=2, rounds=3, mode="fedavg", downlink=lat, uplink=lat,
                       stragglers=sim.StragglerPolicy(0.5, pause))
        times = _round_times(sim.run_simulation(cfg, part, small_data.test))
        expected = [(r + 1) * (2 * d + c + pause) for r in range(3)]
        assert times == pytest.approx(expected, abs=1e-12)


def test_semi_async_round_is_cutoff_when_pause_is_longer(small_data):
    part = equal_partition(small_data.train, 2)
    lat = sim.LatencyModel("constant", (0.05,))
    for pause in (1.0, 3.0):
        cfg = base_cfg(n_clients=2, rounds=4, downlink=lat, uplink=lat, cutoff=0.3,
                       stragglers=sim.StragglerPolicy(0.5, pause))
        times = _round_times(sim.run_simulation(cfg, part, small_data.test))
        assert times == pytest.approx([0.3 * (r + 1) for r in range(4)], abs=1e-12)


def test_zero_latency_sync_and_semi_rounds_within_one_cutoff(small_data):
    part = equal_partition(small_data.train, 2)
    sync = sim.run_simulation(base_cfg(n_clients=2, rounds=3, mode="fedavg"), part, small_data.test)
    semi = sim.run_simulation(base_cfg(n_clients=2, rounds=3), part, small_data.test)
    sync_round = np.diff([0.0] + _round_times(sync))
    semi_round = np.diff([0.0] + _round_times(semi))
    assert np.all(np.abs(sync_round - semi_round) <= semi.cutoff + 1e-12)


def test_cutoff_calibration_from_constant_warmup(small_data):
    part = dp.partition(small_data.train, 4, seed=0)
    lat = sim.LatencyModel("constant", (0.02,))
    cfg = base_cfg(downlink=lat, uplink=lat, rounds=1)
    res = sim.run_simulation(cfg, part, small_data.test)
    costs = [(c.labels == nc.NATURAL).sum() * 1e-3 for c in part.clients]
    assert res.cutoff == pytest.approx(2 * (0.04 + np.mean(costs)), abs=1e-12)


def _event_checks(res, n_clients):
    ev = res.events
    assert [(e["time"], e["sequence"]) for e in ev] == sorted((e["time"], e["sequence"]) for e in ev)
    first = {}
    for e in ev:
        first.setdefault((e["kind"], e["client"], e["round"]), e["time"])
    for (kind, client, rnd), t in first.items():
        if kind == "update-arrival":
            assert first[("local-train-done", client, rnd)] <= t
        if kind == "local-train-done":
            assert first[("broadcast-arrival", client, rnd)] <= t


def test_event_log_causality_and_sync_barrier(small_data):
    part = dp.partition(small_data.train, 4, seed=3)
    lat = sim.LatencyModel("exponential", (20.0,))
    cfg = base_cfg(mode="fedavg", rounds=3, downlink=lat, uplink=lat, stragglers=sim.StragglerPolicy(0.5, 0.4), seed=2)
    res = sim.run_simulation(cfg, part, small_data.test)
    _event_checks(res, 4)
    for r, entry in enumerate(res.timeline[1:]):
        arrivals = [e["time"] for e in res.events if e["kind"] == "update-arrival" and e["round"] == r]
        assert len(arrivals) == 4
        assert entry["time"] == max(arrivals)


def test_semi_async_bound_and_straggler_accounting(small_data):
    part = dp.partition(small_data.train, 4, seed=3)
    lat = sim.LatencyModel("exponential", (20.0,))
    cfg = base_cfg(rounds=8, downlink=lat, uplink=lat, stragglers=sim.StragglerPolicy(0.5, 0.5), seed=2)
    res = sim.run_simulation(cfg, part, small_data.test)
    _event_checks(res, 4)
    durations = np.diff([e["time"] for e in res.timeline])
    assert np.all(durations <= res.cutoff + 1e-12)
    paused = sim.build_schedule(cfg).paused
    stale_clients = {c for rep in res.reports for g in rep["groups"] if g["staleness"] >= 1 for c in g["client_ids"]}
    assert paused and paused <= stale_clients
    assert [rep["new_version"] for rep in res.reports] == list(range(1, 9))


def test_time_budget_stops_aggregation(small_data):
    part = equal_partition(small_data.train, 2)
    cfg = base_cfg(n_clients=2, rounds=50, mode="fedavg", stragglers=sim.StragglerPolicy(0.5, 1.0), budget_cutoffs=5)
    res = sim.run_simulation(cfg, part, small_data.test)
    assert res.stop_reason == "time-budget"
    assert res.timeline[-1]["time"] <= res.time_budget
    semi = sim.run_simulation(replace(cfg, mode="semi-async"), part, small_data.test)
    assert len(semi.timeline) - 1 == 5


def test_round_cap_reports_not_converged(small_data):
    part = dp.partition(small_data.train, 2, seed=0)
    res = sim.run_simulation(base_cfg(n_clients=2, rounds=2), part, small_data.test)
    assert not res.converged
    assert sim.virtual_training_time(res) == res.timeline[-1]["time"]


def test_stop_at_convergence(small_data):
    part = dp.partition(small_data.train, 2, seed=0)
    rule = sim.ConvergenceRule(target=0.0, patience=2)
    res = sim.run_simulation(base_cfg(n_clients=2, rounds=10, convergence=rule, stop_at_convergence=True), part, small_data.test)
    assert res.converged and res.convergence_round == 2 and len(res.timeline) == 3
    assert sim.virtual_training_time(res) == res.timeline[2]["time"]


def test_quantized_uploads_and_pretraining_run(small_data):
    part = dp.partition(small_data.train, 2, seed=0)
    cfg = base_cfg(n_clients=2, rounds=2, quantize=True,
                   train=nc.TrainConfig(batch_size=50, learning_rate=0.1, cd_pretrain_epochs=1))
    res = sim.run_simulation(cfg, part, small_data.test)
    assert len(res.timeline) == 3
    assert all(np.isfinite(a).all() for a in res.final_params.arrays())


def test_config_round_trip_and_validation():
    cfg = base_cfg(stragglers=sim.StragglerPolicy(0.2, 1.0), downlink=sim.LatencyModel("uniform", (0.1, 0.2)))
    assert sim.run_config_from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        sim.run_config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        base_cfg(n_clients=0)
    with pytest.raises(ConfigError):
        base_cfg(rounds=0)
    with pytest.raises(ConfigError):
        base_cfg(mode="async")


def test_result_files(tmp_path, small_data):
    part = dp.partition(small_data.train, 2, seed=0)
    res = sim.run_simulation(base_cfg(n_clients=2, rounds=2), part, small_data.test)
    sim.write_run_result(tmp_path / "run.json", res)
    sim.write_event_log(tmp_path / "events.csv", res.events)
    record = sim.read_run_result(tmp_path / "run.json")
    assert record["final"] == res.final_metrics.to_dict()
    assert sim.read_event_log(tmp_path / "events.csv") == res.events
