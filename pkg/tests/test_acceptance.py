"""Acceptance criteria 1-8.

Each test prints (and the terminal summary repeats) one line of the form
``criterion N: PASS|FAIL - details``. Run just this file with
``pytest tests/test_acceptance.py -v``.
"""

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from fedisa import cli
from fedisa import data as dp
from fedisa import experiments as ex
from fedisa import numeric as nc
from fedisa import sim
from fedisa.metrics import compute_metrics

SEEDS = tuple(range(6))


@pytest.fixture(scope="module")
def desk():
    """Seed -> (train, test) synthetic desk-scale datasets (1400 training rows, 100 columns)."""
    out = {}
    for s in SEEDS:
        prepared = ex.desk_data(s)
        out[s] = (prepared.train, prepared.test)
    return out


# ---------------------------------------------------------------- 1

def _central_differences(params, batch, h):
    arrays = [a.copy() for a in params.arrays()]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            keep = a[idx]
            a[idx] = keep + h
            up = nc.mse_loss(batch, nc.forward(params.with_arrays(arrays), batch)[0])
            a[idx] = keep - h
            down = nc.mse_loss(batch, nc.forward(params.with_arrays(arrays), batch)[0])
            a[idx] = keep
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def test_criterion_1_gradient_correctness(criterion):
    start = time.perf_counter()
    worst = 0.0
    checked = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        widths = [int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 3))][: int(rng.integers(2, 4))]
        params = nc.dae_init(widths, seed)
        # perturb biases so no layer sits exactly on the ReLU kink
        params = params.with_arrays([a + 0.1 * rng.standard_normal(a.shape) for a in params.arrays()])
        batch = rng.random((int(rng.integers(1, 9)), widths[0]))
        analytic = nc.backward(params, batch).arrays
        numeric = _central_differences(params, batch, 1e-6)
        for a, f in zip(analytic, numeric):
            err = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)
            worst = max(worst, float(err.max(initial=0.0)))
            checked += a.size
    elapsed = time.perf_counter() - start
    criterion(1, worst <= 1e-4 and elapsed < 10,
              f"50 DAEs, {checked} entries, worst relative error {worst:.2e} (tol 1e-4), {elapsed:.2f}s (< 10s)")


# ---------------------------------------------------------------- 2

def _brute_knn(x, k):
    n, d = x.shape
    out = x.copy()
    for i, j in zip(*np.nonzero(np.isnan(x))):
        cands = []
        for r in range(n):
            if r == i or math.isnan(x[r, j]):
                continue
            mutual = [c for c in range(d) if not (math.isnan(x[i, c]) or math.isnan(x[r, c]))]
            if mutual:
                dist = math.sqrt(math.fsum((x[i, c] - x[r, c]) ** 2 for c in mutual) * d / len(mutual))
                cands.append((dist, r))
        cands.sort()
        if cands:
            out[i, j] = np.mean(np.array([x[r, j] for _, r in cands[:k]]))
        else:
            out[i, j] = np.nanmean(x[:, j])
    return out


def _brute_knee(errors):
    e = sorted(errors)
    n = len(e)
    best, best_i = -1.0, 0
    for i in range(n):
        num = abs((e[-1] - e[0]) * i - (n - 1) * (e[i] - e[0]))
        dist = num / math.sqrt((n - 1) ** 2 + (e[-1] - e[0]) ** 2)
        if dist > best:
            best, best_i = dist, i
    return float(np.percentile(e, 95)) if best < 1e-12 else e[best_i]


def test_criterion_2_oracle_equivalences(criterion):
    knn_ok = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 5))
        x.flat[rng.choice(30, size=int(rng.integers(1, 4)), replace=False)] = np.nan
        k = int(rng.integers(1, 5))
        knn_ok += bool(np.array_equal(dp.knn_impute(x, k), _brute_knn(x, k)))
    pca_err = 0.0
    for seed in range(20):
        x = np.random.default_rng(100 + seed).normal(size=(8, 5))
        m = dp.pca_fit(x, 5)
        pca_err = max(pca_err, float(np.abs(dp.pca_inverse(m, dp.pca_transform(m, x)) - x).max()))
    knee_ok = 0
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        e = rng.exponential(size=int(rng.integers(3, 60))) ** rng.uniform(0.5, 3)
        knee_ok += nc.select_threshold(e) == _brute_knee(e.tolist())
    criterion(2, knn_ok == 20 and pca_err <= 1e-8 and knee_ok == 20,
              f"KNN exact {knn_ok}/20, PCA round-trip max error {pca_err:.1e} (tol 1e-8), knee {knee_ok}/20")


# ---------------------------------------------------------------- 3

def test_criterion_3_protocol_equivalence(criterion, desk):
    start = time.perf_counter()
    train, test = desk[0]
    part = dp.partition(train, 4, seed=0)
    cfg = sim.RunConfig(
        n_clients=4, rounds=10, mode="semi-async", cutoff=1e6, seed=0,
        train=nc.TrainConfig(batch_size=10_000, learning_rate=0.3, local_epochs=1),
    )
    semi = sim.run_simulation(cfg, part, test)
    sgd = sim.run_simulation(replace(cfg, mode="fedsgd"), part, test)
    fresh = all(len(r["groups"]) == 1 and r["groups"][0]["staleness"] == 0 and len(r["groups"][0]["client_ids"]) == 4
                for r in semi.reports)
    worst = max(float(np.abs(a - b).max()) for p, q in zip(semi.history, sgd.history) for a, b in zip(p.arrays(), q.arrays()))
    moved = float(np.abs(semi.history[-1].arrays()[0] - semi.history[0].arrays()[0]).max())
    elapsed = time.perf_counter() - start
    ok = len(semi.history) == len(sgd.history) == 11 and fresh and worst <= 1e-12 and moved > 0 and elapsed < 30
    criterion(3, ok, f"10 rounds, K=4, all buffers fresh={fresh}, max parameter gap {worst:.1e} (tol 1e-12), "
                     f"parameters moved {moved:.2e}, {elapsed:.1f}s (< 30s)")


# ---------------------------------------------------------------- 4

def test_criterion_4_straggler_robustness(criterion, desk):
    start = time.perf_counter()
    settings = ex.resolve_settings("robustness")
    spec = ex.SweepSpec(settings, affected=tuple(range(6)), seeds=SEEDS)
    rows, _ = ex.run_sweep(spec, desk)
    summary = ex.robustness_summary(rows)
    drops = {m: summary[m]["drop"] for m in sim.MODES}

    def acc(mode, a, s):
        return next(r["final_accuracy"] for r in rows if (r["mode"], r["affected_nodes"], r["seed"]) == (mode, a, s))

    semi_dev = max(abs(acc("semi-async", 5, s) - acc("semi-async", 0, s)) for s in SEEDS)
    elapsed = time.perf_counter() - start
    ok = (drops["semi-async"] < drops["fedavg"] and drops["semi-async"] < drops["fedsgd"]
          and abs(drops["semi-async"]) <= 0.05 and semi_dev <= 0.05 and elapsed < 600)
    detail = ", ".join(f"{m} {summary[m]['baseline']:.4f}->{summary[m]['stressed']:.4f} (drop {drops[m]:+.4f})" for m in sim.MODES)
    criterion(4, ok, f"0->5 affected, mean over seeds {list(SEEDS)}: {detail}; "
                     f"largest per-seed semi-async change {semi_dev:.4f} (<= 0.05); {len(rows)} runs in {elapsed:.0f}s")


# ---------------------------------------------------------------- 5

def test_criterion_5_training_time(criterion, desk):
    settings = ex.resolve_settings("training-time")
    spec = ex.SweepSpec(settings, modes=("semi-async", "fedavg"), affected=(2, 3, 5), seeds=SEEDS)
    rows, _ = ex.run_sweep(spec, desk)
    ratios = {a: ex.time_ratio(rows, a) for a in (2, 3, 5)}
    converged = all(r["converged"] for r in rows)
    train, _ = desk[0]
    cfg = ex.build_run_config(settings, ex.make_partition(train, settings))
    multiple = cfg.stragglers.pause_duration / sim.mean_compute_cost(cfg, ex.make_partition(train, settings))
    ok = converged and multiple >= 2 - 1e-9 and all(0.5 <= r <= 0.8 for r in ratios.values())
    shown = ", ".join(f"{a} affected {r:.3f}" for a, r in ratios.items())
    criterion(5, ok, f"semi-async/FedAvg virtual training time pooled over seeds {list(SEEDS)}: {shown} "
                     f"(band 0.5-0.8), pause {multiple:.1f}x mean compute, all runs converged={converged}")


# ---------------------------------------------------------------- 6

def test_criterion_6_detection_quality(criterion, desk):
    start = time.perf_counter()
    train, test = desk[0]
    settings = ex.resolve_settings("robustness", flags={"rounds": 20, "budget_cutoffs": None})
    part = ex.make_partition(train, settings)
    result = sim.run_simulation(ex.build_run_config(settings, part), part, test)
    acc = result.final_metrics.accuracy
    elapsed = time.perf_counter() - start
    criterion(6, acc >= 0.90 and len(result.timeline) - 1 <= 30 and elapsed < 600,
              f"synthetic data, K=10 semi-async, {len(result.timeline) - 1} aggregations, threshold-rule test accuracy "
              f"{acc:.4f} (>= 0.90), f1 {result.final_metrics.f1:.4f}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 7

def test_criterion_7_determinism(criterion, tmp_path):
    assert cli.main(["synth-data", "--out", str(tmp_path / "raw"), "--rows", "400", "--seed", "5"]) == 0
    assert cli.main(["preprocess", "--input", str(tmp_path / "raw"), "--out", str(tmp_path / "proc"), "--components", "20"]) == 0
    common = ["--data", str(tmp_path / "proc"), "--seed", "7", "--preset", "robustness", "--widths", "20,12,6", "--rounds", "4"]
    runs = {
        "simulate": ["simulate", *common, "--straggler-fraction", "0.3"],
        "sweep": ["sweep", *common, "--affected", "0,2", "--seeds", "7,8"],
    }
    compared, mismatched = 0, []
    for name, argv in runs.items():
        for rep in ("a", "b"):
            assert cli.main([*argv, "--out", str(tmp_path / f"{name}_{rep}")]) == 0
        for f in sorted((tmp_path / f"{name}_a").iterdir()):
            compared += 1
            if f.read_bytes() != (tmp_path / f"{name}_b" / f.name).read_bytes():
                mismatched.append(f"{name}/{f.name}")
    criterion(7, compared > 0 and not mismatched,
              f"{compared} output files from repeated simulate and sweep runs, mismatches: {mismatched or 'none'}")


# ---------------------------------------------------------------- 8

def test_criterion_8_metric_identities(criterion):
    failures = 0
    cases = 0
    for tp, fp, tn, fn in itertools.product(range(6), repeat=4):
        total = tp + fp + tn + fn
        if total == 0:
            continue
        cases += 1
        pred = np.array([1] * (tp + fp) + [0] * (tn + fn))
        truth = np.array([1] * tp + [0] * fp + [0] * tn + [1] * fn)
        m = compute_metrics(pred, truth)
        checks = [
            (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn),
            m.accuracy == (tp + tn) / total,
            m.precision == (tp / (tp + fp) if tp + fp else 0.0),
            m.recall == (tp / (tp + fn) if tp + fn else 0.0),
            m.f1 == (2 * tp / (2 * tp + fp + fn) if tp else 0.0),
            abs(m.f1 - (2 * m.precision * m.recall / (m.precision + m.recall) if m.precision + m.recall else 0.0)) <= 1e-15,
        ]
        failures += not all(checks)
    criterion(8, failures == 0, f"{cases} confusion-count combinations over 0..5, {failures} identity failures")
