"""Acceptance checks, one test per criterion, each with its runtime budget."""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from tube_platoon.cli import EXIT_OK, cmd_run
from tube_platoon.dynamics import ModelMatrices
from tube_platoon.feedforward import FeedforwardWeights, predicted_exogenous, solve_plan
from tube_platoon.hdv import HdvNoise, estimate_bound_for_theta, measure_theta_for_bound
from tube_platoon.lqr import LqrWeights, synthesize_gain
from tube_platoon.sets import Box2, HPolytope2, Interval, compute_mrpi, contains, partial_sum, unit_directions
from tube_platoon.sim import PlatoonSpec, ScenarioConfig, penetration_sweep, run_scenario, sweep_lambda

M = ModelMatrices(0.5, 0.5)
DIRS = unit_directions(64)
EPS = 1e-3


@contextmanager
def budget(seconds):
    t0 = time.perf_counter()
    yield
    elapsed = time.perf_counter() - t0
    assert elapsed < seconds, f"took {elapsed:.1f} s, budget {seconds} s"


def quiet_after_plan(cfg):
    """Rerun ``cfg`` with HDV noise switched off once the CAV plans end and
    100 further steps simulated."""
    first = run_scenario(cfg)
    end = max(first.plan_end)
    return run_scenario(cfg.with_(noise_steps=end, steps=end + 100)), end


def decays(errors, start, tol=1e-3):
    """True if ``max |e|`` drops below ``tol`` at some step in ``[start, start + 100]``
    and stays below for the rest of the run."""
    norm = np.max(np.abs(errors), axis=1)
    for k in range(start, min(start + 101, len(norm))):
        if np.all(norm[k:] < tol):
            return True
    return False


def test_criterion_01_gain_regression():
    with budget(1):
        g = synthesize_gain(M, LqrWeights(1, 1, 1))
    assert g.k == pytest.approx([0.6406, 1.0192], abs=1e-3)


def test_criterion_02_mrpi_correctness():
    with budget(5):
        g = synthesize_gain(M)
        w = Box2.square(0.2)
        f = compute_mrpi(g.a_k, w)
        rng = np.random.default_rng(2024)
        gens = f.generators
        violations = 0
        for _ in range(1000):
            x = f.center + rng.uniform(-1, 1, len(gens)) @ gens
            d = rng.uniform(-0.2, 0.2, 2)
            violations += not contains(f, g.a_k @ x + d, EPS)
        brute = partial_sum(g.a_k, w, 100).support_many(DIRS)
        outer = f.support_many(DIRS)
    assert violations == 0
    assert np.all(brute <= outer + EPS)


def test_criterion_03_mrpi_nesting():
    with budget(5):
        g = synthesize_gain(M)
        h = [compute_mrpi(g.a_k, Box2.square(w)).support_many(DIRS) for w in (0.1, 0.2, 0.3)]
    assert np.all(h[0] < h[1]) and np.all(h[1] < h[2])


def test_criterion_04_tube_containment():
    violations = 0
    with budget(30):
        for sd in range(100):
            r = run_scenario(ScenarioConfig(seed=sd, noise=HdvNoise(seed=sd), clip_to_bound=True))
            assert r.steps == 150
            violations += int(np.sum(~r.in_tube))
    assert violations == 0


def test_criterion_05_trigger_economy():
    with budget(120):
        base = run_scenario(ScenarioConfig(baseline="per_step"))
        tube_counts = [
            run_scenario(ScenarioConfig(seed=sd, noise=HdvNoise(seed=sd), clip_to_bound=True)).triggers[0]["ff_triggers"]
            for sd in range(100)
        ]
        rows = sweep_lambda(ScenarioConfig(), [2.5, 5.0, 7.5, 10.0], range(50))
    assert base.triggers[0]["ff_triggers"] == 150
    assert max(tube_counts) <= 5
    means = [r["mean_triggers"] for r in rows]
    assert all(r["infeasible"] == 0 for r in rows)
    assert all(b <= a for a, b in zip(means, means[1:])), means


def test_criterion_06_stability_and_string_stability():
    with budget(30):
        r, end = quiet_after_plan(ScenarioConfig())
    assert decays(r.errors[:, 0], end)
    jump = abs(ScenarioConfig().disturbance.speed_jump)
    assert r.metrics.max_speed_dev[r.cav_index[0]] <= 1.0 * jump
    assert r.metrics.string_stable == [True]


def full_space_kkt(e0, d, n, weights, m):
    ne, nu = 2 * (n - 1), n - 1
    nv = ne + nu
    h = np.zeros((nv, nv))
    qbar = weights.g.T @ weights.g
    for j in range(n - 1):
        h[2 * j:2 * j + 2, 2 * j:2 * j + 2] = 2 * qbar
    h[ne:, ne:] = 2 * weights.f_w**2 * np.eye(nu)
    rows, rhs = [], []
    for j in range(n - 1):
        row = np.zeros((2, nv))
        row[:, 2 * j:2 * j + 2] = np.eye(2)
        if j > 0:
            row[:, 2 * (j - 1):2 * j] = -m.a
        row[:, ne + j] = -m.cb
        rows.append(row)
        rhs.append(d[j] + (m.a @ e0 if j == 0 else 0))
    term = np.zeros((2, nv))
    term[:, ne - 2:ne] = np.eye(2)
    a = np.vstack(rows + [term])
    b = np.concatenate(rhs + [np.zeros(2)])
    kkt = np.block([[h, a.T], [a, np.zeros((len(a), len(a)))]])
    sol = np.linalg.lstsq(kkt, np.concatenate([np.zeros(nv), b]), rcond=None)[0]
    return np.vstack([e0, sol[:ne].reshape(-1, 2)]), np.append(sol[ne:nv], 0.0)


def test_criterion_07_qp_oracle_equivalence():
    rng = np.random.default_rng(7)
    wide_e = HPolytope2.box((-1e3, -1e3), (1e3, 1e3))
    wide_u = Interval(-100.0, 100.0)
    w = FeedforwardWeights()
    worst_u = worst_e = 0.0
    with budget(10):
        for _ in range(50):
            e0 = rng.normal(scale=0.5, size=2)
            pred = np.column_stack([10.0 * np.arange(4), np.full(4, 20.0)]) + rng.normal(scale=0.05, size=(4, 2))
            plan = solve_plan(e0, pred, wide_e, wide_u, w, 3, M)
            e, u = full_space_kkt(e0, predicted_exogenous(pred, M), 3, w, M)
            worst_u = max(worst_u, np.max(np.abs(plan.u_bar - u)))
            worst_e = max(worst_e, np.max(np.abs(plan.e_bar - e)))
    assert worst_u <= 1e-6 and worst_e <= 1e-6


def test_criterion_08_bound_self_consistency():
    with budget(60):
        est = estimate_bound_for_theta(3, HdvNoise(seed=101), 0.7, 2000, M)
        fresh = measure_theta_for_bound(3, HdvNoise(seed=202), est.bound, 2000, M)
        widths = [estimate_bound_for_theta(n, HdvNoise(), 0.7, 1000, M).bound.half_widths for n in range(1, 11)]
        theta_02 = measure_theta_for_bound(3, HdvNoise(seed=303), Box2.square(0.2), 2000, M)
    assert est.samples == 100_000
    assert abs(fresh - 0.7) <= 0.02
    for a, b in zip(widths, widths[1:]):
        assert b[0] >= a[0] and b[1] >= a[1]
    assert 0.3 < theta_02 < 0.99


def test_criterion_09_penetration_trend():
    with budget(180):
        table = penetration_sweep(100, [0.1, 0.2, 0.5, 1.0], 0.7, ScenarioConfig())
    med = [np.median([b.half_widths for b in table[r]], axis=0) for r in (0.1, 0.2, 0.5, 1.0)]
    for a, b in zip(med, med[1:]):
        assert np.all(b < a)
    assert np.all(med[-1] == 0)


def test_criterion_10_p2_scalability():
    with budget(60):
        r, end = quiet_after_plan(ScenarioConfig(platoon=PlatoonSpec("P2")))
    jump = abs(ScenarioConfig().disturbance.speed_jump)
    dev = [r.metrics.max_speed_dev[i] for i in r.cav_index]
    for c in range(2):
        assert decays(r.errors[:, c], end)
        assert dev[c] <= jump
    assert r.metrics.string_stable == [True, True]
    assert dev[1] <= dev[0]


def test_criterion_11_determinism(tmp_path):
    for d in ("a", "b"):
        assert cmd_run(None, str(tmp_path / d), seed=42) == EXIT_OK
    assert (tmp_path / "a" / "run.csv").read_bytes() == (tmp_path / "b" / "run.csv").read_bytes()
