import json

import numpy as np
import pytest

from tube_platoon.controller import HardInfeasibilityError, StringStabilitySpec
from tube_platoon.dynamics import ModelMatrices, VehicleState
from tube_platoon.hdv import HdvNoise
from tube_platoon.sim import (
    THREADS_ENV,
    ConfigError,
    DisturbanceSpec,
    PlatoonSpec,
    ScenarioConfig,
    generate_disturbances,
    penetration_sweep,
    plan_leader,
    run_many,
    run_scenario,
    string_stability_report,
    worker_count,
)

M = ModelMatrices()
QUIET = HdvNoise(0.0, 0.0)


def poisson(lam, seed=0, steps=150):
    return ScenarioConfig(steps=steps, seed=seed, disturbance=DisturbanceSpec("poisson", lam=lam))


def test_single_disturbance():
    assert generate_disturbances(ScenarioConfig()) == [(0, -5.0)]


def test_poisson_mean_count():
    # events with ceil(t / tau) < 150, i.e. arrival time t <= 74.5 s
    counts = [len(generate_disturbances(poisson(10.0, sd))) for sd in range(1000)]
    assert np.mean(counts) == pytest.approx(7.45, rel=0.05)


def test_poisson_deterministic_and_in_range():
    a = generate_disturbances(poisson(5.0, 3))
    assert a == generate_disturbances(poisson(5.0, 3))
    assert all(0 < k < 150 and -5 <= j <= 5 for k, j in a)
    assert [k for k, _ in a] == sorted(k for k, _ in a)


def test_poisson_count_ordering_in_lambda():
    means = [np.mean([len(generate_disturbances(poisson(lam, sd))) for sd in range(300)])
             for lam in (2.5, 5, 7.5, 10)]
    assert means[0] > means[1] > means[2] > means[3]


def test_leader_zero_jump():
    lp = plan_leader(VehicleState(0.0, 20.0), 0.0, 20, M)
    assert np.allclose(lp.accel, 0) and np.allclose(lp.states[:, 1], 20.0)


def test_leader_recovers_from_jump():
    lp = plan_leader(VehicleState(0.0, 20.0), -5.0, 50, M)
    assert lp.states[0, 1] == pytest.approx(15.0)
    assert lp.states[-1, 1] == pytest.approx(20.0, abs=1e-8)
    assert np.all(np.abs(lp.accel) <= 5.0 + 1e-9)
    # the recorded states follow the vehicle model under the planned inputs
    for j in range(50):
        assert lp.states[j + 1] == pytest.approx(M.a @ lp.states[j] + M.b * lp.accel[j])


def test_leader_infeasible_jump():
    with pytest.raises(HardInfeasibilityError):
        plan_leader(VehicleState(0.0, 20.0), -300.0, 5, M)


def test_quiet_run_is_constant():
    r = run_scenario(ScenarioConfig(disturbance=DisturbanceSpec(speed_jump=0.0), noise=QUIET))
    assert np.allclose(r.v, 20.0)
    assert r.triggers[0]["ff_triggers"] == 0
    assert r.metrics.stable == [True] and r.metrics.string_stable == [True]
    assert r.metrics.max_speed_dev == pytest.approx([0.0] * len(r.labels))


def test_scenario_one_shapes_and_metrics():
    r = run_scenario(ScenarioConfig())
    assert r.labels == ["lead", "h1_1", "h1_2", "h1_3", "h1_4", "h1_5", "cav1"]
    assert r.s.shape == (151, 7) and r.u.shape == (150, 7) and r.errors.shape == (150, 1, 2)
    assert r.v[0, 0] == pytest.approx(15.0)
    assert r.metrics.max_speed_dev[-1] < r.metrics.max_speed_dev[0]
    assert all(x >= 0 for x in r.metrics.amplification_ratios)
    # the leader's state column obeys the vehicle model
    x = np.column_stack([r.s[:, 0], r.v[:, 0]])
    for k in range(150):
        assert x[k + 1] == pytest.approx(M.a @ x[k] + M.b * r.u[k, 0])


def test_errors_respect_constraints_inside_tube():
    for sd in range(5):
        r = run_scenario(ScenarioConfig(seed=sd, noise=HdvNoise(seed=sd), clip_to_bound=True))
        d = ScenarioConfig().controller.constraints.string_stability.half_width(r.leader_spacing)
        assert r.in_tube.all()
        assert np.all(np.abs(r.errors[:, 0, 0]) <= d + 1e-8)


def test_baseline_triggers_every_step():
    r = run_scenario(ScenarioConfig(baseline="per_step"))
    assert r.triggers[0]["ff_triggers"] == 150


def test_feedback_off_breaks_string_stability():
    r = run_scenario(ScenarioConfig(noise=QUIET, cav_control=False))
    assert r.metrics.string_stable == [False]
    on = run_scenario(ScenarioConfig(noise=QUIET))
    assert r.metrics.max_spacing_error[0] > on.metrics.max_spacing_error[0]


def test_p2_first_cav_matches_p1():
    p1 = run_scenario(ScenarioConfig(platoon=PlatoonSpec("P1", n=3), seed=4, noise=HdvNoise(seed=4)))
    p2 = run_scenario(ScenarioConfig(platoon=PlatoonSpec("P2", n1=3, n2=3), seed=4, noise=HdvNoise(seed=4)))
    a, b = p1.v[:, p1.cav_index[0]], p2.v[:, p2.cav_index[0]]
    assert np.max(np.abs(a - b)) <= 1e-9
    assert len(p2.cav_index) == 2


def test_seeded_runs_identical():
    a = run_scenario(ScenarioConfig(seed=7, noise=HdvNoise(seed=7)))
    b = run_scenario(ScenarioConfig(seed=7, noise=HdvNoise(seed=7)))
    assert a.to_csv() == b.to_csv()


def test_run_many_matches_serial():
    cfgs = [ScenarioConfig(seed=s, noise=HdvNoise(seed=s), steps=30) for s in range(2)]
    serial = run_many(cfgs, threads=1)
    parallel = run_many(cfgs, threads=2)
    assert [r.to_csv() for r in serial] == [r.to_csv() for r in parallel]


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert worker_count() == 3
    monkeypatch.setenv(THREADS_ENV, "bad")
    assert worker_count() == 1


def test_report_l2_variant():
    r = run_scenario(ScenarioConfig(noise=QUIET))
    rep = string_stability_report(r, StringStabilitySpec(norm="L2"))
    assert rep.amplification_ratios[0] == pytest.approx(rep.l2_speed_dev[-1] / rep.l2_speed_dev[0])


def test_chain_segments():
    assert PlatoonSpec("chain", length=100, penetration=0.1).segments() == [9] * 10
    assert PlatoonSpec("chain", length=100, penetration=1.0).segments() == [0] * 100
    assert PlatoonSpec("P2", n1=2, n2=4).segments() == [2, 4]


def test_penetration_full_rate_zero_bound():
    out = penetration_sweep(10, [1.0], 0.7, ScenarioConfig())
    assert len(out[1.0]) == 10 and all(b.is_zero for b in out[1.0])


def test_config_roundtrip():
    cfg = ScenarioConfig(seed=3, noise=HdvNoise(seed=3), platoon=PlatoonSpec("P2"),
                         disturbance=DisturbanceSpec("poisson", lam=5.0))
    back = ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()


@pytest.mark.parametrize(
    "data, field",
    [
        ({"steps": 0}, "steps"),
        ({"platoon": {"kind": "P3"}}, "platoon.kind"),
        ({"platoon": {"bogus": 1}}, "platoon.bogus"),
        ({"disturbance": {"lambda": -1}}, "disturbance.lambda"),
        ({"controller": {"theta_init": "x"}}, "controller.theta_init"),
        ({"uncertainty": {"runs": 10}}, "uncertainty.runs"),
        ({"equilibrium_speed": 80}, "equilibrium_speed"),
        ({"extra": True}, "extra"),
    ],
)
def test_config_errors_name_the_field(data, field):
    with pytest.raises(ConfigError) as err:
        ScenarioConfig.from_dict(data)
    assert err.value.field == field


def test_invalid_json():
    with pytest.raises(ConfigError):
        ScenarioConfig.from_json("{not json")
