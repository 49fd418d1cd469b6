import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from tube_platoon.dynamics import ModelMatrices
from tube_platoon.lqr import synthesize_gain
from tube_platoon.sets import (
    Box2,
    EmptySetError,
    HPolytope2,
    Interval,
    MrpiError,
    MrpiParams,
    Zonotope2,
    compute_mrpi,
    contains,
    interval_pontryagin_diff,
    is_rpi,
    linear_image,
    minkowski_sum,
    mrpi_result,
    partial_sum,
    pontryagin_diff,
    support,
    unit_directions,
)

UNIT = Zonotope2(np.zeros(2), np.eye(2))
DIRS = unit_directions(64)


def square(r):
    return HPolytope2.box((-r, -r), (r, r))


def hull_contains(points, x, tol=1e-9):
    """Independent membership oracle: convex hull of enumerated zonotope corners."""
    hull = ConvexHull(points)
    return bool(np.all(hull.equations[:, :2] @ x + hull.equations[:, 2] <= tol))


def corners(z):
    g = z.generators
    signs = np.array(np.meshgrid(*[[-1, 1]] * len(g))).reshape(len(g), -1).T
    return z.center + signs @ g


def test_support_examples():
    assert support(UNIT, (1, 0)) == pytest.approx(1)
    assert support(UNIT, (1, 1)) == pytest.approx(2)
    assert support(Zonotope2(np.zeros(2), [[1, 0], [1, 1]]), (0, 1)) == pytest.approx(1)


def test_support_rejects_zero_direction():
    with pytest.raises(ValueError):
        support(UNIT, (0, 0))


def test_minkowski_examples():
    assert np.allclose(minkowski_sum(UNIT, Zonotope2.point()).support_many(DIRS), UNIT.support_many(DIRS))
    s = minkowski_sum(Box2.square(0.1).to_zonotope(), Box2.square(0.2).to_zonotope())
    assert np.allclose(s.support_many(DIRS), Box2.square(0.3).to_zonotope().support_many(DIRS))
    sq = minkowski_sum(Zonotope2(np.zeros(2), [[1, 0]]), Zonotope2(np.zeros(2), [[0, 1]]))
    assert np.allclose(sorted(map(tuple, sq.vertices())), sorted([(-1, -1), (1, -1), (1, 1), (-1, 1)]))


def test_linear_image_examples():
    assert np.allclose(linear_image(np.eye(2), UNIT).support_many(DIRS), UNIT.support_many(DIRS))
    assert np.allclose(linear_image(np.zeros((2, 2)), UNIT).support_many(DIRS), 0)
    rot = np.array([[0, -1], [1, 0]])
    d8 = unit_directions(8)
    assert np.allclose(linear_image(rot, UNIT).support_many(d8), UNIT.support_many(d8))


def test_pontryagin_examples():
    p = square(1)
    same = pontryagin_diff(p, Zonotope2.point())
    assert np.allclose(same.offsets, p.offsets)
    shrunk = pontryagin_diff(p, Box2.square(0.2).to_zonotope())
    assert np.allclose(shrunk.vertices().max(axis=0), [0.8, 0.8])
    assert pontryagin_diff(p, Box2.square(1.5).to_zonotope()).empty


def test_pontryagin_of_empty_raises():
    with pytest.raises(EmptySetError):
        pontryagin_diff(HPolytope2(np.eye(2), np.zeros(2), empty=True), UNIT)


def test_contains_examples():
    box = Box2.square(1.0).to_zonotope()
    assert contains(box, (0, 0))
    assert contains(box, (0.9, 0))
    assert not contains(box, (1.1, 0))


def test_contains_matches_hull_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        z = Zonotope2(rng.normal(size=2), rng.normal(size=(rng.integers(2, 6), 2)))
        pts = corners(z)
        for x in z.center + rng.normal(size=(20, 2)) * 2:
            # skip points too close to the boundary for a fair comparison
            hull = ConvexHull(pts)
            dist = np.max(hull.equations[:, :2] @ x + hull.equations[:, 2])
            if abs(dist) < 1e-6:
                continue
            assert contains(z, x, 0.0) == hull_contains(pts, x)


def test_interval_pontryagin():
    k = np.array([0.5, 1.0])
    u = interval_pontryagin_diff(Interval(-5, 5), k, Box2.square(1).to_zonotope())
    assert (u.lo, u.hi) == pytest.approx((-3.5, 3.5))
    assert Interval(1, 0).empty


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.floats(0, 2 * np.pi))
def test_support_additive(g1, g2, ang):
    z1 = Zonotope2(np.zeros(2), np.reshape(g1, (2, 2)))
    z2 = Zonotope2(np.ones(2), np.reshape(g2, (2, 2)))
    a = np.array([np.cos(ang), np.sin(ang)])
    assert support(minkowski_sum(z1, z2), a) == pytest.approx(support(z1, a) + support(z2, a), abs=1e-9)


def test_pontryagin_minkowski_inclusion():
    rng = np.random.default_rng(5)
    p = HPolytope2.from_rows([((1, 0), 2), ((-1, 0), 2), ((0, 1), 1.5), ((0, -1), 1.5), ((1, 1), 2.5)])
    z = Zonotope2(np.zeros(2), [[0.3, 0.1], [0.0, 0.2]])
    inner = pontryagin_diff(p, z)
    verts = inner.vertices()
    zc = corners(z)
    for _ in range(300):
        w = rng.dirichlet(np.ones(len(verts)))
        x = w @ verts + zc[rng.integers(len(zc))] * rng.uniform()
        assert p.contains(x, tol=1e-9)


GAIN = synthesize_gain(ModelMatrices())


def test_mrpi_deadbeat():
    w = Box2.square(0.2)
    f = compute_mrpi(np.zeros((2, 2)), w)
    assert np.allclose(f.support_many(DIRS), w.to_zonotope().support_many(DIRS), atol=1e-3)


def test_mrpi_diagonal_geometric():
    f = compute_mrpi(0.5 * np.eye(2), Box2.square(1.0))
    exact = Box2.square(2.0).to_zonotope().support_many(DIRS)
    got = f.support_many(DIRS)
    assert np.all(got >= exact - 1e-9)
    assert np.all(got <= exact + 1e-3 * np.abs(DIRS).sum(axis=1) + 1e-12)


def test_mrpi_contains_brute_force():
    w = Box2.square(0.2)
    params = MrpiParams(epsilon=1e-3)
    f = compute_mrpi(GAIN.a_k, w, params)
    brute = partial_sum(GAIN.a_k, w, 100)
    assert np.all(brute.support_many(DIRS) <= f.support_many(DIRS) + params.epsilon)
    # and the outer approximation is tight
    assert np.all(f.support_many(DIRS) - brute.support_many(DIRS) <= 2 * params.epsilon)


def test_mrpi_rpi_sampled():
    rng = np.random.default_rng(7)
    w = Box2.square(0.2)
    f = compute_mrpi(GAIN.a_k, w)
    assert is_rpi(GAIN.a_k, w, f, 1e-3)
    g = f.generators
    for _ in range(1000):
        x = f.center + rng.uniform(-1, 1, len(g)) @ g
        d = rng.uniform(-0.2, 0.2, 2)
        assert contains(f, GAIN.a_k @ x + d, 1e-3)


def test_mrpi_monotone_and_nested_partial_sums():
    small = compute_mrpi(GAIN.a_k, Box2((0.1, 0.2)))
    big = compute_mrpi(GAIN.a_k, Box2((0.15, 0.2)))
    assert np.all(big.support_many(DIRS) >= small.support_many(DIRS) - 1e-12)
    res = mrpi_result(GAIN.a_k, Box2.square(0.2))
    prev = np.zeros(len(DIRS))
    for s in range(1, res.s + 1):
        cur = partial_sum(GAIN.a_k, Box2.square(0.2), s).support_many(DIRS)
        assert np.all(cur >= prev - 1e-12)
        prev = cur
    assert np.all(res.tube.support_many(DIRS) >= prev - 1e-12)


def test_mrpi_errors():
    with pytest.raises(MrpiError):
        compute_mrpi(np.eye(2), Box2.square(0.1))
    with pytest.raises(MrpiError):
        compute_mrpi(0.999 * np.eye(2), Box2.square(1.0), MrpiParams(epsilon=1e-6, s_max=8))


def test_zero_box_gives_origin():
    f = compute_mrpi(GAIN.a_k, Box2((0.0, 0.0)))
    assert f.vertices().tolist() == [[0.0, 0.0]]


def test_vertices_json_dump():
    pts = json.loads(Box2.square(1).to_zonotope().to_json())
    assert len(pts) == 4


def test_box_validation():
    with pytest.raises(ValueError):
        Box2((-1.0, 1.0))
    with pytest.raises(ValueError):
        HPolytope2.from_rows([((0, 0), 1), ((1, 0), 1), ((0, 1), 1)])


def test_axis_box_emptiness_agrees_with_lp():
    rng = np.random.default_rng(11)
    for _ in range(200):
        lo = rng.uniform(-1, 1, 2)
        hi = lo + rng.uniform(-0.5, 1, 2)
        p = HPolytope2.box(lo, hi)
        _, r = p.chebyshev()
        assert p.is_empty() == (r < -1e-12)
