import json

import numpy as np
import pytest

from soltype.boxpath import half_spaces, is_hsv, rho
from soltype.group_model import GroupElement
from soltype.harness import estimate_distance, sample_pairs
from soltype.hsv_pipeline import (CertificationFailure, _Frame,
                                  compute_constants, conditions_hold, constants_with_r,
                                  double_factorial, make_hsv, replay, replays_identically,
                                  retention, slice_curve)
from soltype.splitting_metric import PiecewisePath, path_length


def line_input(group, base, top=12.0):
    """Base polyline with the first nil coordinate moving linearly to ``e^top``."""
    base = np.asarray(base, dtype=float)
    k = len(base)
    h = np.concatenate([[0.0], np.linspace(0.0, np.exp(top), k - 2), [np.exp(top)]])
    pts = np.column_stack([h, np.zeros(k), base])
    q = GroupElement([np.array([np.exp(top)]), np.zeros(1)], base[-1])
    return PiecewisePath(pts, group), group.identity(), q


def zigzag():
    return [[0, 0], [9, 0]] + [[9, 100 * (-1) ** j] for j in range(31)] + [[9, 0], [0, 0]]


def dips():
    pts = [[0, 0]]
    for _ in range(60):
        pts += [[9, 0], [9, 60], [9, 0], [-20, 0]]
    return pts + [[0, 0]]


def test_double_factorials_and_retention():
    assert [double_factorial(m) for m in range(7)] == [1, 1, 2, 3, 8, 15, 48]
    assert retention(1) == 1.0
    assert retention(2) == 0.5
    assert retention(3) == pytest.approx(3 / 8)
    assert retention(4) == pytest.approx(15 / 48)


def test_constants_for_two_hyperbolic_factors(rank2):
    g, m = rank2
    c = compute_constants(g, m)
    assert c.a == pytest.approx(np.e)
    assert c.epsilon == 0.5 and c.N == 2.0
    assert c.a * (1 - c.epsilon) > 1
    assert c.r == 16.0 and c.K == 99.0 and c.L1 == pytest.approx(1.0)
    # the doubling search returns the first radius that works
    assert not conditions_hold(c.r / 2, c.C, c.a, c.epsilon, c.N, c.L1, c.n)
    assert conditions_hold(c.r, c.C, c.a, c.epsilon, c.N, c.L1, c.n)


def test_condition_one_numerically(rank2):
    g, m = rank2
    c = compute_constants(g, m)
    lhs = c.C * c.a ** c.r / c.N * retention(c.n)
    assert lhs >= np.sqrt(2) * c.n * (2 * c.r + 1)


def test_jump_constant_formula(rank2):
    g, m = rank2
    c = compute_constants(g, m)
    four = constants_with_r(c.__class__(**{**c.__dict__, "n": 4}), 8.0)
    assert four.K == 85.0


def test_slice_mass_is_scaled_nil_travel(rank2):
    g, m = rank2
    c = constants_with_r(compute_constants(g, m), 1.0)
    gamma, p, q = line_input(g, [[0, 0], [0, 0.5], [0, -4.0], [0, 0.0]])
    frame = _Frame(gamma, p, g, m, False)
    hs = half_spaces(p, q, g, m)
    sl = slice_curve(frame, hs, c, 0)
    assert sl.radius == pytest.approx(12.0)
    assert sl.index == 1
    # the single slice holds the whole nil displacement, scaled by e^{-H}
    assert sl.masses[0] == pytest.approx(np.exp(12.0) * np.exp(-12.0))


def test_deep_slice_is_found(rank2):
    g, m = rank2
    c = constants_with_r(compute_constants(g, m), 1.0)
    top = np.exp(12.0)
    pts = np.array([[0, 0, 0, 0], [0, 0, 0.5, 0], [0, 0, -30.0, 0], [top, 0, -30.0, 0],
                    [top, 0, 0, 0]])
    p, q = g.identity(), GroupElement([[top], [0.0]], [0.0, 0.0])
    frame = _Frame(PiecewisePath(pts, g), p, g, m, False)
    sl = slice_curve(frame, half_spaces(p, q, g, m), c, 0)
    # radius 11.5; the nil motion sits in the band [12 - 4 * 11.5, 12 - 3 * 11.5]
    assert sl.radius == pytest.approx(11.5)
    assert sl.index == 3
    assert sl.masses[:2] == (0.0, 0.0)
    assert sl.masses[2] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        slice_curve(frame, half_spaces(p, q, g, m), constants_with_r(c, 20.0), 0)


def check_output(box, trail, gamma, p, q, g, m, c, split=False):
    hs = half_spaces(p, q, g, m)
    assert bool(is_hsv(box, hs))
    start, end = box.path.element(0), box.path.element(len(box.path) - 1)
    ps, qs = m.to_split(p), m.to_split(q)
    np.testing.assert_allclose(start.base, ps.base, atol=1e-9)
    np.testing.assert_allclose(end.base, qs.base, atol=1e-9)
    assert box.length <= path_length(gamma, m, rtol=1e-6, split=split) + c.K + 1e-6
    assert replays_identically(trail)
    for step in trail["steps"]:
        n = c.n
        for i, count in enumerate(step["survivors"], start=1):
            assert count >= 2 * (n - i)


def test_spec_straight_segment(rank2):
    g, m = rank2
    c = compute_constants(g, m)
    gamma, p, q = line_input(g, [[0, 0], [5, 5]])
    q = GroupElement([[np.exp(12.0)], [np.exp(12.0)]], [5.0, 5.0])
    pts = np.array(gamma.points)
    pts[-1, 1] = np.exp(12.0)
    gamma = PiecewisePath(pts, g)
    box, trail = make_hsv(gamma, p, q, g, m, c)
    check_output(box, trail, gamma, p, q, g, m, c)
    assert trail["active"] == []
    assert len(trail["loops"]) == 2
    length, _ = rho(p, q, g, m)
    assert length <= box.length + 1e-9


@pytest.mark.parametrize("shape, kind", [(zigzag, "tent"), (dips, "reflection")])
def test_surgery_constructions(rank2, shape, kind):
    g, m = rank2
    c = constants_with_r(compute_constants(g, m), 1.0)
    gamma, p, q = line_input(g, shape())
    box, trail = make_hsv(gamma, p, q, g, m, c)
    assert [s["kind"] for s in trail["steps"]] == [kind]
    check_output(box, trail, gamma, p, q, g, m, c)


def test_short_straight_input_fails_certification(rank2):
    g, m = rank2
    c = constants_with_r(compute_constants(g, m), 1.0)
    gamma, p, q = line_input(g, [[0, 0], [5, 5]])
    with pytest.raises(CertificationFailure) as err:
        make_hsv(gamma, p, q, g, m, c)
    assert "perpendicular arclength" in err.value.inequality
    assert err.value.measured < err.value.required


def test_endpoint_mismatch_is_rejected(rank2):
    g, m = rank2
    c = compute_constants(g, m)
    gamma, p, _ = line_input(g, [[0, 0], [5, 5]])
    with pytest.raises(CertificationFailure):
        make_hsv(gamma, p, GroupElement([[0.0], [0.0]], [1.0, 1.0]), g, m, c)


def test_estimated_geodesics_certify(example):
    g, m = example
    c = compute_constants(g, m)
    for _, p, q in sample_pairs(g, m, [6.0], 3, seed=3):
        est = estimate_distance(p, q, g, m, budget=2)
        box, trail = make_hsv(est.path, p, q, g, m, c, split=True)
        check_output(box, trail, est.path, p, q, g, m, c, split=True)


def test_tampered_trail_does_not_replay(rank2):
    g, m = rank2
    c = constants_with_r(compute_constants(g, m), 1.0)
    gamma, p, q = line_input(g, zigzag())
    _, trail = make_hsv(gamma, p, q, g, m, c)
    bad = json.loads(json.dumps(trail))
    bad["picks"][0]["values"][1][1] += 1e-3
    _, same = replay(bad)
    assert not same
