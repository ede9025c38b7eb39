import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soltype.group_model import GroupElement, multiply
from soltype.splitting_metric import (NotASubalgebra, NotPositiveDefinite, PiecewisePath,
                                      SplitMetric, block_metric, change_of_metric,
                                      delta_distance, heintze_quotient, path_length,
                                      projection_lipschitz)

from conftest import hyperbolic_distance


def spd(rng, k):
    A = rng.normal(size=(k, k))
    return A @ A.T + 0.5 * np.eye(k)


def root_aligned_gram(group, rng, base=None):
    """Gram whose complement of the nilradical is the graph of a root-aligned map."""
    nd, k = group.nil_dim, group.rank
    M = np.zeros((nd, k))
    for i, f in enumerate(group.factors):
        M[group.block(i)] = np.outer(rng.normal(size=f.dim), group.roots[i])
    E = np.eye(group.dim)
    E[:nd, nd:] = M
    Einv = np.linalg.inv(E)
    G0 = np.eye(group.dim)
    if base is not None:
        G0[nd:, nd:] = base
    return Einv.T @ G0 @ Einv


def bracket_residual(group, gram):
    """Brute-force closure check of the orthogonal complement of the nilradical."""
    nd, k = group.nil_dim, group.rank
    basis = []
    for a in range(k):
        x = np.zeros(group.dim)
        x[nd + a] = 1.0
        rhs = -gram[:nd, nd + a]
        x[:nd] = np.linalg.solve(gram[:nd, :nd], rhs)
        basis.append(x)
    worst = 0.0
    for a in range(k):
        for b in range(a + 1, k):
            X, Y = basis[a], basis[b]
            # [X, Y] restricted to the nilradical: [v_X, n_Y] - [v_Y, n_X] + [n_X, n_Y]
            out = []
            for i, f in enumerate(group.factors):
                blk = group.block(i)
                ax, ay = group.roots[i] @ X[nd:], group.roots[i] @ Y[nd:]
                out.append(ax * f.derivation @ Y[blk] - ay * f.derivation @ X[blk]
                           + f.bracket(X[blk], Y[blk]))
            worst = max(worst, float(np.linalg.norm(np.concatenate(out))))
    return worst


def test_block_metric_is_split(example):
    g, m = example
    assert m.split_flag
    assert m.to_split(g.identity()) == g.identity()


def test_random_grams_split_exactly_when_brackets_close(example):
    g, _ = example
    rng = np.random.default_rng(0)
    outcomes = set()
    for j in range(50):
        G = spd(rng, g.dim) if j % 2 else root_aligned_gram(g, rng, base=spd(rng, 2))
        closes = bracket_residual(g, G) < 1e-9
        try:
            SplitMetric(g, G)
            splits = True
        except NotASubalgebra:
            splits = False
        assert splits == closes
        outcomes.add(splits)
    assert outcomes == {True, False}


def test_root_aligned_gram_splits_and_conjugates(example):
    g, _ = example
    rng = np.random.default_rng(1)
    G = root_aligned_gram(g, rng, base=spd(rng, 2))
    assert bracket_residual(g, G) < 1e-9
    m = SplitMetric(g, G)
    assert not m.split_flag
    nd = g.nil_dim
    np.testing.assert_allclose(m.adapted[:nd, nd:], 0.0, atol=1e-12)
    x = GroupElement([rng.normal(size=1) for _ in range(4)], rng.normal(size=2))
    np.testing.assert_allclose(m.from_split(m.to_split(x)).flat(), x.flat(), atol=1e-10)


def test_heisenberg_perturbed_gram_fails_closure(heisenberg):
    g, m = heisenberg
    G = np.array(m.gram)
    G[2, 4] = G[4, 2] = 0.3
    G[0, 5] = G[5, 0] = 0.2
    assert bracket_residual(g, G) > 1e-6
    with pytest.raises(NotASubalgebra):
        SplitMetric(g, G)


def test_not_positive_definite(example):
    g, _ = example
    with pytest.raises(NotPositiveDefinite):
        SplitMetric(g, -np.eye(g.dim))


def test_path_length_examples(rank2):
    g, m = rank2
    assert path_length(PiecewisePath(np.zeros((3, 4)), g), m) == 0.0
    base = PiecewisePath([[0, 0, 0, 0], [0, 0, 3.0, -4.0]], g)
    assert path_length(base, m) == pytest.approx(5.0, rel=1e-12)
    for t in (-2.0, 0.0, 1.5, 4.0):
        seg = PiecewisePath([[0, 0, t, 0], [1.0, 0, t, 0]], g)
        assert path_length(seg, m) == pytest.approx(np.exp(-t), rel=1e-12)


def test_path_length_bounds_the_hyperbolic_distance(rank2):
    g, m = rank2
    rng = np.random.default_rng(2)
    for _ in range(20):
        h, v = rng.normal(scale=3.0), rng.normal()
        straight = PiecewisePath([[0, 0, 0, 0], [h, 0, v, 0]], g)
        assert path_length(straight, m, rtol=1e-9) >= hyperbolic_distance(h, v) - 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_left_invariance_of_length(seed):
    from conftest import bundled
    g, m = bundled("heisenberg_group", "heisenberg_metric")
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(4, g.dim))
    path = PiecewisePath(pts, g)
    x = GroupElement([rng.normal(size=f.dim) for f in g.factors], rng.normal(size=2))
    moved = path.translated(x)
    # translation bends Heisenberg segments, so compare finely subdivided paths
    fine = PiecewisePath(np.array([(1 - s) * pts[j] + s * pts[j + 1] for j in range(3)
                                   for s in np.linspace(0, 1, 40, endpoint=False)]
                                  + [pts[-1]]), g)
    a = path_length(fine, m, rtol=1e-9)
    b = path_length(fine.translated(x), m, rtol=1e-9)
    assert b == pytest.approx(a, rel=1e-6)
    assert len(moved) == len(path)


def test_left_invariance_exact_for_abelian(rank2):
    g, m = rank2
    rng = np.random.default_rng(3)
    for _ in range(20):
        path = PiecewisePath(rng.normal(size=(5, 4)), g)
        x = GroupElement([rng.normal(size=1), rng.normal(size=1)], rng.normal(size=2))
        assert path_length(path.translated(x), m, rtol=1e-10) == pytest.approx(
            path_length(path, m, rtol=1e-10), rel=1e-9)


def test_change_of_metric_examples(rank2, rank2_stretched):
    g, m = rank2
    com = change_of_metric(m, m)
    np.testing.assert_allclose(com.matrix, np.eye(2))
    com = change_of_metric(m, rank2_stretched)
    np.testing.assert_allclose(com.eigenvalues, [4.0, 1.0])
    np.testing.assert_allclose(com.stretch_factors, [2.0, 1.0])
    assert delta_distance(m, m) == 0.0
    assert delta_distance(m, rank2_stretched) == pytest.approx(np.log(2.0), abs=1e-12)


def test_change_of_metric_matches_generalized_eigenvalues(rank2):
    from scipy.linalg import eigh
    g, _ = rank2
    rng = np.random.default_rng(4)
    for _ in range(20):
        B1, B2 = spd(rng, 2), spd(rng, 2)
        m1, m2 = block_metric(g, base_gram=B1), block_metric(g, base_gram=B2)
        expected = np.sort(eigh(B2, B1, eigvals_only=True))[::-1]
        np.testing.assert_allclose(change_of_metric(m1, m2).eigenvalues, expected, rtol=1e-10)


def test_delta_triangle_inequality(rank2):
    g, _ = rank2
    rng = np.random.default_rng(5)
    for _ in range(100):
        a, b, c = (block_metric(g, base_gram=spd(rng, 2)) for _ in range(3))
        assert delta_distance(a, c) <= delta_distance(a, b) + delta_distance(b, c) + 1e-9


def test_heintze_quotient_and_projection(example):
    g, m = example
    hq = heintze_quotient(m, 0)
    np.testing.assert_allclose(hq.derivation, [[1.0]])
    assert hq.projection_norm == pytest.approx(1.0)
    assert projection_lipschitz(m) == pytest.approx(1.0)
    hq = heintze_quotient(m, 1)
    np.testing.assert_allclose(hq.derivation, [[2.0]])


def test_multiply_is_consistent_with_translated_paths(rank2):
    g, _ = rank2
    x = GroupElement([[1.0], [2.0]], [0.5, -0.5])
    p = PiecewisePath([[0, 0, 0, 0], [1, 1, 1, 1]], g)
    np.testing.assert_allclose(p.translated(x).element(1).flat(),
                               multiply(x, p.element(1), g).flat())
