"""Half-spaces of a point pair, box paths, and the box distance ``rho``."""

import warnings
from dataclasses import dataclass
from itertools import permutations

import cvxpy as cp
import numpy as np

from .group_model import GroupElement, UnsupportedStep, relative, root_values
from .splitting_metric import PiecewisePath, path_length

EXHAUSTIVE_LIMIT = 6
FEASIBILITY_TOL = 1e-9


# -- half-spaces ------------------------------------------------------------------


def contracted_norm(factor, gram, h, height):
    """``|exp(-height D) h|`` in the factor Gram."""
    x = factor.act(-np.asarray(height, dtype=float), h)
    return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", x, gram, x), 0.0))


def coset_threshold(factor, gram, h, tol=1e-13):
    """Smallest ``H`` beyond which the contracted displacement has length at most 1."""
    h = np.asarray(h, dtype=float)
    if factor.step > 2:
        raise UnsupportedStep("coset distances need nilpotency step at most 2")
    if not np.any(h):
        return -np.inf
    if factor.dim == 1:
        return float(np.log(abs(h[0]) * np.sqrt(gram[0, 0])) / factor.derivation[0, 0])

    def over(H):
        return contracted_norm(factor, gram, h, H) > 1.0

    rate = float(np.min(np.linalg.eigvals(factor.derivation).real))
    lo, hi = -1.0, 1.0
    while not over(lo):
        lo *= 2.0
    while over(hi):
        hi *= 2.0
    grid = np.linspace(lo, hi + 10.0 / rate, 2001)
    flags = contracted_norm(factor, gram, h[None], grid) > 1.0
    j = int(np.nonzero(flags)[0][-1])
    a, b = grid[j], grid[j + 1]
    while b - a > tol * max(1.0, abs(b)):
        mid = 0.5 * (a + b)
        if over(mid):
            a = mid
        else:
            b = mid
    return float(b)


@dataclass(frozen=True)
class HalfSpaceSet:
    """Half-spaces ``alpha_i(x) >= thresholds[i]`` in the base frame of ``p^{-1} q``."""

    thresholds: np.ndarray
    roots: np.ndarray
    gradients: np.ndarray
    rates: np.ndarray
    start: GroupElement
    displacement: GroupElement
    upper_bound: tuple

    @property
    def origin(self):
        return self.start.base

    @property
    def finite(self):
        return [i for i, H in enumerate(self.thresholds) if np.isfinite(H)]


def half_spaces(p, q, group, metric):
    ps, qs = metric.to_split(p), metric.to_split(q)
    rel = relative(ps, qs, group)
    H = np.array([coset_threshold(f, metric.factor_gram(i), rel.nil[i])
                  for i, f in enumerate(group.factors)])
    return HalfSpaceSet(H, group.roots, metric.gradients, metric.rates, ps, rel, tuple(not f.is_abelian for f in group.factors))


@dataclass(frozen=True)
class HSVCheck:
    ok: bool
    violating: tuple
    margins: tuple

    def __bool__(self):
        return self.ok


def _base_points(path):
    if isinstance(path, BoxPath):
        return path.path.base
    if isinstance(path, PiecewisePath):
        return path.base
    if hasattr(path, "values"):
        return path.values
    return np.atleast_2d(np.asarray(path, dtype=float))


def is_hsv(path, hs, tol=FEASIBILITY_TOL):
    """Whether the base projection meets every half-space; reports the ones missed.

    Nil conjugation leaves base coordinates unchanged, so paths may be given
    in either original or split coordinates.
    """
    base = _base_points(path) - hs.origin
    alpha = base @ hs.roots.T
    margins = []
    bad = []
    for i, H in enumerate(hs.thresholds):
        m = np.inf if not np.isfinite(H) else float(np.max(alpha[:, i]) - H)
        margins.append(m)
        if m < -tol:
            bad.append(i)
    return HSVCheck(not bad, tuple(bad), tuple(margins))


# -- box paths ------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    kind: str
    factor: int
    start: int
    end: int


@dataclass(frozen=True)
class BoxPath:
    """A box path stored by its nodes in split coordinates."""

    path: PiecewisePath
    segments: tuple
    metric: object
    tour_length: float
    jump_costs: tuple
    order: tuple
    upper_bound: bool

    @property
    def length(self):
        return path_length(self.path, self.metric, split=True)

    def to_path(self):
        m = self.metric
        return PiecewisePath.from_elements(
            [m.from_split(self.path.element(j)) for j in range(len(self.path))], m.group)

    def records(self):
        return [{"type": s.kind, "factor": s.factor,
                 "start": self.path.points[s.start].tolist(),
                 "end": self.path.points[s.end].tolist()} for s in self.segments]


def assemble_box_path(vertices, hs, metric, order=()):
    """Lift a relative base polyline from 0 to a box path with one jump per factor.

    Each jump sits at the vertex where its root is largest and moves the
    factor coordinate from 0 to the displacement, at contracted cost.
    """
    group = metric.group
    vertices = np.asarray(vertices, dtype=float)
    rel = hs.displacement
    alpha = vertices @ group.roots.T
    where = {}
    for i in range(group.n):
        if np.any(rel.nil[i]):
            where.setdefault(int(np.argmax(alpha[:, i])), []).append(i)
    nil = np.zeros(group.nil_dim)
    nodes, segments, costs = [], [], [0.0] * group.n
    for j, x in enumerate(vertices):
        nodes.append(np.concatenate([nil, x]))
        if j:
            segments.append(Segment("base", -1, len(nodes) - 2, len(nodes) - 1))
        for i in where.get(j, []):
            nil = nil.copy()
            nil[group.block(i)] = rel.nil[i]
            nodes.append(np.concatenate([nil, x]))
            segments.append(Segment("jump", i, len(nodes) - 2, len(nodes) - 1))
            costs[i] = float(contracted_norm(group.factors[i], metric.factor_gram(i),
                                             rel.nil[i], alpha[j, i]))
    local = PiecewisePath(np.array(nodes), group)
    tour = float(np.sum(metric.base_norm(np.diff(vertices, axis=0))))
    return BoxPath(local.translated(hs.start), tuple(segments), metric, tour, tuple(costs),
                   tuple(order), any(hs.upper_bound))


# -- touring the half-spaces ------------------------------------------------------

_PROBLEMS = {}


def _touring_problem(m, k):
    """Shortest polyline from 0 through m half-spaces (in order) to an end point."""
    key = (m, k)
    if key not in _PROBLEMS:
        normals = cp.Parameter((m, k))
        levels = cp.Parameter(m)
        end = cp.Parameter(k)
        pts = cp.Variable((m, k))
        cost = cp.norm(pts[0]) + cp.norm(end - pts[m - 1])
        for j in range(m - 1):
            cost = cost + cp.norm(pts[j + 1] - pts[j])
        cons = [cp.sum(cp.multiply(normals, pts), axis=1) >= levels]
        _PROBLEMS[key] = (cp.Problem(cp.Minimize(cost), cons), normals, levels, end, pts)
    return _PROBLEMS[key]


def tour(normals, levels, end):
    """Touch points (whitened coordinates) of the shortest ordered tour, and its length."""
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    levels = np.asarray(levels, dtype=float)
    end = np.asarray(end, dtype=float)
    m, k = normals.shape
    if m == 0:
        return np.zeros((0, k)), float(np.linalg.norm(end))
    prob, N, H, E, X = _touring_problem(m, k)
    N.value, H.value, E.value = normals, levels, end
    # tight tolerances sometimes end "inaccurate"; the points are made feasible below anyway
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        try:
            prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10,
                       tol_feas=1e-10)
        except cp.error.SolverError:
            pass
        if X.value is None:
            prob.solve(solver=cp.SCS, eps=1e-10, max_iters=200000)
    pts = np.array(X.value, dtype=float)
    # nudge onto the feasible side so that membership checks are exact
    short = levels - np.einsum("jk,jk->j", normals, pts)
    bump = np.maximum(short, 0.0) / np.einsum("jk,jk->j", normals, normals)
    pts = pts + bump[:, None] * normals
    chain = np.vstack([np.zeros(k), pts, end])
    return pts, float(np.sum(np.linalg.norm(np.diff(chain, axis=0), axis=1)))


def _greedy_order(normals, levels, indices):
    cur = np.zeros(normals.shape[1])
    left, out = list(indices), []
    while left:
        gaps = [max(0.0, levels[i] - normals[i] @ cur) / np.linalg.norm(normals[i]) for i in left]
        i = left.pop(int(np.argmin(gaps)))
        out.append(i)
        short = levels[i] - normals[i] @ cur
        if short > 0:
            cur = cur + short / (normals[i] @ normals[i]) * normals[i]
    return [tuple(out)]


def best_tour(hs, metric, exhaustive_limit=EXHAUSTIVE_LIMIT):
    """Best ordering and touch points (base coordinates, relative frame)."""
    R = np.linalg.cholesky(metric.base_gram)
    Rinv_T = np.linalg.inv(R).T
    normals = hs.roots @ Rinv_T
    end = R.T @ hs.displacement.base
    finite = hs.finite
    if len(finite) <= exhaustive_limit:
        orders = list(permutations(finite))
    else:
        orders = _greedy_order(normals, hs.thresholds, finite)
    best = None
    for order in orders:
        idx = list(order)
        pts, length = tour(normals[idx], hs.thresholds[idx], end)
        if best is None or length < best[1] - 1e-12:
            best = (order, length, pts)
    order, length, pts = best
    vertices = np.vstack([np.zeros(metric.group.rank), pts @ Rinv_T.T,
                          hs.displacement.base])
    return order, length, vertices


def rho(p, q, group, metric, exhaustive_limit=EXHAUSTIVE_LIMIT):
    """Length of the shortest half-space visiting box path, and the path."""
    hs = half_spaces(p, q, group, metric)
    order, _, vertices = best_tour(hs, metric, exhaustive_limit)
    box = assemble_box_path(vertices, hs, metric, order)
    return box.length, box
