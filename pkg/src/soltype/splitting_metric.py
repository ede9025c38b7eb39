"""Left-invariant metrics with a perpendicular splitting, and comparisons between them."""

import json
from dataclasses import dataclass

import numpy as np

from .group_model import GroupElement, GroupError, inverse, multiply, root_values

SUBALGEBRA_TOL = 1e-10
REFINE_RTOL = 1e-3


class NotASubalgebra(GroupError):
    pass


class EmptyPath(ValueError):
    pass


class NotPositiveDefinite(ValueError):
    pass


def _sym(a):
    a = np.array(a, dtype=float)
    return 0.5 * (a + a.T)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Splitting:
    """The complement of the nilradical is the graph ``e_a -> e_a + M[:, a]``."""
    split_map: np.ndarray
    residual: float


def check_perpendicular_splitting(gram, group):
    """Return the Gram-orthogonal complement of the nilradical if it is a subalgebra."""
    G = _sym(gram)
    nd = group.nil_dim
    M = -np.linalg.solve(G[:nd, :nd], G[:nd, nd:]) if nd else np.zeros((0, group.rank))
    worst = 0.0
    for a in range(group.rank):
        for b in range(a + 1, group.rank):
            for i, f in enumerate(group.factors):
                blk = group.block(i)
                ra, rb = group.roots[i, a], group.roots[i, b]
                xa, xb = M[blk, a], M[blk, b]
                r = ra * (f.derivation @ xb) - rb * (f.derivation @ xa) + f.bracket(xa, xb)
                worst = max(worst, float(np.linalg.norm(r)))
    if worst > SUBALGEBRA_TOL:
        raise NotASubalgebra("bracket residual %.3e exceeds %.0e" % (worst, SUBALGEBRA_TOL))
    return Splitting(M, worst)


def _conjugator(group, M):
    """Element ``n`` of the nilradical with ``Ad_n e_a = e_a + M[:, a]``."""
    nil = []
    for i, f in enumerate(group.factors):
        blk = group.block(i)
        alpha = group.roots[i]
        Mi = M[blk]
        w = Mi @ alpha / (alpha @ alpha)
        if np.linalg.norm(Mi - np.outer(w, alpha)) > SUBALGEBRA_TOL * max(1.0, np.linalg.norm(Mi)):
            raise NotASubalgebra("factor %d: splitting map is not aligned with its root" % i)
        D = f.derivation
        y = -np.linalg.solve(D, w)
        for _ in range(2):
            y = -np.linalg.solve(D, w + 0.5 * f.bracket(y, D @ y))
        nil.append(y)
    return GroupElement(nil, np.zeros(group.rank))


def _adjoint(group, n, M):
    """Matrix of ``Ad_n`` on the Lie algebra in the standard basis."""
    d = group.dim
    Ad = np.eye(d)
    for i, f in enumerate(group.factors):
        blk = group.block(i)
        y = n.nil[i]
        ad = np.einsum("kij,i->kj", f.structure, y)
        Ad[blk, blk] += ad
    Ad[:group.nil_dim, group.nil_dim:] = M
    return Ad


class SplitMetric:
    """A left-invariant metric whose nilradical complement is a subalgebra.

    ``adapted`` is the Gram matrix after conjugating the splitting onto the
    standard copy of R^k; it is block diagonal, so all half-space and
    distance computations happen in those coordinates (see ``to_split``).
    """

    def __init__(self, group, gram):
        G = _sym(gram)
        if G.shape != (group.dim, group.dim):
            raise ValueError("Gram matrix must be %dx%d" % (group.dim, group.dim))
        if np.min(np.linalg.eigvalsh(G)) <= 1e-12:
            raise NotPositiveDefinite("Gram matrix is not positive definite")
        self.group = group
        self.gram = _frozen(G)
        sp = check_perpendicular_splitting(G, group)
        nd = group.nil_dim
        self.split_map = _frozen(sp.split_map)
        self.split_flag = not np.any(G[:nd, nd:])
        if self.split_flag:
            self.conjugator = group.identity()
            adapted = G.copy()
        else:
            self.conjugator = _conjugator(group, sp.split_map)
            Ad = _adjoint(group, self.conjugator, sp.split_map)
            adapted = Ad.T @ G @ Ad
            off = np.max(np.abs(adapted[:nd, nd:]), initial=0.0)
            if off > 1e-8 * max(1.0, np.max(np.abs(G))):
                raise NotASubalgebra("conjugated Gram keeps off-diagonal block %.3e" % off)
            adapted = _sym(adapted)
            adapted[:nd, nd:] = 0.0
            adapted[nd:, :nd] = 0.0
        self.adapted = _frozen(adapted)
        self.nil_gram = _frozen(adapted[:nd, :nd])
        self.base_gram = _frozen(adapted[nd:, nd:])
        B_inv = np.linalg.inv(self.base_gram)
        self.gradients = _frozen(group.roots @ B_inv)
        self.rates = _frozen(np.sqrt(np.einsum("ik,kl,il->i", group.roots, B_inv, group.roots)))

    def factor_gram(self, i):
        blk = self.group.block(i)
        return self.nil_gram[blk, blk]

    def base_norm(self, v):
        v = np.asarray(v, dtype=float)
        return np.sqrt(np.einsum("...i,ij,...j->...", v, self.base_gram, v))

    def factor_norm(self, i, h):
        h = np.asarray(h, dtype=float)
        G = self.factor_gram(i)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", h, G, h), 0.0))

    def to_split(self, g):
        """Coordinates in which the splitting is the standard copy of R^k."""
        if self.split_flag:
            return g
        n = self.conjugator
        return multiply(inverse(n, self.group), multiply(g, n, self.group), self.group)

    def from_split(self, g):
        if self.split_flag:
            return g
        n = self.conjugator
        return multiply(n, multiply(g, inverse(n, self.group), self.group), self.group)

    def __repr__(self):
        return "SplitMetric(dim=%d, split_flag=%s)" % (self.group.dim, self.split_flag)


def metric_to_dict(metric):
    return {"gram": metric.gram.tolist()}


def dumps_metric(metric):
    return json.dumps(metric_to_dict(metric), indent=2) + "\n"


def load_metric(path, group):
    with open(path) as fh:
        data = json.load(fh)
    G = np.array(data["gram"], dtype=float)
    return SplitMetric(group, G.reshape(group.dim, group.dim))


def save_metric(metric, path):
    with open(path, "w") as fh:
        fh.write(dumps_metric(metric))


def block_metric(group, nil_gram=None, base_gram=None):
    """Block-diagonal metric from a nilradical block and a base block."""
    nd, k = group.nil_dim, group.rank
    G = np.zeros((group.dim, group.dim))
    G[:nd, :nd] = np.eye(nd) if nil_gram is None else nil_gram
    G[nd:, nd:] = np.eye(k) if base_gram is None else base_gram
    return SplitMetric(group, G)


# -- paths and lengths ------------------------------------------------------------


class PiecewisePath:
    """Nodes of a path in flat coordinates, joined by straight coordinate segments."""

    def __init__(self, points, group):
        pts = np.array(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != group.dim:
            raise ValueError("points must have shape (m, %d)" % group.dim)
        if pts.shape[0] == 0:
            raise EmptyPath("path has no nodes")
        if not np.all(np.isfinite(pts)):
            raise ValueError("path nodes must be finite")
        pts.setflags(write=False)
        self.points = pts
        self.group = group

    @classmethod
    def from_elements(cls, elements, group):
        return cls(np.array([g.flat() for g in elements]).reshape(-1, group.dim), group)

    def __len__(self):
        return self.points.shape[0]

    def element(self, j):
        return GroupElement.from_flat(self.points[j], self.group)

    @property
    def base(self):
        return self.points[:, self.group.nil_dim:]

    def nil(self, i):
        return self.points[:, self.group.block(i)]

    def translated(self, x):
        """Left translate every node by ``x``."""
        return PiecewisePath.from_elements(
            [multiply(x, self.element(j), self.group) for j in range(len(self))], self.group)


def body_vectors(group, h0, dh, v, dv):
    """Left-translated velocity of straight coordinate segments.

    ``h0`` and ``dh`` are flat nilradical arrays (m, nil_dim), ``v`` the base
    point where the velocity is taken and ``dv`` the base velocity.
    """
    t = root_values(group, v)
    out = np.empty(h0.shape[:-1] + (group.dim,))
    for i, f in enumerate(group.factors):
        blk = group.block(i)
        w = dh[..., blk]
        if not f.is_abelian:
            w = w - 0.5 * f.bracket(h0[..., blk], w)
        out[..., blk] = f.act(-t[..., i], w)
    out[..., group.nil_dim:] = dv
    return out


def _quad_norm(x, G):
    return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", x, G, x), 0.0))


def segment_lengths(path, metric, subdivisions=1, split=False):
    """Per-segment lengths with a composite midpoint rule.

    With ``split=True`` the nodes are read in split coordinates.
    """
    g = path.group
    pts = path.points
    if len(pts) < 2:
        return np.zeros(0)
    nd = g.nil_dim
    h0, dh = pts[:-1, :nd], np.diff(pts[:, :nd], axis=0)
    v0, dv = pts[:-1, nd:], np.diff(pts[:, nd:], axis=0)
    G = metric.adapted if split else metric.gram
    chunk = max(1, (1 << 18) // len(h0))
    total = np.zeros(len(h0))
    for lo in range(0, subdivisions, chunk):
        cnt = min(chunk, subdivisions - lo)
        tm = ((np.arange(lo, lo + cnt) + 0.5) / subdivisions)[:, None, None]
        shape = (cnt,) + h0.shape
        xi = body_vectors(g, np.broadcast_to(h0, shape), np.broadcast_to(dh, shape),
                          v0 + tm * dv, np.broadcast_to(dv, shape[:1] + dv.shape))
        total += np.sum(_quad_norm(xi, G), axis=0)
    return total / subdivisions


def path_length(path, metric, rtol=REFINE_RTOL, max_doublings=16, split=False):
    """Length of a piecewise path, refined until the relative change is below ``rtol``."""
    if len(path) == 0:
        raise EmptyPath("path has no nodes")
    m = 1
    prev = float(np.sum(segment_lengths(path, metric, m, split)))
    for _ in range(max_doublings):
        m *= 2
        cur = float(np.sum(segment_lengths(path, metric, m, split)))
        if abs(cur - prev) <= rtol * max(cur, 1e-300):
            return cur
        prev = cur
    return prev


def base_length(base_points, metric):
    """Length of a base polyline in the induced metric on R^k."""
    d = np.diff(np.asarray(base_points, dtype=float), axis=0)
    return float(np.sum(metric.base_norm(d)))


# -- comparing metrics -------------------------------------------------------------


@dataclass(frozen=True)
class ChangeOfMetric:
    matrix: np.ndarray
    eigenvalues: np.ndarray

    @property
    def stretch_factors(self):
        return np.sqrt(self.eigenvalues)


def change_of_metric(m1, m2):
    """Second base metric written in an orthonormal basis of the first."""
    L = np.linalg.cholesky(m1.base_gram)
    Linv = np.linalg.inv(L)
    A = _sym(Linv @ m2.base_gram @ Linv.T)
    eig = np.sort(np.linalg.eigvalsh(A))[::-1]
    return ChangeOfMetric(_frozen(A), _frozen(eig))


def delta_distance(m1, m2):
    """Log of top stretch times top inverse stretch of the base change of metric."""
    s = change_of_metric(m1, m2).stretch_factors
    return float(np.log(s[0]) - np.log(s[-1]))


@dataclass(frozen=True)
class HeintzeQuotient:
    factor_index: int
    derivation: np.ndarray  # derivation for the unit-speed base direction
    rate: float  # |grad alpha_i|
    gradient: np.ndarray
    gram: np.ndarray  # on (n_i, unit gradient direction)
    projection_norm: float
    inclusion_lipschitz: float


def _projection_norm(P, Gq, G):
    """Operator norm of ``P`` from (R^d, G) to (R^m, Gq)."""
    L = np.linalg.cholesky(G)
    Linv = np.linalg.inv(L)
    S = Linv @ P.T @ Gq @ P @ Linv.T
    return float(np.sqrt(max(np.max(np.linalg.eigvalsh(_sym(S))), 0.0)))


def heintze_quotient(metric, i):
    g = metric.group
    blk = g.block(i)
    d = g.factors[i].dim
    a = float(metric.rates[i])
    Gq = np.zeros((d + 1, d + 1))
    Gq[:d, :d] = metric.factor_gram(i)
    Gq[d, d] = 1.0
    P = np.zeros((d + 1, g.dim))
    P[:d, blk] = np.eye(d)
    P[d, g.nil_dim:] = g.roots[i] / a
    L = _projection_norm(P, Gq, metric.adapted)
    return HeintzeQuotient(i, _frozen(a * g.factors[i].derivation), a,
                           _frozen(metric.gradients[i]), _frozen(Gq), L, 1.0)


def projection_lipschitz(metric):
    """Largest operator norm of the projections onto the factors."""
    g = metric.group
    best = 0.0
    for i in range(g.n):
        blk = g.block(i)
        P = np.zeros((g.factors[i].dim, g.dim))
        P[:, blk] = np.eye(g.factors[i].dim)
        best = max(best, _projection_norm(P, metric.factor_gram(i), metric.adapted))
    return best
