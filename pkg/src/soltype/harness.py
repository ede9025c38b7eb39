"""Distance estimates and the metric-comparison experiments."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .boxpath import half_spaces, rho
from .group_model import GroupElement, inverse, relative, root_values
from .splitting_metric import (PiecewisePath, change_of_metric, delta_distance, path_length,
                               segment_lengths)

STAGE_RTOL = 5e-3
LENGTH_RTOL = 1e-6
MIN_NODES = 16
NODES_PER_LENGTH = 1.0


class BudgetExceeded(RuntimeWarning):
    pass


@dataclass(frozen=True)
class DistanceEstimate:
    upper: float
    lower: float
    method: str
    nodes: int
    stages: int
    converged: bool
    history: tuple = ()
    path: object = field(default=None, compare=False, repr=False)

    @property
    def budget_exceeded(self):
        return not self.converged


# -- the discretized energy -----------------------------------------------------------


class _Energy:
    """Energy of a node path with per-factor anchoring and height scaling.

    Interior nil coordinates are stored as ``z`` with
    ``h = anchor + exp(alpha(v_ref) D) z``, where the anchor is the start
    before the factor's highest node and the target after it. This keeps
    variables of unit size even when displacements are astronomically large.
    """

    def __init__(self, metric, target_nil, target_base, h, v):
        g = metric.group
        self.group, self.metric = g, metric
        self.N = metric.nil_gram
        self.B = metric.base_gram
        self.target_nil = target_nil
        self.target_base = target_base
        self.M = len(v) - 1
        self.refresh(h, v)

    def refresh(self, h, v):
        g = self.group
        self.v_ref = v.copy()
        t_ref = root_values(g, v)
        anchor = np.zeros_like(h)
        scale = []
        for i, f in enumerate(g.factors):
            blk = g.block(i)
            top = int(np.argmax(t_ref[:, i]))
            anchor[top + 1:, blk] = self.target_nil[blk]
            scale.append(f.flow(t_ref[:, i]))
        self.anchor = anchor
        self.scale = scale
        z = np.empty_like(h)
        for i, f in enumerate(g.factors):
            blk = g.block(i)
            z[:, blk] = f.act(-t_ref[:, i], h[:, blk] - anchor[:, blk])
        self.z_end = (z[0].copy(), z[-1].copy())
        return z

    def decode(self, z):
        h = self.anchor.copy()
        for i in range(self.group.n):
            blk = self.group.block(i)
            h[:, blk] += np.einsum("mij,mj->mi", self.scale[i], z[:, blk])
        return h

    def pack(self, z, v):
        return np.concatenate([z[1:-1].ravel(), v[1:-1].ravel()])

    def unpack(self, x):
        g, M = self.group, self.M
        nd, k = g.nil_dim, g.rank
        z = np.empty((M + 1, nd))
        v = np.empty((M + 1, k))
        z[0], z[-1] = self.z_end
        v[0], v[-1] = 0.0, self.target_base
        cut = (M - 1) * nd
        z[1:-1] = x[:cut].reshape(M - 1, nd)
        v[1:-1] = x[cut:].reshape(M - 1, k)
        return z, v

    def __call__(self, x):
        z, v = self.unpack(x)
        h = self.decode(z)
        dh, dv = np.diff(h, axis=0), np.diff(v, axis=0)
        u = dh.copy()
        for i, f in enumerate(self.group.factors):
            if not f.is_abelian:
                blk = self.group.block(i)
                u[:, blk] -= 0.5 * f.bracket(h[:-1, blk], dh[:, blk])
        if self.diagonal:
            energy, gu, gv = self._exact(u, v, dv)
        else:
            energy, gu, gv = self._quadrature(u, v, dv)
        bdv = dv @ self.B
        energy += self.M * np.sum(bdv * dv)
        gv[:-1] -= 2.0 * self.M * bdv
        gv[1:] += 2.0 * self.M * bdv
        gh = self._chain_nil(h, dh, gu)
        gz = np.empty_like(gh)
        for i in range(self.group.n):
            blk = self.group.block(i)
            gz[:, blk] = np.einsum("mji,mj->mi", self.scale[i], gh[:, blk])
        return float(energy), self.pack(gz, gv)

    @property
    def diagonal(self):
        return all(f._diag is not None for f in self.group.factors)

    def _exact(self, u, v, dv):
        """Closed-form integral of the squared nil speed along straight segments."""
        g, M = self.group, self.M
        lam = np.concatenate([f._diag for f in g.factors])
        owner = np.concatenate([[i] * f.dim for i, f in enumerate(g.factors)])
        rates = lam[:, None] * g.roots[owner]
        A = v[:-1] @ rates.T
        Bk = dv @ rates.T
        w = u * np.exp(-A)
        S = Bk[:, :, None] + Bk[:, None, :]
        phi, dphi = _phi(S)
        Nw = self.N[None] * w[:, None, :]
        gw = 2.0 * np.einsum("mkl,mkl->mk", Nw, phi)
        energy = M * np.einsum("mk,mkl,mkl->", w, Nw, phi)
        gA = -gw * w
        gB = 2.0 * np.einsum("mk,mkl,mkl->mk", w, Nw, dphi)
        gv = np.zeros_like(v)
        gv[:-1] += M * (gA - gB) @ rates
        gv[1:] += M * gB @ rates
        return energy, M * gw * np.exp(-A), gv

    def _quadrature(self, u, v, dv):
        g, M = self.group, self.M
        energy = 0.0
        gu = np.zeros_like(u)
        gv = np.zeros_like(v)
        for tau, weight in zip(_GL_NODES, _GL_WEIGHTS):
            t = root_values(g, v[:-1] + tau * dv)
            xi = np.empty_like(u)
            flows = []
            for i, f in enumerate(g.factors):
                blk = g.block(i)
                E = f.flow(-t[:, i])
                flows.append(E)
                xi[:, blk] = np.einsum("mij,mj->mi", E, u[:, blk])
            nxi = xi @ self.N
            energy += M * weight * np.sum(nxi * xi)
            gxi = 2.0 * M * weight * nxi
            gt = np.empty_like(t)
            for i, f in enumerate(g.factors):
                blk = g.block(i)
                gt[:, i] = -np.einsum("mi,ij,mj->m", gxi[:, blk], f.derivation, xi[:, blk])
                gu[:, blk] += np.einsum("mji,mj->mi", flows[i], gxi[:, blk])
            gvq = gt @ g.roots
            gv[:-1] += (1.0 - tau) * gvq
            gv[1:] += tau * gvq
        return energy, gu, gv

    def _chain_nil(self, h, dh, gu):
        g = self.group
        gh = np.zeros_like(h)
        for i, f in enumerate(g.factors):
            blk = g.block(i)
            w = gu[:, blk]
            if f.is_abelian:
                gdh = w
            else:
                c = f.structure
                ad_h = np.einsum("kab,ma->mkb", c, h[:-1, blk])
                ad_d = np.einsum("kab,ma->mkb", c, dh[:, blk])
                gdh = w - 0.5 * np.einsum("mkb,mk->mb", ad_h, w)
                gh[:-1, blk] += 0.5 * np.einsum("mkb,mk->mb", ad_d, w)
            gh[:-1, blk] -= gdh
            gh[1:, blk] += gdh
        return gh


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


def _phi(x):
    """``(1 - exp(-x)) / x`` and its derivative, with series near zero."""
    small = np.abs(x) < 1e-3
    xs = np.where(small, 1.0, x)
    e = np.exp(-xs)
    phi = -np.expm1(-xs) / xs
    dphi = (e * (1.0 + xs) - 1.0) / (xs * xs)
    if small.any():
        y = x[small]
        phi[small] = 1.0 - y / 2.0 + y * y / 6.0 - y ** 3 / 24.0
        dphi[small] = -0.5 + y / 3.0 - y * y / 8.0 + y ** 3 / 30.0
    return phi, dphi


def energy_objective(metric, nodes):
    """Objective ``x -> (energy, gradient)`` over interior nodes and its starting point.

    Exposed for gradient checks; the anchoring uses the nodes themselves.
    """
    g = metric.group
    nd = g.nil_dim
    nodes = np.asarray(nodes, dtype=float)
    h, v = nodes[:, :nd].copy(), nodes[:, nd:].copy()
    en = _Energy(metric, h[-1].copy(), v[-1].copy(), h, v)
    z = en.refresh(h, v)
    return en, en.pack(z, v)


def _optimize(metric, nodes, outer=6, inner=400):
    g = metric.group
    nd = g.nil_dim
    h, v = nodes[:, :nd].copy(), nodes[:, nd:].copy()
    if len(nodes) <= 2:
        return nodes
    en = _Energy(metric, h[-1].copy(), v[-1].copy(), h, v)
    span = np.max(np.abs(v)) + np.sum(np.sqrt(np.sum(np.diff(v, axis=0) ** 2, axis=1))) + 20.0
    prev = None
    for _ in range(outer):
        z = en.refresh(h, v)
        x0 = en.pack(z, v)
        cut = (len(v) - 2) * nd
        bounds = [(None, None)] * cut + [(-span, span)] * (len(x0) - cut)
        res = minimize(en, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": inner, "ftol": 1e-14, "gtol": 1e-10})
        z, v = en.unpack(res.x)
        h = en.decode(z)
        if prev is not None and abs(prev - res.fun) <= 1e-10 * max(res.fun, 1e-300):
            break
        prev = res.fun
    return np.hstack([h, v])


def _resample(metric, nodes, count):
    """Subdivide segments so the path has about ``count`` segments, spread by metric length."""
    path = PiecewisePath(nodes, metric.group)
    seg = segment_lengths(path, metric, 8, split=True)
    keep = np.linalg.norm(np.diff(nodes, axis=0), axis=1) > 0
    if not np.any(keep):
        return nodes[[0, -1]]
    pts = np.vstack([nodes[:1], nodes[1:][keep]])
    seg = seg[keep]
    pieces = np.maximum(1, np.round(count * seg / max(seg.sum(), 1e-300)).astype(int))
    out = [pts[:1]]
    for j, m in enumerate(pieces):
        s = (np.arange(1, m + 1) / m)[:, None]
        out.append(pts[j] + s * (pts[j + 1] - pts[j]))
    return np.vstack(out)


def _double(nodes):
    mids = 0.5 * (nodes[:-1] + nodes[1:])
    out = np.empty((2 * len(nodes) - 1, nodes.shape[1]))
    out[0::2] = nodes
    out[1::2] = mids
    return out


def _length(metric, nodes):
    return path_length(PiecewisePath(nodes, metric.group), metric, rtol=LENGTH_RTOL,
                       split=True)


def estimate_distance(p, q, group, metric, budget=4, use_straight=None):
    """Upper and lower bounds for the distance between ``p`` and ``q``.

    The upper bound is the length of an optimized path. ``budget`` is the
    number of node-doubling stages; the best length seen so far is reported,
    so raising the budget never raises the bound.
    """
    ps, qs = metric.to_split(p), metric.to_split(q)
    rel = relative(ps, qs, group)
    lower = float(metric.base_norm(rel.base))
    nd = group.nil_dim
    target = rel.flat()
    if not np.any(target):
        return DistanceEstimate(0.0, 0.0, "identical", 1, 0, True, (),
                                PiecewisePath(ps.flat()[None], group))
    if not np.any(target[:nd]):
        nodes = np.vstack([np.zeros(group.dim), target])
        return DistanceEstimate(lower, lower, "base-geodesic", 2, 0, True, (),
                                PiecewisePath(nodes, group).translated(ps))
    _, box = rho(p, q, group, metric)
    box_nodes = box.path.translated(inverse(ps, group)).points
    starts = [("box", box_nodes)]
    straight = np.vstack([np.zeros(group.dim), target])
    if use_straight is None:
        use_straight = _length(metric, straight) <= 2.0 * box.length
    if use_straight:
        starts.append(("straight", straight))
    best = None
    for tag, init in starts:
        count = max(MIN_NODES, 4 * (len(init) - 1), int(np.ceil(NODES_PER_LENGTH * box.length)))
        nodes = _resample(metric, init, count)
        history = []
        best_here = (np.inf, nodes)
        converged = False
        for stage in range(max(budget, 1)):
            if stage:
                nodes = _double(best_here[1])
            nodes = _optimize(metric, nodes)
            length = _length(metric, nodes)
            history.append(length)
            if length < best_here[0]:
                best_here = (length, nodes)
            if stage and abs(history[-2] - length) <= STAGE_RTOL * length:
                converged = True
                break
        if best is None or best_here[0] < best[0]:
            best = (best_here[0], best_here[1], tag, converged, tuple(history))
    length, nodes, tag, converged, history = best
    upper = max(length, lower)
    return DistanceEstimate(upper, lower, tag, len(nodes), len(history), converged, history,
                            PiecewisePath(nodes, group).translated(ps))


# -- sampling -------------------------------------------------------------------


def sample_pair(group, metric, separation, rng):
    """``p`` = identity and ``q`` with base on the metric sphere of radius ``separation``.

    Each factor displacement has log-uniform coset size in ``[e^(s-1), e^s]``.
    """
    u = rng.normal(size=group.rank)
    v = separation * u / metric.base_norm(u)
    nil = []
    for i in range(group.n):
        d = rng.normal(size=group.factors[i].dim)
        d = d / metric.factor_norm(i, d)
        nil.append(np.exp(rng.uniform(separation - 1.0, separation)) * d)
    q = metric.from_split(GroupElement(nil, v))
    return group.identity(), q


def sample_pairs(group, metric, separations, per_separation, seed):
    rng = np.random.default_rng(seed)
    out = []
    for s in separations:
        for _ in range(per_separation):
            p, q = sample_pair(group, metric, float(s), rng)
            out.append((float(s), p, q))
    return out


def slope(x, y):
    """Least-squares slope of ``y`` against ``x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    return float(np.sum(xc * (y - y.mean())) / np.sum(xc * xc))


def parallel_map(fn, items, workers=1):
    """Ordered map, optionally over a process pool."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=1))


# -- experiments --------------------------------------------------------------------


def _pair_task(args):
    group, metrics, p, q, budget = args
    out = []
    for m in metrics:
        est = estimate_distance(p, q, group, m, budget)
        r, _ = rho(p, q, group, m)
        r_back, _ = rho(q, p, group, m)
        out.append((est.lower, est.upper, r, r_back, est.converged))
    return out


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple
    stretch: tuple
    eigenvalues: tuple
    constants: dict
    slopes: dict


def compare_metrics(group, m1, m2, separations, per_separation, seed, budget=4, workers=1):
    """Estimate distances for both metrics on shared pairs and fit the additive constants."""
    pairs = sample_pairs(group, m1, separations, per_separation, seed)
    tasks = [(group, (m1, m2), p, q, budget) for _, p, q in pairs]
    results = parallel_map(_pair_task, tasks, workers)
    com = change_of_metric(m1, m2)
    stretch = tuple(float(s) for s in com.stretch_factors)
    eig = tuple(float(e) for e in com.eigenvalues)
    rows = []
    for j, ((s, _, _), (r1, r2)) in enumerate(zip(pairs, results)):
        d1, d2 = r1[1], r2[1]
        rows.append({
            "pair": j, "separation": s,
            "d1_lower": r1[0], "d1_upper": d1, "rho1": r1[2], "rho1_reverse": r1[3],
            "d2_lower": r2[0], "d2_upper": d2, "rho2": r2[2], "rho2_reverse": r2[3],
            "upper_residual": max(d2 - stretch[0] * d1, 0.0),
            "lower_residual": max(stretch[-1] * d1 - d2, 0.0),
            "upper_residual_eig": max(d2 - eig[0] * d1, 0.0),
            "lower_residual_eig": max(eig[-1] * d1 - d2, 0.0),
            "converged": bool(r1[4] and r2[4]),
        })
    sep = [r["separation"] for r in rows]
    constants = {
        "stretch_upper": max(r["upper_residual"] for r in rows),
        "stretch_lower": max(r["lower_residual"] for r in rows),
        "eigen_upper": max(r["upper_residual_eig"] for r in rows),
        "eigen_lower": max(r["lower_residual_eig"] for r in rows),
        "max_separation": max(sep),
    }
    slopes = {key: slope(sep, [r[key] for r in rows]) for key in
              ("upper_residual", "lower_residual", "upper_residual_eig", "lower_residual_eig")}
    return ComparisonReport(tuple(rows), stretch, eig, constants, slopes)


@dataclass(frozen=True)
class RhoReport:
    rows: tuple
    gap_slope: float
    lower_ok: bool


def rho_vs_distance(group, metric, separations, per_separation, seed, budget=4, workers=1):
    pairs = sample_pairs(group, metric, separations, per_separation, seed)
    tasks = [(group, (metric,), p, q, budget) for _, p, q in pairs]
    results = parallel_map(_pair_task, tasks, workers)
    rows = []
    for j, ((s, _, _), (r,)) in enumerate(zip(pairs, results)):
        lower, upper, rv, rb, conv = r
        rows.append({"pair": j, "separation": s, "d_lower": lower, "d_upper": upper,
                     "rho": rv, "rho_reverse": rb, "gap_upper": rv - upper,
                     "gap_lower": rv - lower, "converged": conv})
    gap = slope([r["separation"] for r in rows], [r["gap_upper"] for r in rows])
    return RhoReport(tuple(rows), gap, all(r["rho"] >= r["d_lower"] for r in rows))


@dataclass(frozen=True)
class DeltaReport:
    closed_form: float
    empirical: float
    discrepancy: float
    rows: tuple


def _ratio_task(args):
    group, m1, m2, p, q, budget = args
    return (estimate_distance(p, q, group, m1, budget).upper,
            estimate_distance(p, q, group, m2, budget).upper)


def delta_vs_empirical(group, m1, m2, separation=30.0, directions=32, budget=3, workers=1):
    """Closed-form distance between metrics against ``log(max ratio / min ratio)``."""
    pairs = []
    for j in range(directions):
        th = np.pi * j / directions
        u = np.zeros(group.rank)
        u[0], u[1 % group.rank] = np.cos(th), np.sin(th)
        v = separation * u / m1.base_norm(u)
        pairs.append(("base", j, group.identity(), GroupElement(
            [np.zeros(f.dim) for f in group.factors], v)))
    for i, f in enumerate(group.factors):
        nil = [np.zeros(g.dim) for g in group.factors]
        e = np.zeros(f.dim)
        e[0] = 1.0
        nil[i] = np.exp(separation) * e / m1.factor_norm(i, e)
        pairs.append(("nil", i, group.identity(), GroupElement(nil, np.zeros(group.rank))))
    tasks = [(group, m1, m2, p, m1.from_split(q), budget) for _, _, p, q in pairs]
    results = parallel_map(_ratio_task, tasks, workers)
    rows = tuple({"kind": kind, "index": j, "d1": d1, "d2": d2, "ratio": d2 / d1}
                 for (kind, j, _, _), (d1, d2) in zip(pairs, results))
    ratios = [r["ratio"] for r in rows]
    emp = float(np.log(max(ratios) / min(ratios)))
    closed = delta_distance(m1, m2)
    disc = abs(emp - closed) / closed if closed > 0 else abs(emp)
    return DeltaReport(closed, emp, disc, rows)


def half_space_summary(p, q, group, metric):
    hs = half_spaces(p, q, group, metric)
    return [{"factor": i, "threshold": float(H), "rate": float(hs.rates[i]),
             "upper_bound": hs.upper_bound[i]} for i, H in enumerate(hs.thresholds)]
