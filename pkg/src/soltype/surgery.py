"""Surgery on polylines in Euclidean space."""

from dataclasses import dataclass, field

import numpy as np


class ConflictingSurgeries(ValueError):
    def __init__(self, first, second):
        super().__init__("surgeries %r and %r overlap" % (first, second))
        self.pair = (first, second)


class SelectionImpossible(ValueError):
    pass


class InsufficientPerpendicularLength(ValueError):
    def __init__(self, measured, required):
        super().__init__("perpendicular arclength %.6g is below the required %.6g"
                         % (measured, required))
        self.measured = measured
        self.required = required


class PiecewiseCurve:
    """A polyline with strictly increasing parameters."""

    def __init__(self, params, values):
        t = np.array(params, dtype=float)
        x = np.array(values, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if t.ndim != 1 or x.shape[0] != t.shape[0] or t.size == 0:
            raise ValueError("need one parameter per value row")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x))):
            raise ValueError("curve data must be finite")
        if np.any(np.diff(t) <= 0):
            raise ValueError("parameters must be strictly increasing")
        t.setflags(write=False)
        x.setflags(write=False)
        self.params = t
        self.values = x

    @classmethod
    def from_points(cls, values):
        values = np.asarray(values, dtype=float)
        return cls(np.arange(len(values), dtype=float), values)

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def start(self):
        return float(self.params[0])

    @property
    def end(self):
        return float(self.params[-1])

    def segment_lengths(self):
        return np.linalg.norm(np.diff(self.values, axis=0), axis=1)

    def length(self):
        return float(np.sum(self.segment_lengths()))

    def __call__(self, t):
        return np.array([np.interp(t, self.params, self.values[:, c])
                         for c in range(self.dim)]).T

    def restrict(self, a, b):
        """Sub-curve on ``[a, b]`` with interpolated endpoints."""
        inner = (self.params > a) & (self.params < b)
        t = np.concatenate([[a], self.params[inner], [b]])
        x = np.vstack([self(a)[None], self.values[inner], self(b)[None]])
        return PiecewiseCurve(t, x)

    def heights(self, v):
        return self.values @ np.asarray(v, dtype=float)

    def __eq__(self, other):
        return (isinstance(other, PiecewiseCurve)
                and np.array_equal(self.params, other.params)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return "PiecewiseCurve(%d nodes, dim=%d)" % (len(self.params), self.dim)


def directional_arclengths(curve, v):
    """Arclength along ``v`` and along its orthogonal complement."""
    v = np.asarray(v, dtype=float)
    d = np.diff(curve.values, axis=0)
    along = d @ v
    perp = d - along[:, None] * v
    return float(np.sum(np.abs(along))), float(np.sum(np.linalg.norm(perp, axis=1)))


def _perp_cumulative(curve, v):
    d = np.diff(curve.values, axis=0)
    perp = d - (d @ v)[:, None] * v
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(perp, axis=1))])


@dataclass(frozen=True)
class PathSurgery:
    start: float
    end: float
    replacement: PiecewiseCurve
    passthrough: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def meets(self, other):
        return self.start < other.end and other.start < self.end

    def contains(self, t):
        return self.start < t < self.end


@dataclass(frozen=True)
class LoopSurgery:
    location: float
    loop: PiecewiseCurve

    @property
    def shift(self):
        return self.loop.end - self.loop.start


def loop_surgery(host, t, loop_values, shift=None):
    """Loop at ``t`` visiting ``loop_values`` and returning, parametrized by arclength."""
    base = host(t)
    pts = np.vstack([base[None], np.asarray(loop_values, dtype=float).reshape(-1, host.dim),
                     base[None]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 0])
    pts = pts[keep]
    if len(pts) == 1:
        pts = np.vstack([pts, pts])
        seg = np.array([0.0])
    else:
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    span = float(np.sum(seg)) if shift is None else float(shift)
    span = max(span, 1e-9)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    params = cum / total * span if total > 0 else np.linspace(0.0, span, len(pts))
    return LoopSurgery(float(t), PiecewiseCurve(params, pts))


class SurgeryFamily:
    """Options on pairwise disjoint open intervals, kept in parameter order."""

    def __init__(self, options):
        opts = sorted(options, key=lambda o: (o.start, o.end))
        for a, b in zip(opts, opts[1:]):
            if a.meets(b):
                raise ConflictingSurgeries((a.start, a.end), (b.start, b.end))
        self.options = tuple(opts)

    def __len__(self):
        return len(self.options)

    def interstices(self):
        return [(a.end, b.start) for a, b in zip(self.options, self.options[1:])]


def apply_surgeries(host, loops=(), picks=()):
    """Splice picks into the host, then insert loops in location order."""
    picks = sorted(picks, key=lambda o: o.start)
    for a, b in zip(picks, picks[1:]):
        if a.meets(b):
            raise ConflictingSurgeries((a.start, a.end), (b.start, b.end))
    for lp in loops:
        for pk in picks:
            if pk.contains(lp.location):
                raise ConflictingSurgeries(lp.location, (pk.start, pk.end))

    t_parts, x_parts = [], []
    mask = np.ones(len(host.params), dtype=bool)
    for pk in picks:
        mask &= ~((host.params >= pk.start) & (host.params <= pk.end))
        t_parts.append(pk.replacement.params)
        x_parts.append(pk.replacement.values)
    t_parts.append(host.params[mask])
    x_parts.append(host.values[mask])
    t = np.concatenate(t_parts)
    x = np.vstack(x_parts)
    order = np.argsort(t, kind="stable")
    t, x = t[order], x[order]
    dup = np.concatenate([[False], np.diff(t) == 0])
    t, x = t[~dup], x[~dup]

    # loops are applied from the last location backwards so earlier shifts stay valid;
    # equal locations keep their given order
    indexed = sorted(enumerate(loops), key=lambda p: (p[1].location, p[0]))
    groups = []
    for _, lp in indexed:
        if groups and groups[-1][0] == lp.location:
            groups[-1][1].append(lp)
        else:
            groups.append((lp.location, [lp]))
    for loc, group in reversed(groups):
        k = np.searchsorted(t, loc)
        if k < len(t) and t[k] == loc:
            head_t, head_x = t[:k + 1], x[:k + 1]
            tail_t, tail_x = t[k + 1:], x[k + 1:]
        else:
            at = np.array([np.interp(loc, t, x[:, c]) for c in range(x.shape[1])])
            head_t = np.concatenate([t[:k], [loc]])
            head_x = np.vstack([x[:k], at[None]])
            tail_t, tail_x = t[k:], x[k:]
        mid_t, mid_x = [], []
        offset = loc
        for lp in group:
            lt = lp.loop.params - lp.loop.start
            mid_t.append(offset + lt[1:])
            mid_x.append(lp.loop.values[1:])
            offset += lp.shift
        shift = offset - loc
        t = np.concatenate([head_t] + mid_t + [tail_t + shift])
        x = np.vstack([head_x] + mid_x + [tail_x])
    keep = np.concatenate([[True], np.diff(t) > 0])
    return PiecewiseCurve(t[keep], x[keep])


# -- selection ------------------------------------------------------------------


@dataclass(frozen=True)
class Selection:
    picks: tuple
    indices: tuple
    survivor_counts: tuple


def select_simultaneous(host, loops, families, n, prefer=None):
    """Choose one option per family, pairwise disjoint and avoiding loop locations.

    ``prefer`` optionally ranks options (smaller first) before the greedy pass.
    """
    families = list(families)
    if len(loops) + len(families) > n:
        raise SelectionImpossible("%d loops and %d families exceed n=%d"
                                  % (len(loops), len(families), n))
    pools = []
    for f, fam in enumerate(families):
        opts = list(enumerate(fam.options))
        if len(opts) < n * n:
            raise SelectionImpossible("family %d has %d options, needs %d"
                                      % (f, len(opts), n * n))
        if prefer is not None:
            opts.sort(key=lambda p: prefer(f, p[1]))
        pools.append(opts[:n * n])
    locations = [lp.location for lp in loops]
    picks, indices, counts = [], [], []
    for step, pool in enumerate(pools, start=1):
        size = n - step + 1
        limit = 2 * size - 1
        later = pools[step:]
        survivors = []
        for idx, opt in pool:
            if any(opt.contains(t) for t in locations):
                continue
            if any(sum(opt.meets(o) for _, o in other) >= limit for other in later):
                continue
            survivors.append((idx, opt))
        need = 2 * (n - step)
        counts.append(len(survivors))
        if len(survivors) < max(need, 1):
            raise SelectionImpossible("step %d kept %d options, needs %d"
                                      % (step, len(survivors), max(need, 1)))
        idx, chosen = survivors[0]
        picks.append(chosen)
        indices.append(idx)
        keep = (size - 1) ** 2
        for j in range(step, len(pools)):
            rest = [p for p in pools[j] if not chosen.meets(p[1])]
            if len(rest) < keep:
                raise SelectionImpossible("family %d left with %d options, needs %d"
                                          % (j, len(rest), keep))
            pools[j] = rest[:keep]
    return Selection(tuple(picks), tuple(indices), tuple(counts))


# -- constructions --------------------------------------------------------------


def reflect_below(curve, v, level):
    """Reflect every part of the curve below ``level`` (along unit ``v``) upwards."""
    v = np.asarray(v, dtype=float)
    t, x = curve.params, curve.values
    h = x @ v
    new_t, new_x = [t[0]], [x[0]]
    for j in range(len(t) - 1):
        a, b = h[j] - level, h[j + 1] - level
        if a * b < 0:
            s = a / (a - b)
            tc = t[j] + s * (t[j + 1] - t[j])
            if t[j] < tc < t[j + 1]:
                new_t.append(tc)
                new_x.append(x[j] + s * (x[j + 1] - x[j]))
        new_t.append(t[j + 1])
        new_x.append(x[j + 1])
    xs = np.array(new_x)
    hs = xs @ v
    below = hs < level
    xs[below] += (2.0 * (level - hs[below]))[:, None] * v
    return PiecewiseCurve(np.array(new_t), xs)


def perpendicular_breakpoints(curve, v, step, count):
    """Smallest parameters at which perpendicular arclength reaches ``i * step``."""
    v = np.asarray(v, dtype=float)
    cum = _perp_cumulative(curve, v)
    t = curve.params
    out = []
    for i in range(count + 1):
        target = i * step
        j = int(np.searchsorted(cum, target, side="left"))
        if j == 0:
            out.append(float(t[0]))
        elif j >= len(cum):
            out.append(float(t[-1]))
        else:
            frac = (target - cum[j - 1]) / (cum[j] - cum[j - 1])
            out.append(float(t[j - 1] + frac * (t[j] - t[j - 1])))
    return out


def tent_option(host, v, a, b, peak):
    """Keep the perpendicular trace on ``[a, b]`` and raise the ``v`` coordinate to a tent."""
    v = np.asarray(v, dtype=float)
    sub = host.restrict(a, b)
    if np.max(sub.heights(v)) >= peak:
        return PathSurgery(a, b, sub, passthrough=True)
    cum = _perp_cumulative(sub, v)
    total = cum[-1]
    first = np.concatenate([[True], np.diff(cum) > 0])
    s = cum[first]
    perp = sub.values[first] - np.outer(sub.values[first] @ v, v)
    mid = 0.5 * total
    if not np.any(s == mid):
        k = int(np.searchsorted(s, mid))
        w = (mid - s[k - 1]) / (s[k] - s[k - 1])
        s = np.insert(s, k, mid)
        perp = np.insert(perp, k, perp[k - 1] + w * (perp[k] - perp[k - 1]), axis=0)
    h0, h1 = float(sub.values[0] @ v), float(sub.values[-1] @ v)
    heights = np.where(s <= mid, h0 + (peak - h0) * s / mid,
                       peak + (h1 - peak) * (s - mid) / mid)
    vals = perp + np.outer(heights, v)
    vals[0], vals[-1] = sub.values[0], sub.values[-1]
    params = a + (b - a) * s / total
    params[0], params[-1] = a, b
    return PathSurgery(a, b, PiecewiseCurve(params, vals))


def build_surgery_family(curve, v, window, L, d, n):
    """Family of ``n**2`` tent options on consecutive windows of perpendicular length ``L``."""
    v = np.asarray(v, dtype=float)
    a, b = window
    sub = curve.restrict(a, b)
    if np.min(sub.heights(v)) < d - 1e-9:
        raise ValueError("curve dips below height %.6g on the window" % d)
    _, perp = directional_arclengths(sub, v)
    required = n * n * L
    if perp < required:
        raise InsufficientPerpendicularLength(perp, required)
    breaks = perpendicular_breakpoints(sub, v, L, n * n)
    peak = d + np.sqrt(L / 2.0)
    return SurgeryFamily([tent_option(curve, v, breaks[i], breaks[i + 1], peak)
                          for i in range(n * n)])


def reflection_option(host, v, a, b, level):
    """Option on ``[a, b]`` that reflects the sub-curve about ``level``."""
    return PathSurgery(a, b, reflect_below(host.restrict(a, b), v, level))
