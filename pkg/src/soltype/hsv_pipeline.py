"""Turn a near-geodesic into a coarse half-space visiting box path by curve surgery.

Every step is gated on inequalities measured on the input, so a failure is
reported instead of an uncertified path.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .boxpath import assemble_box_path, contracted_norm, half_spaces
from .distortion import uniform_certificate
from .group_model import GroupElement, group_from_dict, group_to_dict, relative
from .splitting_metric import PiecewisePath, SplitMetric, metric_to_dict, path_length, \
    projection_lipschitz
from .surgery import PathSurgery, PiecewiseCurve, SelectionImpossible, SurgeryFamily, \
    LoopSurgery, _perp_cumulative, apply_surgeries, build_surgery_family, \
    directional_arclengths, loop_surgery, reflection_option, select_simultaneous

EPSILON_LADDER = (0.5, 0.25, 0.1, 0.05, 0.025, 0.01, 0.005, 0.0025, 0.001)
CONDITION_CUTOFF = 64
MAX_DOUBLINGS = 200
LENGTH_SLACK = 1e-6
HEIGHT_TOL = 1e-9


class NoValidConstants(ValueError):
    pass


class NoQualifyingSlice(ValueError):
    pass


class CertificationFailure(RuntimeError):
    def __init__(self, inequality, measured, required):
        super().__init__("%s: measured %.6g, required %.6g" % (inequality, measured, required))
        self.inequality = inequality
        self.measured = float(measured)
        self.required = float(required)


def double_factorial(m):
    return math.prod(range(m, 0, -2)) if m > 0 else 1


def retention(n):
    """Fraction ``(2n-3)!!/(2n-2)!!`` of slice mass kept through the selections."""
    return double_factorial(2 * n - 3) / double_factorial(2 * n - 2)


@dataclass(frozen=True)
class PipelineConstants:
    epsilon: float
    N: float
    r: float
    K: float
    L1: float
    C: float
    a: float
    T: float
    n: int


def _log_conditions(r, C, a, eps, N, L1, n):
    """Slack of the three conditions in log space (all must be >= 0)."""
    keep = retention(n)
    cp = n * (2 * r + 1)
    la = math.log(a)
    one = math.log(C) + r * la - math.log(N) + math.log(keep) - math.log(math.sqrt(2) * cp)
    poly = 32 * n * n * r * r * (n * n + 1) + cp + (n + 1) * r
    two = (2 * math.log(C) + 2 * r * la
           - (-2 * math.log(keep) + math.log(4 * cp) + 2 * math.log(N) + 2 * math.log(L1)
              + math.log(poly)))
    g = math.log(a * (1 - eps))
    three = min(2 * (j - 1) * r * g - 2 * math.log(j) for j in range(1, CONDITION_CUTOFF + 1))
    # beyond the cutoff the linear term grows faster than 2 log j once j >= 1/(r g)
    if CONDITION_CUTOFF < 1.0 / (r * g):
        three = min(three, -1.0)
    return one, two, three


def conditions_hold(r, C, a, eps, N, L1, n):
    return all(x >= 0 for x in _log_conditions(r, C, a, eps, N, L1, n))


def compute_constants(group, metric, cert=None):
    cert = uniform_certificate(metric) if cert is None else cert
    a, C, T = float(cert.a), float(cert.C), float(cert.T)
    if a <= 1:
        raise NoValidConstants("distortion rate %.6g is not above 1" % a)
    eps = next((e for e in EPSILON_LADDER if a * (1 - e) > 1), None)
    if eps is None:
        raise NoValidConstants("no epsilon on the ladder has a(1-eps) > 1 for a=%.6g" % a)
    N = 1.0 / eps
    L1 = projection_lipschitz(metric)
    n = group.n
    r = max(1.0, T)
    for _ in range(MAX_DOUBLINGS):
        if conditions_hold(r, C, a, eps, N, L1, n):
            return PipelineConstants(eps, N, r, (n + 1) * (2 * r + 1), L1, C, a, T, n)
        r *= 2.0
    raise NoValidConstants("conditions fail up to r=%.6g" % r)


def constants_with_r(constants, r):
    """Same constants at another radius, with ``K`` recomputed."""
    n = constants.n
    return PipelineConstants(constants.epsilon, constants.N, float(r), (n + 1) * (2 * r + 1),
                             constants.L1, constants.C, constants.a, constants.T, n)


# -- geometry of the input ------------------------------------------------------------


class _Frame:
    """Whitened base coordinates of ``p^{-1} gamma`` and its factor coordinates."""

    def __init__(self, gamma, p, group, metric, split):
        self.group, self.metric = group, metric
        self.points = np.asarray(gamma.points, dtype=float)
        self.split = split
        self.ps = p if split else metric.to_split(p)
        self.R = np.linalg.cholesky(metric.base_gram)
        normals = group.roots @ np.linalg.inv(self.R).T
        self.scale = np.linalg.norm(normals, axis=1)
        self.units = normals / self.scale[:, None]
        base = self.points[:, group.nil_dim:] - self.ps.base
        self.host = PiecewiseCurve(np.arange(len(base), dtype=float), base @ self.R)

    def element_at(self, t):
        j = min(int(np.floor(t)), len(self.points) - 2)
        w = t - j
        x = self.points[j] + w * (self.points[j + 1] - self.points[j])
        g = PiecewisePath(x[None], self.group).element(0)
        return g if self.split else self.metric.to_split(g)

    def factor_coordinate(self, t, i):
        return relative(self.ps, self.element_at(t), self.group).nil[i]

    def unwhiten(self, values):
        return np.asarray(values) @ np.linalg.inv(self.R)


def _band_intervals(curve, u, lo, hi):
    """Maximal parameter intervals on which the height along ``u`` is in ``[lo, hi]``."""
    t, h = curve.params, curve.values @ u
    cuts = [t[0]]
    for j in range(len(t) - 1):
        for level in (lo, hi):
            a, b = h[j] - level, h[j + 1] - level
            if a * b < 0:
                cuts.append(t[j] + a / (a - b) * (t[j + 1] - t[j]))
        cuts.append(t[j + 1])
    cuts = np.unique(np.array(cuts))
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        mid = curve(0.5 * (a + b)) @ u
        if lo - HEIGHT_TOL <= mid <= hi + HEIGHT_TOL:
            if out and out[-1][1] == a:
                out[-1] = (out[-1][0], float(b))
            else:
                out.append((float(a), float(b)))
    return out


def _subtract(intervals, holes):
    out = list(intervals)
    for ha, hb in holes:
        nxt = []
        for a, b in out:
            if hb <= a or b <= ha:
                nxt.append((a, b))
                continue
            if a < ha:
                nxt.append((a, ha))
            if hb < b:
                nxt.append((hb, b))
        out = nxt
    return [(a, b) for a, b in out if b > a]


def _perp_length(curve, u, intervals):
    return float(sum(directional_arclengths(curve.restrict(a, b), u)[1] for a, b in intervals))


def _coset_mass(frame, i, intervals, height):
    """Sum of coset distances at ``height`` between subcurve endpoints."""
    f = frame.group.factors[i]
    G = frame.metric.factor_gram(i)
    total = 0.0
    for a, b in intervals:
        x, y = frame.factor_coordinate(a, i), frame.factor_coordinate(b, i)
        step = f.bch(-x, y)
        total += float(contracted_norm(f, G, step, height))
    return total


# -- slicing -----------------------------------------------------------------------


@dataclass(frozen=True)
class SliceDecomposition:
    factor: int
    radius: float
    index: int
    intervals: tuple
    masses: tuple
    target: float


def slice_curve(frame, hs, constants, i):
    """Smallest slice index whose coset mass meets the geometric-series share."""
    u = frame.units[i]
    top = hs.thresholds[i] / frame.scale[i]
    heights = frame.host.values @ u
    radius = float(top - heights.max())
    if radius <= constants.r:
        raise ValueError("factor %d is within r of its half-space" % i)
    deepest = int(np.ceil((top - heights.min()) / radius))
    masses = []
    for j in range(1, deepest + 1):
        band = _band_intervals(frame.host, u, top - (j + 1) * radius, top - j * radius)
        mass = _coset_mass(frame, i, band, hs.thresholds[i])
        masses.append(mass)
        share = (1 - constants.epsilon) ** ((j - 1) * radius) / constants.N
        if mass >= share:
            return SliceDecomposition(i, radius, j, tuple(band), tuple(masses), share)
    raise NoQualifyingSlice("factor %d: no slice meets its share (masses %s)"
                            % (i, ", ".join("%.3g" % m for m in masses)))


# -- the pipeline ----------------------------------------------------------------------


def _family_for(frame, i, multicurve, top, reach, n):
    """Tent family above ``top - 2 reach`` when one piece is long enough, else reflections."""
    u = frame.units[i]
    host = frame.host
    need = 8 * n * n * reach * reach
    for a, b in _band_intervals(host, u, top - 2 * reach, np.inf):
        if _perp_length(host, u, [(a, b)]) >= need:
            fam = build_surgery_family(host, u, (a, b), 2 * (2 * reach) ** 2, top - 2 * reach, n)
            return "tent", fam
    ts, cs, offset = [], [], 0.0
    for a, b in multicurve:
        piece = host.restrict(a, b)
        ts.append(piece.params)
        cs.append(offset + _perp_cumulative(piece, u))
        offset = cs[-1][-1]
    options = []
    if ts:
        ts, cs = np.concatenate(ts), np.concatenate(cs)
        cuts = [float(ts[0])]
        for k in range(1, n * n + 1):
            j = int(np.searchsorted(cs, k * need, side="left"))
            if j >= len(cs):
                break
            if j and cs[j] > cs[j - 1] and ts[j] > ts[j - 1]:
                w = (k * need - cs[j - 1]) / (cs[j] - cs[j - 1])
                cuts.append(float(ts[j - 1] + w * (ts[j] - ts[j - 1])))
            else:
                cuts.append(float(ts[j]))
        options = [reflection_option(host, u, lo, hi, top - reach)
                   for lo, hi in zip(cuts[:-1], cuts[1:])]
    if len(options) < n * n:
        raise CertificationFailure("reflection intervals", len(options), n * n)
    for opt in options:
        h = float(np.max(opt.replacement.values @ u))
        if h < top - HEIGHT_TOL:
            raise CertificationFailure("reflected height", h, top)
    return "reflection", SurgeryFamily(options)


def _option_record(opt):
    return {"start": opt.start, "end": opt.end, "passthrough": opt.passthrough,
            "params": opt.replacement.params.tolist(), "values": opt.replacement.values.tolist()}


def _option_from_record(rec):
    return PathSurgery(rec["start"], rec["end"], PiecewiseCurve(rec["params"], rec["values"]),
                       rec["passthrough"])


def _loop_record(lp):
    return {"location": lp.location, "params": lp.loop.params.tolist(),
            "values": lp.loop.values.tolist()}


def _loop_from_record(rec):
    return LoopSurgery(rec["location"], PiecewiseCurve(rec["params"], rec["values"]))


def _dedupe(values):
    keep = np.concatenate([[True], np.any(np.diff(values, axis=0) != 0, axis=1)])
    return values[keep]


def _emit(host, loops, picks, frame, hs, metric):
    xi = apply_surgeries(host, loops, picks)
    vertices = _dedupe(frame.unwhiten(xi.values))
    return xi, assemble_box_path(vertices, hs, metric)


def make_hsv(gamma, p, q, group, metric, constants, split=False):
    """Coarse half-space visiting box path from ``gamma`` and its audit trail.

    ``gamma`` runs from ``p`` to ``q``; with ``split`` its nodes are in split
    coordinates. Raises CertificationFailure naming the first inequality that
    the measured input does not satisfy.
    """
    n = group.n
    hs = half_spaces(p, q, group, metric)
    frame = _Frame(gamma, p, group, metric, split)
    host = frame.host
    end = np.asarray(hs.displacement.base) @ frame.R
    gap = float(np.max(np.abs(host.values[-1] - end)))
    if gap > 1e-8 or float(np.max(np.abs(host.values[0]))) > 1e-8:
        raise CertificationFailure("endpoint match", gap, 0.0)
    finite = hs.finite
    tops = {i: hs.thresholds[i] / frame.scale[i] for i in finite}
    heights = {i: host.values @ frame.units[i] for i in finite}
    radii = {i: max(0.0, float(tops[i] - heights[i].max())) for i in finite}
    active = sorted((i for i in finite if radii[i] > constants.r), key=lambda i: (-radii[i], i))

    def loop_for(i):
        t = float(host.params[int(np.argmax(heights[i]))])
        w = host(t)
        return loop_surgery(host, t, [w + radii[i] * frame.units[i]])

    trail = {"group": group_to_dict(group), "metric": metric_to_dict(metric),
             "split": bool(split), "p": _element_record(p), "q": _element_record(q),
             "input": frame.points.tolist(), "constants": asdict(constants),
             "thresholds": [float(x) for x in hs.thresholds],
             "radii": {str(i): radii[i] for i in finite}, "active": list(active),
             "host": {"params": host.params.tolist(), "values": host.values.tolist()},
             "steps": []}
    keep = retention(n)
    slices = {i: slice_curve(frame, hs, constants, i) for i in active}
    families, picks = [], []
    for step, i in enumerate(active, start=1):
        sl = slices[i]
        record = {"factor": i, "radius": sl.radius, "slice": sl.index,
                  "slice_masses": list(sl.masses), "share": sl.target}
        holes = [(pk.start, pk.end) for pk in picks]
        multicurve = _subtract(sl.intervals, holes)
        mass = _coset_mass(frame, i, multicurve, hs.thresholds[i])
        record["retained_mass"] = mass
        if step > 1 and mass < sl.target * keep:
            raise CertificationFailure("retained slice mass", mass, sl.target * keep)
        reach = (sl.index + 1) * sl.radius
        perp = _perp_length(host, frame.units[i], multicurve)
        need = (n * n + 1) * 8 * n * n * reach ** 2
        record.update(perpendicular=perp, perpendicular_required=need)
        if perp < need:
            raise CertificationFailure("perpendicular arclength", perp, need)
        kind, fam = _family_for(frame, i, multicurve, tops[i], reach, n)
        for opt in fam.options:
            extra = opt.replacement.length() - host.restrict(opt.start, opt.end).length()
            if extra > 1 + 1e-9:
                raise CertificationFailure("option lengthening", extra, 1.0)
        families.append(fam)
        pending = [loop_for(j) for j in finite if j not in active[:step]]
        following = active[step] if step < len(active) else None

        def prefer(f, opt, nxt=following):
            # options covering little of the next slice come first
            if nxt is None:
                return 0.0
            inside = _subtract(slices[nxt].intervals, [(-np.inf, opt.start), (opt.end, np.inf)])
            return _perp_length(host, frame.units[nxt], inside)

        try:
            sel = select_simultaneous(host, pending, families, n, prefer=prefer)
        except SelectionImpossible as exc:
            raise CertificationFailure("simultaneous selection: %s" % exc, 0, 1) from exc
        picks = list(sel.picks)
        record.update(kind=kind, family=[_option_record(o) for o in fam.options],
                      selection=list(sel.indices), survivors=list(sel.survivor_counts))
        trail["steps"].append(record)
    loops = [loop_for(j) for j in finite if j not in active]
    xi, box = _emit(host, loops, picks, frame, hs, metric)
    for i in finite:
        reached = float(np.max(xi.values @ frame.units[i]))
        if reached < tops[i] - HEIGHT_TOL * max(1.0, abs(tops[i])):
            raise CertificationFailure("half-space %d visit" % i, reached, tops[i])
    input_length = path_length(gamma, metric, rtol=1e-6, split=split)
    output_length = box.length
    bound = input_length + constants.K + LENGTH_SLACK
    if output_length > bound:
        raise CertificationFailure("length bound", output_length, bound)
    trail.update(loops=[_loop_record(lp) for lp in loops],
                 picks=[_option_record(pk) for pk in picks],
                 input_length=input_length, output_length=output_length, K=constants.K,
                 output=box.path.points.tolist())
    return box, trail


def dumps_trail(trail):
    return json.dumps(trail, sort_keys=True) + "\n"


def _element_record(g):
    return {"nil": [h.tolist() for h in g.nil], "base": g.base.tolist()}


def replay(trail):
    """Re-apply the recorded surgeries; returns the box path and whether it matches bit for bit."""
    group = group_from_dict(trail["group"])
    metric = SplitMetric(group, np.array(trail["metric"]["gram"], dtype=float))
    p = GroupElement(trail["p"]["nil"], trail["p"]["base"])
    q = GroupElement(trail["q"]["nil"], trail["q"]["base"])
    gamma = PiecewisePath(np.array(trail["input"]), group)
    frame = _Frame(gamma, p, group, metric, trail["split"])
    host = PiecewiseCurve(trail["host"]["params"], trail["host"]["values"])
    hs = half_spaces(p, q, group, metric)
    loops = [_loop_from_record(r) for r in trail["loops"]]
    picks = [_option_from_record(r) for r in trail["picks"]]
    _, box = _emit(host, loops, picks, frame, hs, metric)
    same = (np.array_equal(host.values, frame.host.values)
            and np.array_equal(box.path.points, np.array(trail["output"])))
    return box, bool(same)


def replays_identically(trail):
    _, same = replay(json.loads(dumps_trail(trail)))
    return same
