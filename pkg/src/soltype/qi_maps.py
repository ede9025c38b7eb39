"""Product quasi-isometries ``L_x . prod f_i . sigma`` and rough-isometry testing."""

import json
from dataclasses import dataclass

import numpy as np

from .boxpath import BoxPath
from .group_model import GroupElement, GroupError, multiply
from .harness import estimate_distance, parallel_map, sample_pairs, slope
from .splitting_metric import PiecewisePath

ROOT_TOL = 1e-12
BOUNDED_SLOPE = 0.02
GROWTH_SLOPE = 0.1
MIN_SCALES = 5


class InvalidSymmetry(GroupError):
    pass


class NontrivialSymmetry(ValueError):
    pass


@dataclass(frozen=True)
class Symmetry:
    """Factor ``i`` goes to factor ``permutation[i]`` through ``blocks[i]``; base through ``base``."""

    permutation: tuple
    blocks: tuple
    base: np.ndarray

    @classmethod
    def identity(cls, group):
        return cls(tuple(range(group.n)), tuple(np.eye(f.dim) for f in group.factors),
                   np.eye(group.rank))

    def is_identity(self):
        return (self.permutation == tuple(range(len(self.permutation)))
                and all(np.array_equal(A, np.eye(len(A))) for A in self.blocks)
                and np.array_equal(self.base, np.eye(len(self.base))))


def check_symmetry(sym, group):
    """Raise unless the symmetry is an automorphism permuting roots and factors."""
    if sorted(sym.permutation) != list(range(group.n)):
        raise InvalidSymmetry("permutation %r is not a bijection" % (sym.permutation,))
    B = np.asarray(sym.base, dtype=float)
    if B.shape != (group.rank, group.rank):
        raise InvalidSymmetry("base map must be %dx%d" % (group.rank, group.rank))
    for i, j in enumerate(sym.permutation):
        err = np.max(np.abs(group.roots[j] @ B - group.roots[i]))
        if err > ROOT_TOL:
            raise InvalidSymmetry("root %d is not carried to root %d (error %.3e)" % (i, j, err))
        fi, fj = group.factors[i], group.factors[j]
        A = np.asarray(sym.blocks[i], dtype=float)
        if A.shape != (fj.dim, fi.dim):
            raise InvalidSymmetry("factor %d and factor %d have different dimensions" % (i, j))
        if np.max(np.abs(A @ fi.derivation - fj.derivation @ A)) > 1e-10:
            raise InvalidSymmetry("block %d does not intertwine the derivations" % i)
        lhs = np.einsum("ka,aij->kij", A, fi.structure)
        rhs = np.einsum("kab,ai,bj->kij", fj.structure, A, A)
        if np.max(np.abs(lhs - rhs), initial=0.0) > 1e-10:
            raise InvalidSymmetry("block %d does not preserve brackets" % i)
        if abs(np.linalg.det(A)) < 1e-12:
            raise InvalidSymmetry("block %d is singular" % i)


@dataclass(frozen=True)
class ProductQI:
    translation: GroupElement
    matrices: tuple
    offsets: tuple
    symmetry: Symmetry
    declared_k: float = None
    declared_c3: float = 0.0

    @classmethod
    def identity(cls, group):
        return cls(group.identity(), tuple(np.eye(f.dim) for f in group.factors),
                   tuple(np.zeros(f.dim) for f in group.factors), Symmetry.identity(group))


def _apply_split(qi, g, group):
    sym = qi.symmetry
    nil = [None] * group.n
    for i, j in enumerate(sym.permutation):
        nil[j] = sym.blocks[i] @ g.nil[i]
    nil = [A @ h + b for A, h, b in zip(qi.matrices, nil, qi.offsets)]
    moved = GroupElement(nil, sym.base @ g.base)
    return multiply(qi.translation, moved, group)


def apply(qi, g, group, metric=None):
    """Image of ``g``; the composition acts in split coordinates when a metric is given."""
    check_symmetry(qi.symmetry, group)
    if metric is None:
        return _apply_split(qi, g, group)
    return metric.from_split(_apply_split(qi, metric.to_split(g), group))


# -- file format ------------------------------------------------------------------


def _symmetry_from_dict(data, group):
    if data is None:
        return Symmetry.identity(group)
    base = np.array(data.get("base_matrix", np.eye(group.rank)), dtype=float)
    if "nil_matrix" in data:
        P = np.array(data["nil_matrix"], dtype=float)
        perm, blocks = [], []
        for i in range(group.n):
            col = P[:, group.block(i)]
            hits = [j for j in range(group.n) if np.any(col[group.block(j)])]
            if len(hits) != 1:
                raise InvalidSymmetry("nil matrix does not map factor %d into one factor" % i)
            perm.append(hits[0])
            blocks.append(col[group.block(hits[0])])
        if "permutation" in data and list(data["permutation"]) != perm:
            raise InvalidSymmetry("declared permutation disagrees with the nil matrix")
    else:
        perm = list(data.get("permutation", range(group.n)))
        blocks = [np.array(b, dtype=float) for b in data["blocks"]] if "blocks" in data else \
            [np.eye(group.factors[j].dim) for j in perm]
    sym = Symmetry(tuple(int(p) for p in perm), tuple(blocks), base)
    check_symmetry(sym, group)
    return sym


def qi_from_dict(data, group):
    tr = data.get("translation")
    x = group.identity() if tr is None else GroupElement(tr["nil"], tr["base"])
    maps = data.get("factor_maps")
    if maps is None:
        mats = tuple(np.eye(f.dim) for f in group.factors)
        offs = tuple(np.zeros(f.dim) for f in group.factors)
    else:
        mats = tuple(np.array(m.get("matrix", np.eye(f.dim)), dtype=float).reshape(f.dim, f.dim)
                     for m, f in zip(maps, group.factors))
        offs = tuple(np.array(m.get("offset", np.zeros(f.dim)), dtype=float)
                     for m, f in zip(maps, group.factors))
    return ProductQI(x, mats, offs, _symmetry_from_dict(data.get("symmetry"), group),
                     data.get("K"), float(data.get("C3", 0.0)))


def qi_to_dict(qi, group):
    nd = group.nil_dim
    P = np.zeros((nd, nd))
    for i, j in enumerate(qi.symmetry.permutation):
        P[group.block(j), group.block(i)] = qi.symmetry.blocks[i]
    out = {
        "translation": {"nil": [h.tolist() for h in qi.translation.nil],
                        "base": qi.translation.base.tolist()},
        "factor_maps": [{"matrix": A.tolist(), "offset": b.tolist()}
                        for A, b in zip(qi.matrices, qi.offsets)],
        "symmetry": {"permutation": list(qi.symmetry.permutation), "nil_matrix": P.tolist(),
                     "base_matrix": np.asarray(qi.symmetry.base).tolist()},
        "C3": qi.declared_c3,
    }
    if qi.declared_k is not None:
        out["K"] = qi.declared_k
    return out


def load_qi(path, group):
    with open(path) as fh:
        return qi_from_dict(json.load(fh), group)


def save_qi(qi, group, path):
    with open(path, "w") as fh:
        fh.write(json.dumps(qi_to_dict(qi, group), indent=2) + "\n")


# -- rough isometry testing -------------------------------------------------------


def _distance_pair_task(args):
    group, metric, pairs, budget = args
    return [estimate_distance(p, q, group, metric, budget).upper for p, q in pairs]


@dataclass(frozen=True)
class RoughIsometryReport:
    verdict: str
    rows: tuple
    slopes: dict
    witness: tuple
    max_relative_difference: float


def test_rough_isometry(qi, group, metric, separations, per_separation, seed, budget=4,
                        workers=1):
    """Compare distances before and after the map on random and base-direction pairs."""
    check_symmetry(qi.symmetry, group)
    pairs = [("random", s, p, q) for s, p, q in
             sample_pairs(group, metric, separations, per_separation, seed)]
    for axis in range(group.rank):
        for s in separations:
            v = np.zeros(group.rank)
            v[axis] = 1.0
            v = float(s) * v / metric.base_norm(v)
            q = GroupElement([np.zeros(f.dim) for f in group.factors], v)
            pairs.append(("e%d" % (axis + 1), float(s), group.identity(), metric.from_split(q)))
    tasks = [(group, metric, ((p, q), (apply(qi, p, group, metric), apply(qi, q, group, metric))),
              budget) for _, _, p, q in pairs]
    results = parallel_map(_distance_pair_task, tasks, workers)
    rows = []
    for j, ((series, s, _, _), (d, d_img)) in enumerate(zip(pairs, results)):
        rows.append({"pair": j, "series": series, "separation": s, "d": d, "d_image": d_img,
                     "difference": abs(d_img - d),
                     "relative": abs(d_img - d) / d if d > 0 else 0.0})
    slopes = {}
    for series in dict.fromkeys(r["series"] for r in rows):
        sub = [r for r in rows if r["series"] == series]
        scales = sorted({r["separation"] for r in sub})
        if len(scales) >= 2:
            slopes[series] = (slope([r["separation"] for r in sub],
                                    [r["difference"] for r in sub]), len(scales))
    growing = tuple(k for k, (sl, scales) in slopes.items()
                    if sl >= GROWTH_SLOPE and scales >= MIN_SCALES)
    if growing:
        verdict = "NOT_ROUGH_ISOMETRY"
    elif all(abs(sl) <= BOUNDED_SLOPE for sl, _ in slopes.values()):
        verdict = "ROUGH_ISOMETRY"
    else:
        verdict = "INCONCLUSIVE"
    rel = max(r["relative"] for r in rows)
    return RoughIsometryReport(verdict, tuple(rows), {k: v[0] for k, v in slopes.items()},
                               growing, rel)



# the name describes the experiment, not a pytest case
test_rough_isometry.__test__ = False


# -- pushing box paths forward ------------------------------------------------------


def _operator_norm(A, G):
    L = np.linalg.cholesky(G)
    return float(np.linalg.norm(L.T @ A @ np.linalg.inv(L.T), 2))


def jump_constant(qi, metric):
    """Bound on the image length of a unit jump, declared or derived."""
    if qi.declared_k is not None:
        return float(qi.declared_k)
    group = metric.group
    ks = []
    for i, (A, f) in enumerate(zip(qi.matrices, group.factors)):
        if np.max(np.abs(A @ f.derivation - f.derivation @ A)) > 1e-12 or not f.is_abelian:
            raise ValueError("factor %d map does not commute with the derivation; declare K" % i)
        ks.append(_operator_norm(A, metric.factor_gram(i)))
    return max(ks)


@dataclass(frozen=True)
class Pushforward:
    box: BoxPath
    length_before: float
    length_after: float
    bound: float


def boxpath_pushforward(qi, box, metric):
    """Image of a box path under a map with trivial symmetry; jumps reconnect straight."""
    group = metric.group
    if not qi.symmetry.is_identity():
        raise NontrivialSymmetry("pushforward needs the identity symmetry")
    images = [_apply_split(qi, box.path.element(j), group).flat() for j in range(len(box.path))]
    moved = PiecewisePath(np.array(images), group)
    out = BoxPath(moved, box.segments, metric, box.tour_length, box.jump_costs, box.order,
                  box.upper_bound)
    k = jump_constant(qi, metric)
    jumps = sum(1 for s in box.segments if s.kind == "jump")
    return Pushforward(out, box.length, out.length, jumps * (k + qi.declared_c3))
