"""
Higher-rank Sol-type groups ``N_1 x ... x N_n  (semidirect)  R^k``.

Points are stored in exponential coordinates of the nilpotent factors plus
a base vector in R^k, so ``(h, v)`` stands for ``h . s(v)``.  The base acts
on factor ``i`` through ``exp(alpha_i(v) D_i)``.
"""

import json
from dataclasses import dataclass

import numpy as np

TOL = 1e-12
CLUSTER_TOL = 1e-8
MAX_BASIS_COND = 1e8


def matrix_exp(A, degree=18):
    """Matrix exponential of a stack of matrices by scaling and squaring a Taylor sum."""
    A = np.asarray(A, dtype=float)
    norm = np.max(np.sum(np.abs(A), axis=-2), axis=-1) if A.size else np.zeros(A.shape[:-2])
    squarings = int(max(0, np.ceil(np.log2(max(float(np.max(norm, initial=0.0)), 1e-300)) + 1)))
    X = A / 2.0 ** squarings
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape)
    out, term = eye.copy(), eye.copy()
    for k in range(1, degree + 1):
        term = term @ X / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


class GroupError(ValueError):
    pass


class NonDerivation(GroupError):
    pass


class NonPositiveEigenvalue(GroupError):
    pass


class JacobiViolation(GroupError):
    pass


class UnsupportedStep(GroupError):
    pass


class IllConditioned(GroupError):
    pass


class NotHigherRank(GroupError):
    pass


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class NilpotentFactor:
    """One nilpotent factor: structure constants and a derivation.

    ``structure[k, i, j]`` is the coefficient of ``e_k`` in ``[e_i, e_j]``.
    """

    def __init__(self, derivation, structure=None):
        D = np.atleast_2d(np.array(derivation, dtype=float))
        if D.shape[0] != D.shape[1]:
            raise GroupError("derivation must be square, got shape %s" % (D.shape,))
        d = D.shape[0]
        if structure is None:
            structure = np.zeros((d, d, d))
        c = np.array(structure, dtype=float)
        if c.shape != (d, d, d):
            raise GroupError("structure constants must have shape %s" % ((d, d, d),))
        self.derivation = _frozen(D)
        self.structure = _frozen(c)
        self._abelian = not np.any(c)
        self._diag = None
        if np.count_nonzero(D - np.diag(np.diag(D))) == 0:
            self._diag = _frozen(np.diag(D))

    @property
    def dim(self):
        return self.derivation.shape[0]

    @property
    def is_abelian(self):
        return self._abelian

    @property
    def step(self):
        if self.is_abelian:
            return 1
        c = self.structure
        nested = np.einsum("mab,kmc->kabc", c, c)
        return 2 if np.max(np.abs(nested)) <= TOL else 3

    def bracket(self, x, y):
        """Lie bracket, broadcasting over leading axes."""
        if self.is_abelian:
            return np.zeros(np.broadcast(x, y).shape)
        return np.einsum("kij,...i,...j->...k", self.structure, x, y)

    def bch(self, x, y):
        """``log(exp x exp y)`` for step at most two."""
        if self.is_abelian:
            return x + y
        return x + y + 0.5 * self.bracket(x, y)

    def flow(self, t):
        """``exp(t D)`` for an array of times; returns shape ``t.shape + (d, d)``."""
        t = np.asarray(t, dtype=float)
        if self._diag is not None:
            out = np.zeros(t.shape + (self.dim, self.dim))
            idx = np.arange(self.dim)
            out[..., idx, idx] = np.exp(t[..., None] * self._diag)
            return out
        plan = self._flow_plan()
        if plan is None:
            return matrix_exp(t[..., None, None] * self.derivation)
        P, P_inv, rates, nu_powers, pairs = plan
        inner = np.zeros(t.shape + (self.dim, self.dim))
        coef = np.ones_like(t)
        for k, Nk in enumerate(nu_powers):
            if k:
                coef = coef * t / k
            inner = inner + coef[..., None, None] * Nk
        if pairs:
            rot = np.broadcast_to(np.eye(self.dim), inner.shape).copy()
            for x, y, b in pairs:
                c, s = np.cos(b * t), np.sin(b * t)
                rot[..., x, x], rot[..., x, y] = c, s
                rot[..., y, x], rot[..., y, y] = -s, c
            inner = rot @ inner
        inner = np.exp(t[..., None] * rates)[..., :, None] * inner
        return P @ inner @ P_inv

    def _flow_plan(self):
        if not hasattr(self, "_plan"):
            try:
                jf = absolute_jordan_form(self.derivation)
            except IllConditioned:
                plan = None
            else:
                powers = [np.eye(self.dim)]
                while np.any(powers[-1]) and len(powers) < self.dim:
                    nxt = powers[-1] @ jf.nu
                    if not np.any(nxt):
                        break
                    powers.append(nxt)
                pairs = [(x, x + 1, jf.sigma[x, x + 1]) for x in range(self.dim - 1)
                         if jf.sigma[x, x + 1] != 0.0 and (x == 0 or jf.sigma[x - 1, x] == 0.0)]
                plan = (jf.basis, np.linalg.inv(jf.basis), np.diag(jf.delta).copy(),
                        powers, pairs)
            object.__setattr__(self, "_plan", plan)
        return self._plan

    def act(self, t, h):
        """``exp(t D) h`` with ``t`` of shape (...) and ``h`` of shape (..., d)."""
        t = np.asarray(t, dtype=float)
        if self._diag is not None:
            return np.exp(t[..., None] * self._diag) * h
        return np.einsum("...ij,...j->...i", self.flow(t), h)

    def __eq__(self, other):
        return (isinstance(other, NilpotentFactor)
                and np.array_equal(self.derivation, other.derivation)
                and np.array_equal(self.structure, other.structure))

    def __hash__(self):
        return hash((self.derivation.tobytes(), self.structure.tobytes()))

    def __repr__(self):
        return "NilpotentFactor(dim=%d, step=%d)" % (self.dim, self.step)


class SolTypeGroup:
    """Algebraic data of ``prod N_i  (semidirect)  R^k``.

    ``roots`` is an ``(n, k)`` array; row ``i`` holds the coefficients of
    ``alpha_i``.
    """

    def __init__(self, factors, roots, normalized=False):
        self.factors = tuple(factors)
        roots = np.atleast_2d(np.array(roots, dtype=float))
        if roots.shape[0] != len(self.factors):
            raise GroupError("need one root per factor")
        self.roots = _frozen(roots)
        self.normalized = normalized
        dims = [f.dim for f in self.factors]
        self.offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(dims)]))

    @property
    def rank(self):
        return self.roots.shape[1]

    @property
    def n(self):
        return len(self.factors)

    @property
    def nil_dim(self):
        return self.offsets[-1]

    @property
    def dim(self):
        return self.nil_dim + self.rank

    def block(self, i):
        return slice(self.offsets[i], self.offsets[i + 1])

    def identity(self):
        return GroupElement([np.zeros(f.dim) for f in self.factors], np.zeros(self.rank))

    def __eq__(self, other):
        return (isinstance(other, SolTypeGroup) and self.factors == other.factors
                and np.array_equal(self.roots, other.roots))

    def __hash__(self):
        return hash((self.factors, self.roots.tobytes()))

    def __repr__(self):
        return "SolTypeGroup(rank=%d, factors=%r)" % (self.rank, self.factors)


class GroupElement:
    """``(h, v)`` meaning ``h . s(v)``."""

    __slots__ = ("nil", "base")

    def __init__(self, nil, base):
        nil = tuple(_frozen(np.atleast_1d(h)) for h in nil)
        base = _frozen(np.atleast_1d(base))
        if not all(np.all(np.isfinite(h)) for h in nil) or not np.all(np.isfinite(base)):
            raise GroupError("coordinates must be finite")
        object.__setattr__(self, "nil", nil)
        object.__setattr__(self, "base", base)

    def __setattr__(self, name, value):
        raise AttributeError("GroupElement is immutable")

    def __reduce__(self):
        return (GroupElement, ([np.array(h) for h in self.nil], np.array(self.base)))

    def flat(self):
        return np.concatenate(list(self.nil) + [self.base])

    @classmethod
    def from_flat(cls, x, group):
        x = np.asarray(x, dtype=float)
        return cls([x[group.block(i)] for i in range(group.n)], x[group.nil_dim:])

    def __eq__(self, other):
        return (isinstance(other, GroupElement) and len(self.nil) == len(other.nil)
                and all(np.array_equal(a, b) for a, b in zip(self.nil, other.nil))
                and np.array_equal(self.base, other.base))

    def __hash__(self):
        return hash(self.flat().tobytes())

    def __repr__(self):
        return "GroupElement(nil=%s, base=%s)" % ([h.tolist() for h in self.nil], self.base.tolist())


@dataclass(frozen=True)
class ValidationReport:
    group: SolTypeGroup
    scales: tuple
    eigenvalues: tuple
    steps: tuple


def _check_factor(i, f):
    c = f.structure
    if np.max(np.abs(c + np.transpose(c, (0, 2, 1))), initial=0.0) > TOL:
        raise JacobiViolation("factor %d: structure constants are not antisymmetric" % i)
    nested = np.einsum("mab,kmc->kabc", c, c)
    jac = nested + np.transpose(nested, (0, 2, 3, 1)) + np.transpose(nested, (0, 3, 1, 2))
    if np.max(np.abs(jac), initial=0.0) > TOL:
        raise JacobiViolation("factor %d: Jacobi residual %.3e" % (i, np.max(np.abs(jac))))
    D = f.derivation
    lhs = np.einsum("km,mab->kab", D, c)
    rhs = np.einsum("ma,kmb->kab", D, c) + np.einsum("mb,kam->kab", D, c)
    res = np.max(np.abs(lhs - rhs), initial=0.0)
    if res > TOL:
        raise NonDerivation("factor %d: derivation residual %.3e" % (i, res))
    eig = np.linalg.eigvals(D)
    if np.min(eig.real) <= TOL:
        raise NonPositiveEigenvalue(
            "factor %d: eigenvalue with real part %.6g" % (i, np.min(eig.real)))
    return eig


def validate(group):
    """Check the defining identities and return a normalized copy.

    Each derivation and its root are rescaled jointly so that the smallest
    real part of an eigenvalue is 1.
    """
    if group.rank < 2:
        raise NotHigherRank("rank must be at least 2, got %d" % group.rank)
    factors, roots, scales, eigs, steps = [], [], [], [], []
    for i, f in enumerate(group.factors):
        eig = _check_factor(i, f)
        if f.step > 2:
            raise UnsupportedStep("factor %d has nilpotency step above 2" % i)
        if not np.any(group.roots[i]):
            raise GroupError("factor %d: root is zero" % i)
        s = float(np.min(eig.real))
        factors.append(NilpotentFactor(f.derivation / s, f.structure))
        roots.append(group.roots[i] * s)
        scales.append(s)
        eigs.append(tuple(sorted(eig / s, key=lambda z: (z.real, z.imag))))
        steps.append(f.step)
    out = SolTypeGroup(factors, roots, normalized=True)
    return ValidationReport(out, tuple(scales), tuple(eigs), tuple(steps))


def _require_step(group):
    for i, f in enumerate(group.factors):
        if f.step > 2:
            raise UnsupportedStep("factor %d has nilpotency step above 2" % i)


def root_values(group, v):
    """``alpha_i(v)`` for all i; ``v`` of shape (..., k) gives (..., n)."""
    return np.asarray(v, dtype=float) @ group.roots.T


def multiply(a, b, group):
    """Group law ``(h1, v1)(h2, v2) = (h1 * exp(alpha(v1) D) h2, v1 + v2)``."""
    _require_step(group)
    t = root_values(group, a.base)
    nil = [f.bch(ha, f.act(t[i], hb))
           for i, (f, ha, hb) in enumerate(zip(group.factors, a.nil, b.nil))]
    return GroupElement(nil, a.base + b.base)


def inverse(a, group):
    _require_step(group)
    t = root_values(group, a.base)
    nil = [-f.act(-t[i], h) for i, (f, h) in enumerate(zip(group.factors, a.nil))]
    return GroupElement(nil, -a.base)


def relative(p, q, group):
    """``p^{-1} q``."""
    return multiply(inverse(p, group), q, group)


# -- absolute Jordan form -------------------------------------------------------


@dataclass(frozen=True)
class JordanForm:
    """``D = basis @ (delta + nu + sigma) @ inv(basis)``."""
    delta: np.ndarray
    nu: np.ndarray
    sigma: np.ndarray
    basis: np.ndarray
    blocks: tuple  # (start, size, real part, imag part, chain length)

    @property
    def absolute(self):
        return self.delta + self.nu

    @property
    def is_diagonalizable(self):
        return not np.any(self.nu) and not np.any(self.sigma)


def _null_space(M, tol):
    _, s, vh = np.linalg.svd(M)
    scale = max(1.0, s[0]) if s.size else 1.0
    rank = int(np.sum(s > tol * scale))
    return vh[rank:].conj().T


def _orth(M, tol):
    if M.shape[1] == 0:
        return M
    u, s, _ = np.linalg.svd(M, full_matrices=False)
    scale = max(1.0, s[0])
    return u[:, s > tol * scale]


def _jordan_chains(A, mult, tol):
    """Jordan chains of the nilpotent part of ``A`` on its generalized kernel."""
    d = A.shape[0]
    kernels = [np.zeros((d, 0), dtype=A.dtype)]
    power = np.eye(d, dtype=A.dtype)
    while kernels[-1].shape[1] < mult:
        power = power @ A
        ker = _null_space(power, tol)
        if ker.shape[1] <= kernels[-1].shape[1] or ker.shape[1] > mult or len(kernels) > mult:
            raise IllConditioned("Jordan structure ambiguous at tolerance %g" % tol)
        kernels.append(ker)
    chains = []
    p = len(kernels) - 1
    for j in range(p, 0, -1):
        existing = [ch[j - 1] for ch in chains if len(ch) >= j]
        known = np.column_stack([kernels[j - 1]] + existing) if existing else kernels[j - 1]
        q = _orth(known, tol)
        count = kernels[j].shape[1] - kernels[j - 1].shape[1] - len(existing)
        if count < 0:
            raise IllConditioned("inconsistent Jordan chain counts")
        if count == 0:
            continue
        rest = kernels[j] - q @ (q.conj().T @ kernels[j])
        u, s, _ = np.linalg.svd(rest, full_matrices=False)
        if s.size < count or s[count - 1] <= tol:
            raise IllConditioned("cannot extend Jordan chains")
        for c in range(count):
            w = u[:, c]
            chain = [w]
            for _ in range(j - 1):
                chain.insert(0, A @ chain[0])
            chains.append(chain)
    return chains


def _cluster(eig, tol):
    groups = []
    for z in sorted(eig, key=lambda z: (z.real, z.imag)):
        for g in groups:
            if any(abs(z - w) <= tol * max(1.0, abs(w)) for w in g):
                g.append(z)
                break
        else:
            groups.append([z])
    return groups


def absolute_jordan_form(D):
    """Real Jordan decomposition ``D = delta + nu + sigma`` in a computed basis."""
    D = np.atleast_2d(np.array(D, dtype=float))
    d = D.shape[0]
    scale = max(1.0, np.linalg.norm(D, 2))
    tol = CLUSTER_TOL
    eig = np.linalg.eigvals(D)
    columns, blocks = [], []
    for g in _cluster(eig, tol):
        lam = complex(np.mean(g))
        if abs(lam.imag) <= tol * max(1.0, abs(lam)):
            A = D - lam.real * np.eye(d)
            for ch in _jordan_chains(A, len(g), tol * scale):
                vecs = [np.real(w) for w in ch]
                blocks.append((sum(c.shape[1] for c in columns), len(vecs), lam.real, 0.0, len(vecs)))
                columns.append(np.column_stack(vecs))
        elif lam.imag > 0:
            A = D.astype(complex) - lam * np.eye(d)
            for ch in _jordan_chains(A, len(g), tol * scale):
                vecs = []
                for w in ch:
                    vecs += [w.real, w.imag]
                blocks.append((sum(c.shape[1] for c in columns), len(vecs), lam.real, lam.imag, len(ch)))
                columns.append(np.column_stack(vecs))
    P = np.column_stack(columns) if columns else np.zeros((d, 0))
    if P.shape[1] != d:
        raise IllConditioned("Jordan basis has %d of %d vectors" % (P.shape[1], d))
    if np.linalg.cond(P) > MAX_BASIS_COND:
        raise IllConditioned("Jordan basis condition number %.3e" % np.linalg.cond(P))
    delta, nu, sigma = np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d))
    for start, size, re, im, length in blocks:
        idx = np.arange(start, start + size)
        delta[idx, idx] = re
        if im == 0.0:
            for a in range(size - 1):
                nu[start + a, start + a + 1] = 1.0
        else:
            for a in range(length):
                x, y = start + 2 * a, start + 2 * a + 1
                sigma[x, y], sigma[y, x] = im, -im
                if a + 1 < length:
                    nu[x, x + 2] = 1.0
                    nu[y, y + 2] = 1.0
    resid = np.linalg.norm(P @ (delta + nu + sigma) - D @ P) / max(1.0, np.linalg.norm(P))
    if resid > 1e-8 * scale:
        raise IllConditioned("Jordan reconstruction residual %.3e" % resid)
    return JordanForm(delta, nu, sigma, P, tuple(blocks))


# -- file format ----------------------------------------------------------------


def group_to_dict(group):
    factors = []
    for f, root in zip(group.factors, group.roots):
        entry = {"dim": f.dim, "derivation": f.derivation.tolist(), "root": root.tolist()}
        if not f.is_abelian:
            triples = []
            for i in range(f.dim):
                for j in range(i + 1, f.dim):
                    for k in range(f.dim):
                        if f.structure[k, i, j] != 0.0:
                            triples.append([i, j, k, float(f.structure[k, i, j])])
            entry["structure_constants"] = triples
        factors.append(entry)
    return {"rank": group.rank, "factors": factors}


def group_from_dict(data):
    factors, roots = [], []
    for entry in data["factors"]:
        d = int(entry["dim"])
        c = np.zeros((d, d, d))
        for i, j, k, val in entry.get("structure_constants", []):
            c[int(k), int(i), int(j)] = val
            c[int(k), int(j), int(i)] = -val
        D = np.array(entry["derivation"], dtype=float).reshape(d, d)
        factors.append(NilpotentFactor(D, c))
        roots.append(entry["root"])
    roots = np.array(roots, dtype=float).reshape(len(factors), int(data["rank"]))
    return SolTypeGroup(factors, roots)


def dumps_group(group):
    return json.dumps(group_to_dict(group), indent=2) + "\n"


def save_group(group, path):
    with open(path, "w") as fh:
        fh.write(dumps_group(group))


def load_group(path):
    with open(path) as fh:
        return group_from_dict(json.load(fh))
