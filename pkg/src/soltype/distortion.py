"""Eventual exponential distortion constants for the nilpotent factors.

A factor is certified by ``(C, T, a)`` such that for every ``t >= T``
and every ``h`` in the factor::

    C * a**t * |h| <= |exp(t D) h|

where norms come from the restriction of the metric to the factor.
"""

from dataclasses import dataclass, field

import numpy as np

from .group_model import GroupError, absolute_jordan_form, matrix_exp


class NotDiagonalizable(GroupError):
    pass


@dataclass(frozen=True)
class FactorCertificate:
    C: float
    T: float
    a: float
    method: str
    details: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DistortionCertificate:
    factors: tuple
    C: float
    T: float
    a: float
    root_norms: tuple

    def as_dict(self):
        return {
            "C": self.C, "T": self.T, "a": self.a,
            "root_norms": list(self.root_norms),
            "factors": [dict(C=f.C, T=f.T, a=f.a, method=f.method, **f.details)
                        for f in self.factors],
        }


def _basis_ratio(P, G):
    """Singular values of the Jordan basis measured in the factor Gram."""
    L = np.linalg.cholesky(G)
    s = np.linalg.svd(L.T @ P, compute_uv=False)
    return float(s.min()), float(s.max())


def diagonalizable_constants(metric, i):
    """Constants for a factor whose derivation is diagonalizable over the reals."""
    f = metric.group.factors[i]
    jf = absolute_jordan_form(f.derivation)
    if not jf.is_diagonalizable:
        raise NotDiagonalizable("factor %d: derivation is not diagonalizable over R" % i)
    G = metric.factor_gram(i)
    P = jf.basis / np.sqrt(np.einsum("ij,ik,kj->j", jf.basis, G, jf.basis))
    Pinv = np.linalg.inv(P)
    eig_gram = Pinv.T @ Pinv
    # ratios |x|_eig / |x|_g are square roots of generalized eigenvalues
    L = np.linalg.cholesky(G)
    Linv = np.linalg.inv(L)
    mu = np.linalg.eigvalsh(Linv @ eig_gram @ Linv.T)
    lo, hi = float(np.sqrt(mu.min())), float(np.sqrt(mu.max()))
    rate = float(np.min(np.diag(jf.delta)))
    return FactorCertificate(lo / hi, 0.0, float(np.exp(rate)), "diagonalizable",
                             {"stretch_min": lo, "stretch_max": hi})


def _block_excess(t, lam, rate, length):
    """log of the inverse-block row sum minus the allowed decay."""
    t = np.asarray(t, dtype=float)
    terms = np.zeros_like(t)
    term = np.ones_like(t)
    for k in range(length):
        if k:
            term = term * t / k
        terms = terms + term
    return (rate / 2.0 - lam) * t + np.log(terms)


def block_threshold(lam, rate, length, tol=1e-12):
    """Smallest T with ``exp(-lam t) sum_{k<length} t^k/k! <= exp(-rate t / 2)`` for all t >= T."""
    if length <= 1:
        return 0.0
    gap = lam - rate / 2.0
    t_end = (length - 1) / gap + 1.0
    while _block_excess(t_end, lam, rate, length) > 0:
        t_end *= 2.0
    grid = np.linspace(0.0, t_end, 4001)
    vals = _block_excess(grid, lam, rate, length)
    pos = np.nonzero(vals[1:] > 0)[0]
    if pos.size == 0:
        return 0.0
    j = pos[-1] + 1
    lo, hi = grid[j], grid[j + 1]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _block_excess(mid, lam, rate, length) > 0:
            lo = mid
        else:
            hi = mid
    return float(hi)


def sigma_band(sigma, t_max=20.0, steps=201):
    """Smallest and largest operator norm of ``exp(t sigma)`` on a grid."""
    norms = [np.linalg.norm(matrix_exp(t * sigma), 2) for t in np.linspace(0.0, t_max, steps)]
    return float(min(norms)), float(max(norms))


def jordan_constants(metric, i):
    """Constants for a general derivation, decaying at half the slowest rate."""
    f = metric.group.factors[i]
    jf = absolute_jordan_form(f.derivation)
    rate = float(np.min(np.diag(jf.delta)))
    T = max(block_threshold(re, rate, length) for _, _, re, _, length in jf.blocks)
    s_lo, s_hi = _basis_ratio(jf.basis, metric.factor_gram(i))
    b_lo, b_hi = sigma_band(jf.sigma)
    C = (s_lo / s_hi) * (b_lo / b_hi)
    return FactorCertificate(C, T, float(np.exp(rate / 2.0)), "jordan", {
        "basis_singular_min": s_lo, "basis_singular_max": s_hi,
        "sigma_band_min": b_lo, "sigma_band_max": b_hi, "rate": rate,
        "blocks": [list(b) for b in jf.blocks]})


def factor_certificate(metric, i):
    try:
        return diagonalizable_constants(metric, i)
    except NotDiagonalizable:
        return jordan_constants(metric, i)


def uniform_certificate(metric):
    """Combine the factor certificates into constants in base-distance units."""
    certs = tuple(factor_certificate(metric, i) for i in range(metric.group.n))
    norms = tuple(float(x) for x in metric.rates)
    C = min(c.C for c in certs)
    T = max(c.T / a for c, a in zip(certs, norms))
    a = min(c.a ** s for c, s in zip(certs, norms))
    return DistortionCertificate(certs, C, T, a, norms)


def worst_slack(metric, i, cert, times, vectors):
    """Largest ``C a^t |h| - |exp(t D) h|`` over the given samples (should be <= 0)."""
    f = metric.group.factors[i]
    img = f.act(np.asarray(times), vectors)
    lhs = cert.C * cert.a ** np.asarray(times) * metric.factor_norm(i, vectors)
    return float(np.max(lhs - metric.factor_norm(i, img)))
