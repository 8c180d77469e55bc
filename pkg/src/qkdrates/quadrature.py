"""Gauss-Radau quadrature on [0, 1] with a node fixed at the right endpoint.

The m-point rule integrates polynomials up to degree 2m - 2 exactly and is
the discretization underlying the entropy bound: the integrand 1/t is
approximated from below on (0, 1], which keeps the resulting key-rate
bounds valid lower bounds at every order m.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG2 = np.log(2.0)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of the m-point rule, last node pinned at 1."""

    m: int
    t: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        t, w = np.asarray(self.t, dtype=float), np.asarray(self.w, dtype=float)
        if len(t) != self.m or len(w) != self.m:
            raise ValueError("node and weight counts must equal m")
        if t[-1] != 1.0:
            raise ValueError(f"last node is {t[-1]!r}, must be exactly 1")
        if np.any(np.diff(t) <= 0.0) or t[0] <= 0.0:
            raise ValueError("nodes must be strictly increasing inside (0, 1]")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        if abs(w[-1] - 1.0 / self.m**2) > 1e-10:
            raise ValueError("endpoint weight must equal 1/m^2")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "w", w)

    def entropy_constant(self) -> float:
        """The additive constant sum_i w_i / (t_i ln 2) of the bound."""
        return float(np.sum(self.w / (self.t * LOG2)))


def gauss_radau(m: int) -> QuadratureRule:
    """Build the m-point Gauss-Radau rule on [0, 1] with t_m = 1.

    Uses the Jacobi matrix of the shifted Legendre polynomials with the
    last diagonal entry modified so that 1 becomes an eigenvalue, then
    reads nodes from the spectrum and weights from the first components
    of the eigenvectors.
    """
    if not 1 <= m <= 64:
        raise ValueError(f"m out of range: {m} (supported orders are 1..64)")
    # shifted-Legendre recurrence coefficients on [0, 1]
    alpha = np.full(m, 0.5)
    beta = np.zeros(m)
    beta[0] = 1.0
    k = np.arange(1, m)
    beta[1:] = k**2 / (4.0 * (4.0 * k**2 - 1.0))
    if m > 1:
        # evaluate the monic polynomials p_{m-2}, p_{m-1} at the fixed node
        pkm1, pk = 0.0, 1.0
        for j in range(m - 1):
            pnext = (1.0 - alpha[j]) * pk - beta[j] * pkm1
            pkm1, pk = pk, pnext
        alpha[m - 1] = 1.0 - beta[m - 1] * pkm1 / pk
    jac = np.diag(alpha)
    if m > 1:
        off = np.sqrt(beta[1:])
        jac += np.diag(off, 1) + np.diag(off, -1)
    t, vec = np.linalg.eigh(jac)
    w = beta[0] * vec[0, :] ** 2
    order = np.argsort(t)
    t, w = t[order], w[order]
    # the fixed node comes out of eigh with rounding dust, pin it
    t[-1] = 1.0
    w /= w.sum()
    return QuadratureRule(m=m, t=t, w=w)


def _legendre_shifted(x: float, n: int):
    """Value and derivative of the degree-n shifted Legendre polynomial."""
    if n == 0:
        return 1.0, 0.0
    u = 2.0 * x - 1.0
    pkm1, pk = 1.0, u
    dkm1, dk = 0.0, 1.0
    for j in range(1, n):
        pnext = ((2 * j + 1) * u * pk - j * pkm1) / (j + 1)
        dnext = ((2 * j + 1) * (pk + u * dk) - j * dkm1) / (j + 1)
        pkm1, pk = pk, pnext
        dkm1, dk = dk, dnext
    return pk, 2.0 * dk


def gauss_radau_newton(m: int) -> QuadratureRule:
    """Independent construction of the same rule via root finding.

    The interior nodes are the roots of P_n - P_{n+1} in shifted Legendre
    form, the combination that vanishes at the fixed right endpoint, and
    the weights follow from the classical endpoint formulas. Used to
    cross-check the Jacobi matrix construction.
    """
    if m < 1:
        raise ValueError("need at least one node")
    if m == 1:
        return QuadratureRule(m=1, t=np.array([1.0]), w=np.array([1.0]))
    n = m - 1

    def radau_poly(x):
        pn, dn = _legendre_shifted(x, n)
        pn1, dn1 = _legendre_shifted(x, n + 1)
        return pn - pn1, dn - dn1

    # bracket the n interior roots by sign changes, then polish with Newton
    grid = np.linspace(0.0, 1.0 - 1e-9, 200 * m)
    vals = np.array([radau_poly(x)[0] for x in grid])
    idx = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]
    if len(idx) != n:
        raise RuntimeError(f"expected {n} interior roots, bracketed {len(idx)}")
    roots = []
    for i in idx:
        x = 0.5 * (grid[i] + grid[i + 1])
        for _ in range(100):
            f, df = radau_poly(x)
            step = f / df
            x -= step
            if abs(step) < 1e-15:
                break
        roots.append(x)
    t = np.array(sorted(roots) + [1.0])
    w = np.zeros(m)
    for i in range(n):
        pn, _ = _legendre_shifted(t[i], n)
        w[i] = t[i] / (m**2 * pn**2)
    w[-1] = 1.0 / m**2
    return QuadratureRule(m=m, t=t, w=w)


def c_constant(rule: QuadratureRule) -> float:
    """Additive constant of the entropy bound for the given rule."""
    return rule.entropy_constant()
