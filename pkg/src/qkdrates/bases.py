"""Measurement basis families: exact mutually unbiased bases for prime
and prime-power dimensions, a numerical optimizer for dimensions without
known exact constructions, and the fixed five-basis overlap family.

Bases are stored as unitary matrices whose columns are the basis vectors.
Every constructor applies the same phase convention, first nonzero entry
of each column real and positive, so outputs are deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BasisSet:
    """A family of n orthonormal bases in dimension d."""

    d: int
    n: int
    unitaries: tuple

    def __post_init__(self):
        mats = tuple(np.asarray(u, dtype=complex) for u in self.unitaries)
        if len(mats) != self.n:
            raise ValueError("basis count does not match n")
        eye = np.eye(self.d)
        for u in mats:
            if u.shape != (self.d, self.d):
                raise ValueError("basis matrix has wrong shape")
            dev = np.abs(u.conj().T @ u - eye).max()
            if dev > 1e-9:
                raise ValueError(f"basis matrix not unitary, deviation {dev:.3e}")
        object.__setattr__(self, "unitaries", mats)

    def projectors(self, k: int) -> list:
        """Rank-one projectors onto the vectors of basis k."""
        u = self.unitaries[k]
        return [np.outer(u[:, i], u[:, i].conj()) for i in range(self.d)]

    def to_json(self) -> str:
        payload = {
            "d": self.d,
            "n": self.n,
            "bases": [
                [[[float(z.real), float(z.imag)] for z in u[:, i]] for i in range(self.d)]
                for u in self.unitaries
            ],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BasisSet":
        payload = json.loads(text)
        d, n = int(payload["d"]), int(payload["n"])
        mats = []
        for vecs in payload["bases"]:
            u = np.zeros((d, d), dtype=complex)
            for i, vec in enumerate(vecs):
                u[:, i] = [re + 1j * im for re, im in vec]
            mats.append(u)
        return cls(d=d, n=n, unitaries=tuple(mats))


def _phase_fix(u: np.ndarray) -> np.ndarray:
    """Rotate each column so its first nonzero entry is real positive."""
    u = np.array(u, dtype=complex)
    for i in range(u.shape[1]):
        col = u[:, i]
        idx = np.nonzero(np.abs(col) > 1e-12)[0][0]
        u[:, i] = col * (np.abs(col[idx]) / col[idx])
    return u


def unbiasedness_defect(bs: BasisSet) -> float:
    """Largest deviation of any cross-basis squared overlap from 1/d."""
    worst = 0.0
    for k in range(bs.n):
        for l in range(k + 1, bs.n):
            g = bs.unitaries[k].conj().T @ bs.unitaries[l]
            worst = max(worst, np.abs(np.abs(g) ** 2 - 1.0 / bs.d).max())
    return float(worst)


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    f = 2
    while f * f <= n:
        if n % f == 0:
            return False
        f += 1
    return True


class _GF2k:
    """Arithmetic in GF(2^k) with a fixed irreducible polynomial."""

    def __init__(self, k: int, poly: int):
        self.k, self.size, self.poly = k, 2**k, poly

    def mul(self, a: int, b: int) -> int:
        r = 0
        while b:
            if b & 1:
                r ^= a
            b >>= 1
            a <<= 1
            if a & self.size:
                a ^= self.poly
        return r

    def trace(self, x: int) -> int:
        s, y = 0, x
        for _ in range(self.k):
            s ^= y
            y = self.mul(y, y)
        return s & 1


class _GF9:
    """Arithmetic in GF(9) as F3[t] / (t^2 + 1), elements (c0, c1)."""

    size = 9

    @staticmethod
    def element(i: int):
        return (i % 3, i // 3)

    @staticmethod
    def mul(a, b):
        return ((a[0] * b[0] - a[1] * b[1]) % 3, (a[0] * b[1] + a[1] * b[0]) % 3)

    @staticmethod
    def add(a, b):
        return ((a[0] + b[0]) % 3, (a[1] + b[1]) % 3)

    @classmethod
    def trace(cls, x) -> int:
        # x + x^3, and cubing sends t to -t
        return (2 * x[0]) % 3


def _mub_qubit() -> list:
    z = np.eye(2, dtype=complex)
    x = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
    y = np.array([[1, 1], [1j, -1j]], dtype=complex) / np.sqrt(2)
    return [z, x, y]


def _mub_odd_prime(p: int) -> list:
    omega = np.exp(2j * np.pi / p)
    xs = np.arange(p)
    mats = [np.eye(p, dtype=complex)]
    for k in range(p):
        u = np.zeros((p, p), dtype=complex)
        for j in range(p):
            u[:, j] = omega ** ((k * xs * xs + j * xs) % p) / np.sqrt(p)
        mats.append(u)
    return mats


def _mub_gf9() -> list:
    omega = np.exp(2j * np.pi / 3)
    gf = _GF9
    elems = [gf.element(i) for i in range(9)]
    mats = [np.eye(9, dtype=complex)]
    for a in elems:
        u = np.zeros((9, 9), dtype=complex)
        for j, b in enumerate(elems):
            for xi, x in enumerate(elems):
                e = gf.add(gf.mul(a, gf.mul(x, x)), gf.mul(b, x))
                u[xi, j] = omega ** gf.trace(e) / 3.0
        mats.append(u)
    return mats


def _mub_even_prime_power(k: int, poly: int) -> list:
    """Joint eigenbases of the commuting displacement classes in d = 2^k.

    The displacement operators X_a Z_b split into d + 1 abelian classes:
    the Z class and, for each field slope, the class with b proportional
    to a. Each class is diagonalized by the eigenbasis of a random
    Hermitian combination of its elements; a fixed seed and a final
    unbiasedness verification make the result deterministic and exact.
    """
    gf = _GF2k(k, poly)
    d = gf.size
    xs = np.arange(d)

    def x_op(a):
        m = np.zeros((d, d), dtype=complex)
        m[xs ^ a, xs] = 1.0
        return m

    def z_op(b):
        return np.diag([(-1.0) ** gf.trace(gf.mul(b, x)) for x in xs]).astype(complex)

    # the Z class is diagonal already, its eigenbasis is the computational one
    classes = []
    for lam in range(d):
        classes.append([x_op(a) @ z_op(gf.mul(lam, a)) for a in range(1, d)])

    rng = np.random.default_rng(20240 + d)
    mats = [np.eye(d, dtype=complex)]
    for ops in classes:
        coeff = rng.normal(size=len(ops)) + 1j * rng.normal(size=len(ops))
        h = sum(c * op for c, op in zip(coeff, ops))
        h = h + h.conj().T
        _, vec = np.linalg.eigh(h)
        mats.append(vec)
    return mats


_EVEN_POLY = {4: 0b111, 8: 0b1011}


def mub_set(d: int, n=None) -> BasisSet:
    """Maximal family of mutually unbiased bases in dimension d.

    Supports d in {2, 3, 4, 5, 7, 8, 9}, returning d + 1 bases (or the
    first n of them). Dimensions without a known exact construction
    should go through approximate_mubs instead.
    """
    if d == 2:
        mats = _mub_qubit()
    elif _is_prime(d):
        mats = _mub_odd_prime(d)
    elif d in _EVEN_POLY:
        mats = _mub_even_prime_power(d.bit_length() - 1, _EVEN_POLY[d])
    elif d == 9:
        mats = _mub_gf9()
    else:
        raise ValueError(
            f"no exact construction for d={d}, use approximate_mubs")
    mats = [_phase_fix(u) for u in mats]
    if n is not None:
        if not 1 <= n <= len(mats):
            raise ValueError(f"requested {n} bases, construction yields {len(mats)}")
        mats = mats[:n]
    bs = BasisSet(d=d, n=len(mats), unitaries=tuple(mats))
    defect = unbiasedness_defect(bs)
    if defect > 1e-9:
        raise RuntimeError(f"construction failed unbiasedness check, defect {defect:.3e}")
    return bs


def overlap_bases(d: int) -> BasisSet:
    """The five-basis family measuring overlaps of neighbouring levels.

    Computational basis, then real and imaginary superpositions of the
    pairs (0,1), (2,3), ... and of the shifted pairs (1,2), (3,4), ...
    with the two end levels left alone. Requires even d >= 4.
    """
    if d < 4 or d % 2:
        raise ValueError("overlap family needs even dimension at least 4")
    s = 1.0 / np.sqrt(2)

    def paired(pairs, fixed, imag):
        u = np.zeros((d, d), dtype=complex)
        col = 0
        for i in fixed:
            u[i, col] = 1.0
            col += 1
        for i, j in pairs:
            amp = 1j * s if imag else s
            u[i, col] = s
            u[j, col] = amp
            u[i, col + 1] = s
            u[j, col + 1] = -amp
            col += 2
        return u

    aligned = [(2 * i, 2 * i + 1) for i in range(d // 2)]
    shifted = [(2 * i + 1, 2 * i + 2) for i in range(d // 2 - 1)]
    mats = [
        np.eye(d, dtype=complex),
        paired(aligned, [], imag=False),
        paired(aligned, [], imag=True),
        paired(shifted, [0, d - 1], imag=False),
        paired(shifted, [0, d - 1], imag=True),
    ]
    mats = [_phase_fix(u) for u in mats]
    return BasisSet(d=d, n=5, unitaries=tuple(mats))


def mub_objective(mats) -> float:
    """Mean squared deviation of cross-basis overlaps from unbiasedness.

    Accepts a BasisSet or a list of unitary matrices. Normalized so that
    a pair of identical bases scores exactly 1 and an exactly unbiased
    family scores 0.
    """
    if isinstance(mats, BasisSet):
        mats = mats.unitaries
    d = mats[0].shape[0]
    n = len(mats)
    total = 0.0
    for k in range(n):
        for l in range(k + 1, n):
            g = mats[k].conj().T @ mats[l]
            total += ((np.abs(g) ** 2 - 1.0 / d) ** 2).sum()
    pairs = n * (n - 1) // 2
    return float(total / ((d - 1) * pairs))


def _objective_and_grads(mats):
    """Objective value and Euclidean conjugate gradients per basis."""
    d = mats[0].shape[0]
    n = len(mats)
    scale = 1.0 / ((d - 1) * (n * (n - 1) // 2))
    grads = [np.zeros((d, d), dtype=complex) for _ in range(n)]
    total = 0.0
    for k in range(n):
        for l in range(k + 1, n):
            g = mats[k].conj().T @ mats[l]
            dev = np.abs(g) ** 2 - 1.0 / d
            total += (dev**2).sum() * scale
            dmat = 2.0 * scale * dev * g
            grads[l] += mats[k] @ dmat
            grads[k] += mats[l] @ dmat.conj().T
    return total, grads


def _unitary_exp(h: np.ndarray) -> np.ndarray:
    lam, vec = np.linalg.eigh(h)
    return (vec * np.exp(-1j * lam)) @ vec.conj().T


def _descend(mats, maxiter: int, gtol: float):
    """Riemannian gradient descent with backtracking on the unitary group.

    Steps are U <- U exp(-i eta G) with G the Hermitian projection of the
    gradient, so iterates stay exactly unitary; the accepted objective is
    nonincreasing by construction. The first basis stays frozen.
    """
    val, grads = _objective_and_grads(mats)
    eta = 1.0
    for _ in range(maxiter):
        riem = [None]
        gnorm2 = 0.0
        for b in range(1, len(mats)):
            m = mats[b].conj().T @ grads[b]
            g = (m - m.conj().T) / 2j
            riem.append(g)
            gnorm2 += (np.abs(g) ** 2).sum()
        if np.sqrt(gnorm2) < gtol:
            break
        accepted = False
        while eta > 1e-18:
            trial = [mats[0]]
            trial += [mats[b] @ _unitary_exp(eta * riem[b]) for b in range(1, len(mats))]
            tval, tgrads = _objective_and_grads(trial)
            if tval < val - 1e-4 * eta * gnorm2:
                mats, val, grads = trial, tval, tgrads
                eta = min(eta * 2.0, 1.0)
                accepted = True
                break
            eta /= 2.0
        if not accepted:
            break
    return mats, val


def approximate_mubs(d: int, n: int, restarts: int = 20, seed: int = 0,
                     maxiter: int = 5000, gtol: float = 1e-10):
    """Numerically search for n nearly unbiased bases in dimension d.

    Runs monotone Riemannian descent from seeded Haar-random starts and
    keeps the best restart, ties broken by lowest restart index.

    Returns:
        (BasisSet, objective) for the best restart.
    """
    if d < 2 or n < 2:
        raise ValueError("need d >= 2 and at least two bases")
    best_val, best_mats = np.inf, None
    for ss in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(ss)
        mats = [np.eye(d, dtype=complex)]
        for _ in range(n - 1):
            g = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
            q, r = np.linalg.qr(g)
            mats.append(q * (np.diag(r) / np.abs(np.diag(r))))
        mats, val = _descend(mats, maxiter, gtol)
        if val < best_val:
            best_val, best_mats = val, mats
    fixed = tuple(_phase_fix(u) for u in best_mats)
    return BasisSet(d=d, n=n, unitaries=fixed), float(best_val)


def select_independent(operators, threshold: float = 1e-8) -> list:
    """Indices of a maximal linearly independent subset of operators.

    Greedy in input order under the trace inner product: an operator is
    kept iff its residual after projecting onto the span of the kept ones
    exceeds the threshold relative to its own norm.
    """
    kept = []
    basis = []
    for idx, op in enumerate(operators):
        v = np.asarray(op, dtype=complex).reshape(-1)
        nrm = np.linalg.norm(v)
        if nrm <= threshold:
            continue
        r = v.copy()
        for b in basis:
            r = r - (b.conj() @ r) * b
        # second pass stabilizes near-dependent directions
        for b in basis:
            r = r - (b.conj() @ r) * b
        if np.linalg.norm(r) > threshold * nrm:
            kept.append(idx)
            basis.append(r / np.linalg.norm(r))
    return kept
