"""Core quantum objects: operators, states, distributions, closed-form rates.

Everything works in natural matrix units with numpy complex arrays; the
thin wrapper types below exist to validate invariants once at construction
so downstream code can trust its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG2 = np.log(2.0)


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances shared across the package."""

    hermiticity: float = 1e-12
    trace: float = 1e-10
    psd_floor: float = -1e-10
    prob_sum: float = 1e-10
    prob_floor: float = -1e-12
    unitarity: float = 1e-9
    feasibility: float = 1e-8
    gap: float = 1e-8


DEFAULT_TOL = Tolerances()


def _as_complex(a) -> np.ndarray:
    m = np.asarray(a, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class HermitianOperator:
    """Square complex matrix validated to be Hermitian at construction."""

    entries: np.ndarray
    tol: Tolerances = field(default=DEFAULT_TOL, repr=False)

    def __post_init__(self):
        m = _as_complex(self.entries)
        scale = max(1.0, np.abs(m).max()) if m.size else 1.0
        dev = np.abs(m - m.conj().T).max() if m.size else 0.0
        if dev > self.tol.hermiticity * scale:
            raise ValueError(f"matrix is not Hermitian, deviation {dev:.3e}")
        object.__setattr__(self, "entries", (m + m.conj().T) / 2)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def eigvals(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian operator with unit trace and nonnegative spectrum."""

    base: HermitianOperator

    def __post_init__(self):
        tol = self.base.tol
        tr = np.trace(self.base.entries).real
        if abs(tr - 1.0) > tol.trace:
            raise ValueError(f"trace {tr!r} is not 1 within {tol.trace}")
        lo = self.base.eigvals().min()
        if lo < tol.psd_floor:
            raise ValueError(f"minimum eigenvalue {lo:.3e} below PSD floor")

    @classmethod
    def from_matrix(cls, m, tol: Tolerances = DEFAULT_TOL) -> "DensityMatrix":
        return cls(HermitianOperator(m, tol))

    @property
    def entries(self) -> np.ndarray:
        return self.base.entries

    @property
    def dim(self) -> int:
        return self.base.dim


@dataclass(frozen=True)
class JointDistribution:
    """Joint distribution p(a, b) over a pair of finite alphabets."""

    probs: np.ndarray
    tol: Tolerances = field(default=DEFAULT_TOL, repr=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError("joint distribution must be a 2d array")
        if p.min() < self.tol.prob_floor:
            raise ValueError(f"negative probability {p.min():.3e}")
        if abs(p.sum() - 1.0) > self.tol.prob_sum:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", np.clip(p, 0.0, None))

    @property
    def dims(self):
        return self.probs.shape


def kron_all(*ops) -> np.ndarray:
    """Kronecker product of a sequence of matrices, left to right."""
    out = np.asarray(ops[0], dtype=complex)
    for op in ops[1:]:
        out = np.kron(out, np.asarray(op, dtype=complex))
    return out


def partial_trace(m, dims, keep) -> np.ndarray:
    """Trace out all tensor factors except those listed in keep.

    Args:
        m: square matrix on the tensor product of subsystems with
            dimensions dims.
        dims: tuple of subsystem dimensions, in tensor order.
        keep: iterable of subsystem indices to retain, in tensor order.

    Returns:
        The reduced matrix on the kept subsystems.
    """
    m = _as_complex(m)
    dims = tuple(int(d) for d in dims)
    n = len(dims)
    if m.shape[0] != int(np.prod(dims)):
        raise ValueError("matrix size does not match subsystem dimensions")
    keep = sorted(set(int(k) for k in keep))
    if any(k < 0 or k >= n for k in keep):
        raise ValueError("keep index out of range")
    t = m.reshape(dims + dims)
    traced = 0
    for sub in range(n):
        if sub in keep:
            continue
        ax = sub - traced
        t = np.trace(t, axis1=ax, axis2=ax + (n - traced))
        traced += 1
    dk = int(np.prod([dims[k] for k in keep])) if keep else 1
    return t.reshape(dk, dk)


def isotropic_state(d: int, v: float) -> np.ndarray:
    """Mixture of the maximally entangled state with white noise.

    v is the visibility, the weight of the maximally entangled component.
    """
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"visibility {v} outside [0, 1]")
    phi = np.eye(d, dtype=complex).reshape(-1) / np.sqrt(d)
    rho = v * np.outer(phi, phi.conj())
    rho += (1.0 - v) * np.eye(d * d, dtype=complex) / d**2
    return rho


def key_joint_isotropic(d: int, v: float) -> np.ndarray:
    """Key-basis joint distribution of the isotropic state."""
    p = np.full((d, d), (1.0 - v) / d**2)
    p[np.diag_indices(d)] += v / d
    return p


def _xlog2x(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0.0
    out[pos] = x[pos] * np.log2(x[pos])
    return out


def shannon_entropy(p) -> float:
    """Shannon entropy in bits, with the 0 log 0 = 0 convention."""
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    return float(-_xlog2x(p).sum())


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    return shannon_entropy([p, 1.0 - p])


def conditional_entropy(joint) -> float:
    """H(A|B) in bits from a joint distribution p(a, b)."""
    p = joint.probs if isinstance(joint, JointDistribution) else np.asarray(joint, dtype=float)
    p = np.clip(p, 0.0, None)
    pb = p.sum(axis=0)
    return float(-_xlog2x(p).sum() + _xlog2x(pb).sum())


def von_neumann_entropy(rho) -> float:
    """Von Neumann entropy in bits, clipping spectral dust from eigh."""
    lam = np.linalg.eigvalsh(_as_complex(rho))
    lam = np.clip(lam, 0.0, None)
    return float(-_xlog2x(lam).sum())


def tomographic_key_rate(v: float, d: int) -> float:
    """Closed-form key rate of the d-dimensional isotropic state under
    full tomography, measuring in the key basis on both sides.

    Equal to log2(d) minus the entropy of the state itself.
    """
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"visibility {v} outside [0, 1]")
    lam_rest = (1.0 - v) / d**2
    lam_top = v + lam_rest
    ent = -_xlog2x(np.array([lam_top])).sum() \
        - (d * d - 1) * _xlog2x(np.array([lam_rest])).sum()
    return float(np.log2(d) - ent)


def subspace_key_rate(v: float, k: int, d: int) -> float:
    """Key rate when key generation is restricted to a k-dimensional
    subspace of a d-dimensional isotropic state, conditioned on both
    outcomes landing inside the subspace."""
    if not 1 <= k <= d:
        raise ValueError(f"subspace dimension {k} outside [1, {d}]")
    p = v + (1.0 - v) * k / d
    return float(p * tomographic_key_rate(v / p, k))
