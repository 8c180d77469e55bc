"""Key-rate lower bounds for entanglement-based protocols via conic programming.

The central quantity is a lower bound on the conditional entropy H(A|E) of
Alice's key register given the eavesdropper, minimized over all bipartite
states compatible with the observed statistics. The minimization is relaxed
to a semidefinite program built from a Gauss-Radau discretization of the
relative-entropy integral; subtracting the error-correction cost H(A|B)
gives the asymptotic secret key rate.

Besides assembling and solving the bound, this module performs facial
reduction when the statistics force the state into a proper subspace,
exploits real-structure and permutation symmetries of the constraint set,
and reconstructs an explicit eavesdropping attack from the solver output as
an independent certificate of the computed bound.
"""

from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .conic import (
    DEFAULT_SOLVER_TOL,
    ConicProgram,
    MatTerm,
    Solution,
    SolverTolerances,
    Term,
    VecTerm,
    ellipsoid_constraint,
    solve,
)
from .qcore import conditional_entropy, isotropic_state, key_joint_isotropic
from .quadrature import QuadratureRule

LOG2 = np.log(2.0)


class InfeasibleStatisticsError(ValueError):
    """The supplied frequencies admit no quantum state at all."""


class SolverFailureError(RuntimeError):
    """The conic solver did not return a usable solution."""

    def __init__(self, message: str, status: str = "", diagnostics=None):
        super().__init__(message)
        self.status = status
        self.diagnostics = diagnostics or {}


def _readonly(m: np.ndarray) -> np.ndarray:
    out = np.array(m, dtype=complex)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ProtocolInstance:
    """Measurement operators and target statistics of one protocol run.

    key_ops live on Alice's d-dimensional space and describe the key
    measurement; constraint_ops live on the joint d^2-dimensional space and
    generate the statistics constraints tr(E_k sigma) = f_k. freqs may be
    None for data-driven use, in which case a credible region supplies the
    statistics instead.
    """

    d: int
    key_ops: tuple
    constraint_ops: tuple
    freqs: tuple | None
    label: str
    key_joint: np.ndarray | None = None
    key_setting: tuple | None = None
    subspace_weight: float = 1.0
    visibility: float | None = None
    conditioned_v: float | None = None
    subspace_k: int | None = None
    base_d: int | None = None

    def __post_init__(self):
        key_ops = tuple(_readonly(a) for a in self.key_ops)
        cons = tuple(_readonly(e) for e in self.constraint_ops)
        object.__setattr__(self, "key_ops", key_ops)
        object.__setattr__(self, "constraint_ops", cons)
        if self.freqs is not None:
            object.__setattr__(self, "freqs", tuple(float(f) for f in self.freqs))
        for a in key_ops:
            if a.shape != (self.d, self.d):
                raise ValueError("key operator has wrong dimension")
            if np.linalg.eigvalsh((a + a.conj().T) / 2).min() < -1e-9:
                raise ValueError("key operator is not PSD")
        total = sum(key_ops) - np.eye(self.d)
        if np.linalg.eigvalsh((total + total.conj().T) / 2).max() > 1e-9:
            raise ValueError("key operators exceed the identity")
        n2 = self.d**2
        for e in cons:
            if e.shape != (n2, n2):
                raise ValueError("constraint operator has wrong dimension")
            ev = np.linalg.eigvalsh((e + e.conj().T) / 2)
            if ev.min() < -1e-9 or ev.max() > 1.0 + 1e-9:
                raise ValueError("constraint operator outside [0, I]")
        if self.freqs is not None:
            if len(self.freqs) != len(cons):
                raise ValueError("frequency count does not match operators")
            if any(f < -1e-12 or f > 1.0 + 1e-12 for f in self.freqs):
                raise ValueError("frequencies must lie in [0, 1]")
        if self.key_joint is not None:
            object.__setattr__(self, "key_joint", np.array(self.key_joint, dtype=float))

    @property
    def n_key(self) -> int:
        return len(self.key_ops)


@dataclass
class SolveOptions:
    """Switches controlling how the bound is assembled and solved.

    real_mode declares all SDP variables real when every operator is
    entrywise real ("auto" detects this, "on" asserts it, "off" disables).
    conjugation additionally enables the real formulation for complex
    operator families that are closed under transposition; facial controls
    the automatic support detection; split replaces the joint program by
    the sum of independent single-node programs.
    """

    real_mode: str = "auto"
    conjugation: str = "auto"
    facial: str = "auto"
    split: bool = False
    backend: str = "clarabel"
    tolerances: SolverTolerances = field(default_factory=lambda: DEFAULT_SOLVER_TOL)
    worst_case_hab: bool = False
    representatives: tuple | None = None
    symmetry_ops: tuple = ()
    nodes: tuple | None = None


@dataclass
class EntropyProblem:
    protocol: ProtocolInstance
    rule: QuadratureRule
    options: SolveOptions = field(default_factory=SolveOptions)
    region: object | None = None
    reduction: np.ndarray | None = None


@dataclass
class RateResult:
    """Solved bound, error-correction cost, and their difference."""

    H_AE_bound: float
    H_AB: float
    rate: float
    status: str
    m: int
    seconds: float
    diagnostics: dict
    label: str
    d: int
    k: int
    v: float | None
    solution: Solution | None = field(default=None, repr=False)
    problem: EntropyProblem | None = field(default=None, repr=False)

    def csv_row(self) -> list:
        v_str = "" if self.v is None else f"{self.v:g}"
        return [
            self.label,
            str(self.d),
            str(self.k),
            v_str,
            str(self.m),
            f"{self.H_AE_bound:.6f}",
            f"{self.H_AB:.6f}",
            f"{max(self.rate, 0.0):.6f}",
            self.status,
            f"{self.seconds:.3f}",
        ]

    def to_json(self) -> dict:
        return {
            "protocol": self.label,
            "d": self.d,
            "k": self.k,
            "v": self.v,
            "m": self.m,
            "H_AE": self.H_AE_bound,
            "H_AB": self.H_AB,
            "rate": self.rate,
            "status": self.status,
            "seconds": self.seconds,
            "diagnostics": self.diagnostics,
        }


@dataclass
class AttackReconstruction:
    """Explicit eavesdropping strategy extracted from a solved bound.

    state is the purification of the optimal sigma, a normalized vector on
    the joint system of Alice-Bob (dimension d^2) and Eve (dimension 2d^2);
    z_ops maps (key outcome, node index) to Eve's operator for that term.
    The recomputed objective evaluates the bound directly on (state, z_ops)
    and must reproduce the solver optimum; h_ae_exact is the conditional
    entropy of the reconstructed state, which can only exceed the bound.
    """

    state: np.ndarray
    z_ops: dict
    objective: float
    residual_max: float
    h_ae_exact: float
    diagnostics: dict

    def rho(self) -> np.ndarray:
        return np.outer(self.state, self.state.conj())


# ---------------------------------------------------------------------------
# protocol builders


def _product_constraints(bases, transpose_bob=True):
    """All rank-1 products P_k_i (x) (P_k_j)^T over the given bases."""
    ops = []
    index = []
    for k in range(bases.n):
        projs = bases.projectors(k)
        for i in range(bases.d):
            for j in range(bases.d):
                b = projs[j].T if transpose_bob else projs[j]
                ops.append(np.kron(projs[i], b))
                index.append((k, i, j))
    return ops, index


def _isotropic_freq(d: int, v: float, op: np.ndarray) -> float:
    rho = isotropic_state(d, v)
    return float(np.real(np.trace(rho @ op)))


def build_mub_protocol(d: int, v: float | None, bases, full_data: bool = True) -> ProtocolInstance:
    """Protocol measuring d+1 bases on both sides of an isotropic state.

    full_data keeps every product operator (restricted to a linearly
    independent subset); otherwise only the coarse-grained outcome-difference
    operators are used, which suffice for the isotropic family and shrink
    the constraint count to (d+1)(d-1).
    """
    from .bases import select_independent

    if bases.d != d or bases.n != d + 1:
        raise ValueError(f"need d+1={d + 1} bases of dimension {d}")
    key_ops = [np.zeros((d, d), dtype=complex) for _ in range(d)]
    for a in range(d):
        key_ops[a][a, a] = 1.0
    if full_data:
        ops, index = _product_constraints(bases)
        keep = select_independent(ops)
        ops = [ops[i] for i in keep]
        index = [index[i] for i in keep]
        freqs = None
        if v is not None:
            freqs = [
                v * (1.0 if i == j else 0.0) / d + (1.0 - v) / d**2
                for (_, i, j) in index
            ]
        key_setting = []
        for pos, (k, i, j) in enumerate(index):
            if k == 0:
                key_setting.append((i, j, pos))
        if len(key_setting) != d**2:
            raise ValueError("computational-basis products were not all kept")
        label = "mub"
    else:
        ops = []
        index = []
        for k in range(d + 1):
            projs = bases.projectors(k)
            for l in range(d - 1):
                e = np.zeros((d**2, d**2), dtype=complex)
                for i in range(d):
                    e += np.kron(projs[i], projs[(i + l) % d].T)
                ops.append(e)
                index.append((k, l))
        freqs = None
        if v is not None:
            freqs = [v * (1.0 if l == 0 else 0.0) + (1.0 - v) / d for (_, l) in index]
        key_setting = None
        label = "mub-coarse"
    key_joint = key_joint_isotropic(d, v) if v is not None else None
    return ProtocolInstance(
        d=d,
        key_ops=tuple(key_ops),
        constraint_ops=tuple(ops),
        freqs=tuple(freqs) if freqs is not None else None,
        label=label,
        key_joint=key_joint,
        key_setting=tuple(key_setting) if key_setting else None,
        visibility=v,
    )


def build_subspace_protocol(d: int, k: int, v: float | None, bases_for_k) -> ProtocolInstance:
    """Protocol run inside one k-dimensional block of a d-dimensional space.

    The state conditioned on the block is isotropic with visibility v/p,
    where p = v + (k/d)(1-v) is the probability of landing in the block;
    the returned instance carries p so the rate can be rescaled.
    """
    if d % k != 0:
        raise ValueError(f"k={k} must divide d={d}")
    if bases_for_k.d != k or bases_for_k.n != k + 1:
        raise ValueError(f"need k+1={k + 1} bases of dimension {k}")
    if v is None:
        p = 1.0
        v_cond = None
    else:
        p = v + (1.0 - v) * k / d
        v_cond = v / p
    inner = build_mub_protocol(k, v_cond, bases_for_k, full_data=True)
    return dataclasses.replace(
        inner,
        label="subspace",
        subspace_weight=p,
        visibility=v,
        conditioned_v=v_cond,
        subspace_k=k,
        base_d=d,
    )


def build_overlap_protocol(d: int, v: float | None) -> ProtocolInstance:
    """Protocol with five partially overlapping bases on each side."""
    from .bases import overlap_bases, select_independent

    bases = overlap_bases(d)
    key_ops = [np.zeros((d, d), dtype=complex) for _ in range(d)]
    for a in range(d):
        key_ops[a][a, a] = 1.0
    ops, index = _product_constraints(bases)
    keep = select_independent(ops)
    ops = [ops[i] for i in keep]
    index = [index[i] for i in keep]
    freqs = None
    if v is not None:
        rho = isotropic_state(d, v)
        freqs = [float(np.real(np.trace(rho @ e))) for e in ops]
    key_setting = []
    for pos, (k, i, j) in enumerate(index):
        if k == 0:
            key_setting.append((i, j, pos))
    if len(key_setting) != d**2:
        raise ValueError("computational-basis products were not all kept")
    key_joint = key_joint_isotropic(d, v) if v is not None else None
    return ProtocolInstance(
        d=d,
        key_ops=tuple(key_ops),
        constraint_ops=tuple(ops),
        freqs=tuple(freqs) if freqs is not None else None,
        label="overlap",
        key_joint=key_joint,
        key_setting=tuple(key_setting),
        visibility=v,
    )


# ---------------------------------------------------------------------------
# program assembly


def _canonical_ops(prob: EntropyProblem):
    """Joint-space key operators and constraints, in the solved basis."""
    proto = prob.protocol
    d = proto.d
    eye = np.eye(d)
    keys = [np.kron(a, eye) for a in proto.key_ops]
    cons = [np.asarray(e) for e in proto.constraint_ops]
    if prob.reduction is not None:
        V = prob.reduction
        keys = [V.conj().T @ k @ V for k in keys]
        cons = [V.conj().T @ e @ V for e in cons]
        n = V.shape[1]
    else:
        n = d**2
    return n, keys, cons


def _max_imag(mats) -> float:
    return max(float(np.abs(m.imag).max()) for m in mats)


def _transpose_spanned(cons, freqs) -> bool:
    """Whether transposing every constraint yields implied constraints.

    Each E_k^T must lie in the span of the family with coefficients that
    reproduce f_k from the other frequencies; then restricting to real
    symmetric variables loses nothing.
    """
    a = np.array([e.reshape(-1) for e in cons])
    t = np.array([e.T.reshape(-1) for e in cons])
    f = np.asarray(freqs, dtype=float)
    gram = a @ a.conj().T
    try:
        coef = np.linalg.solve(gram, a @ t.conj().T)
    except np.linalg.LinAlgError:
        return False
    resid = np.abs(t - coef.conj().T @ a).max()
    scale = 1.0 + float(np.abs(a).max())
    if resid > 1e-9 * scale:
        return False
    implied = coef.conj().T.real @ f
    if np.abs(coef.imag).max() > 1e-9:
        return False
    return bool(np.abs(implied - f).max() <= 1e-9)


def _choose_mode(prob: EntropyProblem, keys, cons) -> str:
    opt = prob.options
    if opt.real_mode == "on":
        return "real"
    plain = _max_imag(keys + cons) < 1e-12
    if opt.real_mode == "auto" and plain:
        return "real"
    if (
        opt.real_mode == "auto"
        and opt.conjugation == "auto"
        and prob.region is None
        and prob.protocol.freqs is not None
        and _max_imag(keys) < 1e-12
        and all(np.abs(k - k.T).max() < 1e-12 for k in keys)
        and _transpose_spanned(cons, prob.protocol.freqs)
    ):
        return "real-conjugated"
    return "complex"


def _invariance_rows(kind: str, mat: np.ndarray):
    """Real functional matrices whose vanishing encodes tr(mat sigma) = 0."""
    rows = []
    if kind == "sym":
        re = (mat.real + mat.real.T) / 2
        im = (mat.imag + mat.imag.T) / 2
        for c in (re, im):
            if np.abs(c).max() > 1e-12:
                rows.append(c)
    else:
        herm = (mat + mat.conj().T) / 2
        anti = (mat - mat.conj().T) / (2j)
        for c in (herm, anti):
            if np.abs(c).max() > 1e-12:
                rows.append(c)
    return rows


def _hermitian_basis(n: int, real: bool):
    for i in range(n):
        b = np.zeros((n, n), dtype=complex)
        b[i, i] = 1.0
        yield b
    for i in range(n):
        for j in range(i + 1, n):
            b = np.zeros((n, n), dtype=complex)
            b[i, j] = b[j, i] = 1.0
            yield b
            if not real:
                b = np.zeros((n, n), dtype=complex)
                b[i, j] = 1j
                b[j, i] = -1j
                yield b


def _build(prob: EntropyProblem):
    """Assemble the conic program for the entropy bound.

    Returns the program and a metadata dict used by compute_rate and
    reconstruct_attack (variable naming, mode, representatives).
    """
    proto = prob.protocol
    rule = prob.rule
    opt = prob.options
    if proto.freqs is None and prob.region is None:
        raise ValueError("missing frequencies and missing credible region")
    n, keys, cons = _canonical_ops(prob)
    mode = _choose_mode(prob, keys, cons)
    if mode == "real":
        sig_kind, z_kind = "sym", "genr"
        keys = [k.real.copy() for k in keys]
        cons = [e.real.copy() for e in cons]
    elif mode == "real-conjugated":
        sig_kind, z_kind = "sym", "genr"
        keys = [k.real.copy() for k in keys]
        cons = [(e.real + e.real.T) / 2 for e in cons]
    else:
        sig_kind, z_kind = "herm", "gen"

    if opt.representatives is not None:
        reps = list(opt.representatives)
    else:
        reps = [(a, 1.0) for a in range(proto.n_key)]
    nodes = list(opt.nodes) if opt.nodes is not None else list(range(rule.m))

    prog = ConicProgram()
    sigma = prog.add_variable("sigma", sig_kind, n)
    eye = np.eye(n)
    obj_terms = []
    const = rule.entropy_constant() if opt.nodes is None else 0.0
    for a, weight in reps:
        for i in nodes:
            t, w = float(rule.t[i]), float(rule.w[i])
            ci = w / (t * LOG2)
            zeta = prog.add_variable(f"zeta_{a}_{i + 1}", z_kind, n)
            eta = prog.add_variable(f"eta_{a}_{i + 1}", sig_kind, n)
            theta = prog.add_variable(f"theta_{a}_{i + 1}", sig_kind, n)
            obj_terms.append(Term(zeta, weight * 2.0 * ci * keys[a]))
            if 1.0 - t > 0.0:
                obj_terms.append(Term(eta, weight * ci * (1.0 - t) * keys[a]))
            obj_terms.append(Term(theta, weight * (w / LOG2) * eye))
            prog.add_psd(
                [
                    [[MatTerm(sigma)], [MatTerm(zeta)]],
                    [[MatTerm(zeta, adjoint=True)], [MatTerm(eta)]],
                ]
            )
            prog.add_psd(
                [
                    [[MatTerm(sigma)], [MatTerm(zeta, adjoint=True)]],
                    [[MatTerm(zeta)], [MatTerm(theta)]],
                ]
            )
    prog.set_objective(const, obj_terms)

    prog.add_equality([Term(sigma, eye)], 1.0)
    if prob.region is None:
        for e, f in zip(cons, proto.freqs):
            prog.add_equality([Term(sigma, e)], float(f))
    else:
        region = prob.region
        f = np.asarray(region.f, dtype=float)
        r_dim = f.shape[0]
        pvec = prog.add_variable("freq", "vec", r_dim)
        for r, idx in enumerate(region.op_indices):
            if idx is None:
                continue
            unit = np.zeros(r_dim)
            unit[r] = -1.0
            prog.add_equality([Term(sigma, cons[idx]), Term(pvec, unit)], 0.0)
        for setting in region.settings:
            if setting.last_op is None:
                continue
            ones = np.zeros(r_dim)
            ones[setting.start : setting.stop] = 1.0
            prog.add_equality(
                [Term(sigma, cons[setting.last_op]), Term(pvec, ones)], 1.0
            )
        prog.set_ellipsoid(
            pvec, ellipsoid_constraint(f, np.asarray(region.sigma, dtype=float), region.chi)
        )

    for s in opt.symmetry_ops:
        s_use = s
        if prob.reduction is not None:
            V = prob.reduction
            s_use = V.conj().T @ s @ V
        for b in _hermitian_basis(n, sig_kind == "sym"):
            m = s_use.conj().T @ b @ s_use - b
            for c in _invariance_rows(sig_kind, m):
                prog.add_equality([Term(sigma, c)], 0.0)

    meta = {
        "mode": mode,
        "reps": reps,
        "nodes": nodes,
        "dim": n,
        "keys": keys,
        "cons": cons,
    }
    return prog, meta


def build_entropy_sdp(prob: EntropyProblem) -> ConicProgram:
    """Conic program whose optimum lower-bounds H(A|E)."""
    return _build(prob)[0]


# ---------------------------------------------------------------------------
# feasibility analysis and reduction


def strict_feasibility_check(p: ProtocolInstance):
    """Largest minimum eigenvalue over states matching the statistics.

    Returns (lam, V): lam > 1e-7 certifies a full-rank compatible state and
    V is None; otherwise V is an isometry onto the support of the maximizing
    state (relative eigenvalue cutoff 1e-7), the subspace every compatible
    state must live in. Raises InfeasibleStatisticsError when no state
    reproduces the statistics at all.
    """
    if p.freqs is None:
        raise ValueError("strict feasibility check needs frequencies")
    n = p.d**2
    prog = ConicProgram()
    sigma = prog.add_variable("sigma", "herm", n)
    lam = prog.add_variable("lam", "vec", 1)
    prog.set_objective(0.0, [Term(lam, np.array([-1.0]))])
    prog.add_equality([Term(sigma, np.eye(n))], 1.0)
    for e, f in zip(p.constraint_ops, p.freqs):
        prog.add_equality([Term(sigma, np.asarray(e))], float(f))
    prog.add_psd([[[MatTerm(sigma), VecTerm(lam, 0, -np.eye(n))]]])
    sol = solve(prog)
    if sol.status == "infeasible":
        raise InfeasibleStatisticsError(
            "statistics are not compatible with any quantum state; "
            "estimate a credible region from counts instead"
        )
    if sol.status not in ("optimal", "near-optimal"):
        raise SolverFailureError(
            f"feasibility check failed with status {sol.status}", sol.status
        )
    lam_star = -sol.primal_objective
    if lam_star > 1e-7:
        return lam_star, None
    sig = sol.block_values["sigma"]
    vals, vecs = np.linalg.eigh(sig)
    keep = vals > 1e-7 * vals.max()
    V = vecs[:, keep]
    return lam_star, V


def facial_reduce(prob: EntropyProblem, V: np.ndarray) -> EntropyProblem:
    """Restrict the problem to the subspace spanned by the columns of V."""
    V = np.asarray(V, dtype=complex)
    if V.ndim != 2:
        raise ValueError("V must be a matrix with isometric columns")
    gram = V.conj().T @ V
    if np.abs(gram - np.eye(V.shape[1])).max() > 1e-10:
        raise ValueError("V is not an isometry")
    current = prob.reduction
    expected = prob.protocol.d**2 if current is None else current.shape[1]
    if V.shape[0] != expected:
        raise ValueError("V does not match the current problem dimension")
    total = V if current is None else current @ V
    return dataclasses.replace(prob, reduction=total)


def apply_real_symmetry(prob: EntropyProblem):
    """Detect entrywise-real operators and declare all variables real."""
    _, keys, cons = _canonical_ops(prob)
    if _max_imag(keys + cons) < 1e-12:
        opts = dataclasses.replace(prob.options, real_mode="on")
        return True, dataclasses.replace(prob, options=opts)
    return False, prob


def apply_permutation_symmetry(prob: EntropyProblem, pi, V: np.ndarray) -> EntropyProblem:
    """Reduce the key-outcome sum to orbit representatives.

    pi permutes Alice's key outcomes and V acts on Bob's side; together
    S = U_pi (x) V must map the constraint set onto itself with matching
    frequencies (verified, not assumed). Only representatives of the
    pi-orbits keep variables, weighted by orbit size, and sigma is
    constrained to be S-invariant.
    """
    proto = prob.protocol
    if prob.region is not None:
        raise ValueError("permutation symmetry applies to fixed statistics only")
    if proto.freqs is None:
        raise ValueError("permutation symmetry needs frequencies")
    if prob.reduction is not None:
        raise ValueError("apply symmetry before facial reduction")
    pi = np.asarray(pi, dtype=int)
    n_key = proto.n_key
    if sorted(pi.tolist()) != list(range(n_key)):
        raise ValueError("pi is not a permutation of the key outcomes")
    d = proto.d
    for a in range(n_key):
        expect = np.zeros((d, d))
        expect[a, a] = 1.0
        if np.abs(proto.key_ops[a] - expect).max() > 1e-12:
            raise ValueError("key basis must be computational")
    V = np.asarray(V, dtype=complex)
    if V.shape != (d, d) or np.abs(V.conj().T @ V - np.eye(d)).max() > 1e-9:
        raise ValueError("V must be a d x d unitary")
    u_pi = np.zeros((d, d))
    for a in range(d):
        u_pi[pi[a], a] = 1.0
    s = np.kron(u_pi, V)
    cons = [np.asarray(e) for e in proto.constraint_ops]
    for k, e in enumerate(cons):
        mapped = s @ e @ s.conj().T
        scale = 1.0 + float(np.abs(e).max())
        for kp, ep in enumerate(cons):
            if (
                np.abs(mapped - ep).max() <= 1e-10 * scale
                and abs(proto.freqs[k] - proto.freqs[kp]) <= 1e-10
            ):
                break
        else:
            raise ValueError(f"operator {k} is not mapped to the constraint set")
    seen = set()
    reps = []
    for a in range(n_key):
        if a in seen:
            continue
        orbit = [a]
        b = int(pi[a])
        while b != a:
            orbit.append(b)
            b = int(pi[b])
        seen.update(orbit)
        reps.append((a, float(len(orbit))))
    opts = dataclasses.replace(
        prob.options,
        representatives=tuple(reps),
        symmetry_ops=prob.options.symmetry_ops + (s,),
    )
    return dataclasses.replace(prob, options=opts)


# ---------------------------------------------------------------------------
# solving


def _prepare(prob: EntropyProblem):
    """Run the automatic facial reduction, returning the problem to solve."""
    diag = {}
    if (
        prob.options.facial != "off"
        and prob.reduction is None
        and prob.region is None
        and prob.protocol.freqs is not None
    ):
        lam, V = strict_feasibility_check(prob.protocol)
        diag["lambda_star"] = lam
        if V is not None:
            prob = facial_reduce(prob, V)
            diag["reduced_dim"] = V.shape[1]
    return prob, diag


def _center_op_values(region) -> dict:
    f = np.asarray(region.f, dtype=float)
    values = {}
    for r, idx in enumerate(region.op_indices):
        if idx is not None:
            values[idx] = float(f[r])
    for setting in region.settings:
        if setting.last_op is not None:
            values[setting.last_op] = float(1.0 - f[setting.start : setting.stop].sum())
    return values


def _joint_from_values(proto: ProtocolInstance, values: dict) -> np.ndarray:
    joint = np.full((proto.d, proto.d), np.nan)
    for a, b, idx in proto.key_setting:
        if idx in values:
            joint[a, b] = values[idx]
    if np.isnan(joint).any():
        raise ValueError(
            "key-basis joint distribution is not determined; "
            "include the key-basis setting in the counts"
        )
    joint = np.clip(joint, 0.0, None)
    total = joint.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"key-basis probabilities sum to {total}, not 1")
    return joint / total


def _hab_worst_case(proto: ProtocolInstance, region) -> float:
    """Largest H(A|B) over key-basis joints consistent with the region."""
    from scipy.optimize import minimize

    f = np.asarray(region.f, dtype=float)
    cov = np.asarray(region.sigma, dtype=float)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    L = vecs @ np.diag(np.sqrt(vals))

    def objective(u):
        p = f + region.chi * (L @ u)
        values = {}
        for r, idx in enumerate(region.op_indices):
            if idx is not None:
                values[idx] = p[r]
        for setting in region.settings:
            if setting.last_op is not None:
                values[setting.last_op] = 1.0 - p[setting.start : setting.stop].sum()
        try:
            joint = _joint_from_values(proto, values)
        except ValueError:
            return np.inf
        return -conditional_entropy(joint)

    res = minimize(
        objective,
        np.zeros(f.shape[0]),
        method="SLSQP",
        constraints=[{"type": "ineq", "fun": lambda u: 1.0 - u @ u}],
        options={"maxiter": 200, "ftol": 1e-10},
    )
    base = -objective(np.zeros(f.shape[0]))
    if not res.success:
        return base
    return max(base, -float(res.fun))


def _hab_for(prob: EntropyProblem) -> float:
    proto = prob.protocol
    if prob.region is not None:
        if prob.options.worst_case_hab:
            return _hab_worst_case(proto, prob.region)
        if proto.key_setting is None:
            raise ValueError("protocol has no key-basis constraint mapping")
        return conditional_entropy(_joint_from_values(proto, _center_op_values(prob.region)))
    if proto.key_joint is not None:
        return conditional_entropy(proto.key_joint)
    if proto.key_setting is not None and proto.freqs is not None:
        values = {idx: proto.freqs[idx] for _, _, idx in proto.key_setting}
        return conditional_entropy(_joint_from_values(proto, values))
    raise ValueError("key-basis joint distribution unavailable")


def compute_rate(prob: EntropyProblem) -> RateResult:
    """Solve the entropy bound and assemble the key rate.

    Automatically facially reduces non-strictly-feasible instances, raises
    InfeasibleStatisticsError for statistics no state can produce, and
    SolverFailureError when the backend does not reach (near-)optimality.
    """
    t0 = time.perf_counter()
    prob, diag = _prepare(prob)
    proto = prob.protocol
    if prob.options.split:
        h_ae, split_diag = _split_value(prob)
        status = "optimal"
        sol = None
        diag.update(split_diag)
    else:
        prog, meta = _build(prob)
        sol = solve(prog, tolerances=prob.options.tolerances, backend=prob.options.backend)
        if sol.status == "infeasible":
            raise InfeasibleStatisticsError(
                "statistics are not compatible with any quantum state; "
                "estimate a credible region from counts instead"
            )
        if sol.status not in ("optimal", "near-optimal"):
            raise SolverFailureError(
                f"solver returned status {sol.status}", sol.status, sol.diagnostics
            )
        h_ae = sol.primal_objective
        status = sol.status
        diag["mode"] = meta["mode"]
        diag["reps"] = meta["reps"]
        diag.update(sol.diagnostics)
    h_ab = _hab_for(prob)
    scale = proto.subspace_weight
    h_ae_s = scale * h_ae
    h_ab_s = scale * h_ab
    if scale != 1.0:
        diag["subspace_weight"] = scale
    seconds = time.perf_counter() - t0
    return RateResult(
        H_AE_bound=h_ae_s,
        H_AB=h_ab_s,
        rate=h_ae_s - h_ab_s,
        status=status,
        m=prob.rule.m,
        seconds=seconds,
        diagnostics=diag,
        label=proto.label,
        d=proto.base_d if proto.base_d is not None else proto.d,
        k=proto.subspace_k if proto.subspace_k is not None else proto.d,
        v=proto.visibility,
        solution=sol,
        problem=prob,
    )


def _split_value(prob: EntropyProblem):
    """Sum of independently minimized single-node programs."""
    m = prob.rule.m
    programs = []
    for i in range(m):
        opts = dataclasses.replace(prob.options, nodes=(i,), split=False)
        node_prob = dataclasses.replace(prob, options=opts)
        programs.append(_build(node_prob)[0])

    def solve_one(prog):
        return solve(prog, tolerances=prob.options.tolerances, backend=prob.options.backend)

    with ThreadPoolExecutor(max_workers=min(m, 4)) as pool:
        sols = list(pool.map(solve_one, programs))
    total = prob.rule.entropy_constant()
    for i, sol in enumerate(sols):
        if sol.status not in ("optimal", "near-optimal"):
            raise SolverFailureError(
                f"node {i + 1} returned status {sol.status}", sol.status
            )
        total += sol.primal_objective
    return total, {"split": True, "split_nodes": m}


def split_lower_bound(prob: EntropyProblem) -> float:
    """Bound from m independent single-node programs; never above the joint."""
    if prob.protocol.freqs is None:
        raise ValueError("split bound needs frequencies")
    prob, _ = _prepare(prob)
    return _split_value(prob)[0]


# ---------------------------------------------------------------------------
# attack reconstruction


def _psd_sqrt_checked(m: np.ndarray, floor: float = -1e-6) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.conj().T) / 2)
    if vals.min() < floor:
        raise SolverFailureError(
            f"attack reconstruction: block eigenvalue {vals.min():.3e} below {floor}"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.conj().T


def reconstruct_attack(prob: EntropyProblem, solution: Solution) -> AttackReconstruction:
    """Extract Eve's explicit strategy from a solved bound.

    The optimal sigma is purified against a 2N-dimensional environment and
    each dual block is conjugated by the pseudo-inverse of the purification
    map, yielding Eve operators whose direct objective value reproduces the
    solver optimum. Run on the problem as actually solved (after any facial
    reduction); the residuals confirm the identification.
    """
    if solution.status != "optimal":
        raise ValueError(f"reconstruction needs an optimal solution, got {solution.status}")
    if prob.options.representatives is not None:
        raise ValueError("reconstruct from the unsymmetrized problem")
    if prob.options.nodes is not None:
        raise ValueError("reconstruct from the full program, not a split node")
    n, keys, cons = _canonical_ops(prob)
    rule = prob.rule
    sigma = np.asarray(solution.block_values["sigma"], dtype=complex)
    vals, vecs = np.linalg.eigh((sigma + sigma.conj().T) / 2)
    vals = np.clip(vals, 0.0, None)
    sqrt_vals = np.sqrt(vals)
    cut = 1e-12 * max(vals.max(), 1e-300)
    inv_sqrt = np.where(vals > cut, 1.0 / np.where(vals > cut, sqrt_vals, 1.0), 0.0)
    rank = int((vals > cut).sum())

    # purification on system (x) environment, environment dimension 2n
    psi = np.zeros((n, 2 * n), dtype=complex)
    psi[:, :n] = vecs * sqrt_vals

    z_ops = {}
    residual = 0.0
    objective = rule.entropy_constant() if prob.options.nodes is None else 0.0
    u = vecs
    uh = vecs.conj().T
    for a in range(prob.protocol.n_key):
        for i in range(rule.m):
            zeta = np.asarray(solution.block_values[f"zeta_{a}_{i + 1}"], dtype=complex)
            eta = np.asarray(solution.block_values[f"eta_{a}_{i + 1}"], dtype=complex)
            theta = np.asarray(solution.block_values[f"theta_{a}_{i + 1}"], dtype=complex)
            r_z = (inv_sqrt[:, None] * (uh @ zeta @ u)) * inv_sqrt[None, :]
            r_e = (inv_sqrt[:, None] * (uh @ eta @ u)) * inv_sqrt[None, :]
            r_t = (inv_sqrt[:, None] * (uh @ theta @ u)) * inv_sqrt[None, :]
            b = _psd_sqrt_checked(r_t - r_z @ r_z.conj().T)
            c = _psd_sqrt_checked(r_e - r_z.conj().T @ r_z)
            z = np.zeros((2 * n, 2 * n), dtype=complex)
            z[:n, :n] = r_z
            z[:n, n:] = b
            z[n:, :n] = c
            # consistency of the dual blocks with the reconstructed operator
            dz = u @ ((sqrt_vals[:, None] * r_z) * sqrt_vals[None, :]) @ uh - zeta
            de = (
                u
                @ ((sqrt_vals[:, None] * (r_z.conj().T @ r_z + c @ c)) * sqrt_vals[None, :])
                @ uh
                - eta
            )
            dt = (
                u
                @ ((sqrt_vals[:, None] * (r_z @ r_z.conj().T + b @ b)) * sqrt_vals[None, :])
                @ uh
                - theta
            )
            residual = max(
                residual,
                float(np.abs(dz).max()),
                float(np.abs(de).max()),
                float(np.abs(dt).max()),
            )
            # Eve's operator in the purification basis
            m_op = z.T
            z_ops[(a, i + 1)] = m_op
            t, w = float(rule.t[i]), float(rule.w[i])
            ci = w / (t * LOG2)
            ka = keys[a]
            left = psi.conj().T @ ka @ psi
            term = 2.0 * np.real(np.trace(left @ m_op.T))
            term += (1.0 - t) * np.real(np.trace(left @ (m_op @ m_op.conj().T).T))
            gram = psi.conj().T @ psi
            objective += ci * term + (w / LOG2) * np.real(
                np.trace(gram @ (m_op.conj().T @ m_op).T)
            )

    # exact conditional entropy of the reconstructed state
    blocks = [psi.conj().T @ ka @ psi for ka in keys]
    joint_vals = np.concatenate([np.clip(np.linalg.eigvalsh(b), 0.0, None) for b in blocks])
    env_vals = np.clip(np.linalg.eigvalsh(sum(blocks)), 0.0, None)

    def _h(p):
        p = p[p > 1e-300]
        return float(-(p * np.log2(p)).sum())

    h_ae_exact = _h(joint_vals) - _h(env_vals)

    # lift to the unreduced space for the returned state and operators
    d2 = prob.protocol.d**2
    if prob.reduction is not None:
        psi_full = prob.reduction @ psi
    else:
        psi_full = psi
    state = np.zeros((d2, 2 * d2), dtype=complex)
    state[:, : 2 * n] = psi_full
    z_padded = {}
    for key, m_op in z_ops.items():
        zp = np.zeros((2 * d2, 2 * d2), dtype=complex)
        zp[: 2 * n, : 2 * n] = m_op
        z_padded[key] = zp
    return AttackReconstruction(
        state=state.reshape(-1),
        z_ops=z_padded,
        objective=float(objective),
        residual_max=residual,
        h_ae_exact=h_ae_exact,
        diagnostics={"sigma_rank": rank, "dim": n},
    )
