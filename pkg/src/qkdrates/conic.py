"""Solver-agnostic conic programs: linear objective and equalities over
matrix variable blocks, PSD constraints on block compositions, and one
optional ellipsoid constraint on a real vector block.

Variable kinds: "herm" (complex Hermitian), "sym" (real symmetric),
"gen" (general complex), "genr" (general real), "vec" (real vector).
Scalar functionals of a matrix block X are always Re tr(C^dag X).

Complex blocks are lowered to the real symmetric embedding
[[Re, -Im], [Im, Re]] only inside PSD constraints; objectives and
equalities act on the complex parameterization directly. Equality rows
are reduced to an independent subset before the backend sees them, with
a consistency check on the dropped rows, because rank-deficient KKT
systems reliably stall interior-point solvers on larger instances.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import solve_triangular

RT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class SolverTolerances:
    feasibility: float = 1e-8
    gap: float = 1e-8
    psd_floor: float = 1e-9
    row_independence: float = 1e-10
    max_iter: int = 200


DEFAULT_SOLVER_TOL = SolverTolerances()

_KINDS = ("herm", "sym", "gen", "genr", "vec")


def _param_count(kind: str, dim: int) -> int:
    if kind == "herm":
        return dim * dim
    if kind == "sym":
        return dim * (dim + 1) // 2
    if kind == "gen":
        return 2 * dim * dim
    if kind == "genr":
        return dim * dim
    return dim


def _pairs(dim: int):
    return [(i, j) for j in range(dim) for i in range(j)]


def value_from_params(kind: str, dim: int, x: np.ndarray):
    """Reassemble a block value from its real parameter vector."""
    if kind == "vec":
        return np.array(x, dtype=float)
    if kind == "genr":
        return np.array(x, dtype=float).reshape(dim, dim)
    if kind == "gen":
        n2 = dim * dim
        return (x[:n2] + 1j * x[n2:]).reshape(dim, dim)
    m = np.zeros((dim, dim), dtype=complex)
    m[np.diag_indices(dim)] = x[:dim]
    for p, (i, j) in enumerate(_pairs(dim)):
        if kind == "herm":
            val = x[dim + 2 * p] + 1j * x[dim + 2 * p + 1]
        else:
            val = x[dim + p]
        m[i, j] = val
        m[j, i] = np.conj(val)
    return m.real if kind == "sym" else m


def functional_row(kind: str, dim: int, c) -> np.ndarray:
    """Coefficients of Re tr(C^dag X) over the block's parameters."""
    c = np.asarray(c)
    row = np.zeros(_param_count(kind, dim))
    if kind == "vec":
        return c.real.astype(float)
    if kind == "genr":
        return c.real.reshape(-1).astype(float)
    if kind == "gen":
        n2 = dim * dim
        row[:n2] = c.real.reshape(-1)
        row[n2:] = c.imag.reshape(-1)
        return row
    row[:dim] = np.diag(c).real
    for p, (i, j) in enumerate(_pairs(dim)):
        re_coeff = (c[i, j] + c[j, i]).real
        if kind == "herm":
            row[dim + 2 * p] = re_coeff
            row[dim + 2 * p + 1] = (c[i, j] - c[j, i]).imag
        else:
            row[dim + p] = re_coeff
    return row


def _param_entries(kind: str, dim: int, adjoint: bool):
    """Nonzero matrix entries per parameter: list of (param, i, j, value)."""
    out = []
    if kind in ("herm", "sym"):
        for i in range(dim):
            out.append((i, i, i, 1.0 + 0j))
        for p, (i, j) in enumerate(_pairs(dim)):
            if kind == "herm":
                out.append((dim + 2 * p, i, j, 1.0 + 0j))
                out.append((dim + 2 * p, j, i, 1.0 + 0j))
                out.append((dim + 2 * p + 1, i, j, 1j))
                out.append((dim + 2 * p + 1, j, i, -1j))
            else:
                out.append((dim + p, i, j, 1.0 + 0j))
                out.append((dim + p, j, i, 1.0 + 0j))
    elif kind == "gen":
        n2 = dim * dim
        for i in range(dim):
            for j in range(dim):
                p = i * dim + j
                if adjoint:
                    out.append((p, j, i, 1.0 + 0j))
                    out.append((n2 + p, j, i, -1j))
                else:
                    out.append((p, i, j, 1.0 + 0j))
                    out.append((n2 + p, i, j, 1j))
    elif kind == "genr":
        for i in range(dim):
            for j in range(dim):
                p = i * dim + j
                if adjoint:
                    out.append((p, j, i, 1.0 + 0j))
                else:
                    out.append((p, i, j, 1.0 + 0j))
    else:
        raise ValueError(f"vector blocks cannot appear as matrix cells")
    return out


@dataclass(frozen=True)
class VarBlock:
    name: str
    kind: str
    dim: int

    @property
    def params(self) -> int:
        return _param_count(self.kind, self.dim)


@dataclass(frozen=True)
class Term:
    """One summand of a scalar functional: Re tr(C^dag X) or c . x."""

    var: str
    coeff: np.ndarray


@dataclass(frozen=True)
class MatTerm:
    """Matrix-valued cell summand: scale * X or scale * X^dag."""

    var: str
    scale: complex = 1.0
    adjoint: bool = False


@dataclass(frozen=True)
class VecTerm:
    """Matrix-valued cell summand: matrix * x[index] for a vec block."""

    var: str
    index: int
    matrix: np.ndarray = None


@dataclass(frozen=True)
class ConstTerm:
    matrix: np.ndarray = None


@dataclass(frozen=True)
class EllipsoidConstraint:
    """Whitening data for ||L^-1 (p - center)|| <= radius.

    Directions of the covariance below the degeneracy cutoff are pinned
    to the center value instead of entering the ball.
    """

    center: np.ndarray
    covariance: np.ndarray
    radius: float
    whiten: np.ndarray
    pinned: np.ndarray


def ellipsoid_constraint(center, covariance, radius: float,
                         degeneracy_cutoff: float = 1e-14) -> EllipsoidConstraint:
    center = np.asarray(center, dtype=float)
    cov = np.asarray(covariance, dtype=float)
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    lam, vec = np.linalg.eigh((cov + cov.T) / 2)
    top = lam.max() if lam.size else 0.0
    if lam.size and lam.min() < -1e-12 * max(top, 1.0):
        raise ValueError(f"covariance has negative eigenvalue {lam.min():.3e}")
    cut = degeneracy_cutoff * max(top, 1.0)
    live = lam > cut
    whiten = (vec[:, live] / np.sqrt(lam[live])).T
    pinned = vec[:, ~live].T
    return EllipsoidConstraint(center=center, covariance=cov, radius=float(radius),
                               whiten=whiten, pinned=pinned)


class ConicProgram:
    """Immutable-once-solved conic program over named variable blocks."""

    def __init__(self):
        self.blocks = {}
        self.block_order = []
        self.objective_const = 0.0
        self.objective_terms = []
        self.equalities = []
        self.psd_blocks = []
        self.ellipsoid = None

    def add_variable(self, name: str, kind: str, dim: int) -> str:
        if kind not in _KINDS:
            raise ValueError(f"unknown variable kind {kind!r}")
        if name in self.blocks:
            raise ValueError(f"block {name!r} declared twice")
        self.blocks[name] = VarBlock(name=name, kind=kind, dim=int(dim))
        self.block_order.append(name)
        return name

    def _check_var(self, name):
        if name not in self.blocks:
            raise ValueError(f"reference to undeclared block {name!r}")

    def set_objective(self, const: float, terms):
        for t in terms:
            self._check_var(t.var)
        self.objective_const = float(const)
        self.objective_terms = list(terms)

    def add_equality(self, terms, rhs: float):
        for t in terms:
            self._check_var(t.var)
        self.equalities.append((list(terms), float(rhs)))

    def add_psd(self, grid):
        """Constrain the Hermitian block matrix assembled from grid >= 0.

        grid is a list of rows; each cell is a list of MatTerm / VecTerm /
        ConstTerm entries (or None). The assembled matrix must be
        Hermitian, so off-diagonal cells must come in adjoint pairs.
        """
        dims_r = [None] * len(grid)
        dims_c = [None] * len(grid[0])
        for r, row in enumerate(grid):
            if len(row) != len(dims_c):
                raise ValueError("ragged PSD grid")
            for c, cell in enumerate(row):
                for term in cell or []:
                    if isinstance(term, (MatTerm, VecTerm)):
                        self._check_var(term.var)
                    d_r = d_c = None
                    if isinstance(term, MatTerm):
                        d_r = d_c = self.blocks[term.var].dim
                    else:
                        d_r, d_c = np.asarray(term.matrix).shape
                    if dims_r[r] is None:
                        dims_r[r] = d_r
                    if dims_c[c] is None:
                        dims_c[c] = d_c
                    if dims_r[r] != d_r or dims_c[c] != d_c:
                        raise ValueError("inconsistent cell dimensions in PSD grid")
        if any(d is None for d in dims_r) or dims_r != dims_c:
            raise ValueError("PSD grid must be square with every row/col sized")
        self.psd_blocks.append((grid, dims_r))

    def set_ellipsoid(self, var: str, handle: EllipsoidConstraint):
        self._check_var(var)
        if self.blocks[var].kind != "vec":
            raise ValueError("ellipsoid constraint applies to a vec block")
        if self.ellipsoid is not None:
            raise ValueError("only one ellipsoid constraint is supported")
        if handle.center.size != self.blocks[var].dim:
            raise ValueError("ellipsoid center size does not match block")
        self.ellipsoid = (var, handle)

    # -- introspection ----------------------------------------------------

    def dump(self) -> str:
        """Self-describing JSON summary for debugging."""
        payload = {
            "blocks": [
                {"name": b.name, "kind": b.kind, "dim": b.dim, "params": b.params}
                for b in (self.blocks[n] for n in self.block_order)
            ],
            "equalities": len(self.equalities),
            "psd_blocks": [
                {"cells": len(grid), "side": int(sum(dims))}
                for grid, dims in self.psd_blocks
            ],
            "ellipsoid": None if self.ellipsoid is None else {
                "var": self.ellipsoid[0],
                "radius": self.ellipsoid[1].radius,
                "live_directions": int(self.ellipsoid[1].whiten.shape[0]),
                "pinned_directions": int(self.ellipsoid[1].pinned.shape[0]),
            },
            "objective_terms": len(self.objective_terms),
        }
        return json.dumps(payload, indent=2)

    def block_needs_embedding(self, grid) -> bool:
        for row in grid:
            for cell in row:
                for term in cell or []:
                    if isinstance(term, MatTerm):
                        blk = self.blocks[term.var]
                        if blk.kind in ("herm", "gen") or np.iscomplex(term.scale):
                            return True
                    else:
                        m = np.asarray(term.matrix)
                        if np.iscomplexobj(m) and np.abs(m.imag).max() > 0:
                            return True
        return False


@dataclass
class Solution:
    status: str
    primal_objective: float
    dual_objective: float
    block_values: dict
    equality_duals: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def hermitian_embed(h) -> np.ndarray:
    """Real symmetric embedding [[Re, -Im], [Im, Re]] of a Hermitian matrix."""
    from .qcore import HermitianOperator

    if isinstance(h, HermitianOperator):
        m = h.entries
    else:
        m = np.asarray(h, dtype=complex)
        if np.abs(m - m.conj().T).max() > 1e-10 * max(1.0, np.abs(m).max()):
            raise ValueError("input is not Hermitian")
    return np.block([[m.real, -m.imag], [m.imag, m.real]])


def _svec_index_map(n: int):
    """svec ordering: upper triangle columnwise, off-diagonal scaled sqrt(2)."""
    idx = {}
    k = 0
    for j in range(n):
        for i in range(j + 1):
            idx[(i, j)] = k
            k += 1
    return idx, k


class _Assembler:
    """Lowers a ConicProgram to clarabel's min q.x st Ax + s = b form."""

    def __init__(self, prog: ConicProgram, tol: SolverTolerances):
        self.prog = prog
        self.tol = tol
        self.offsets = {}
        total = 0
        for name in prog.block_order:
            self.offsets[name] = total
            total += prog.blocks[name].params
        self.nparams = total

    def objective(self):
        q = np.zeros(self.nparams)
        for t in self.prog.objective_terms:
            blk = self.prog.blocks[t.var]
            q[self.offsets[t.var]:self.offsets[t.var] + blk.params] += \
                functional_row(blk.kind, blk.dim, t.coeff)
        return q

    def equality_rows(self):
        rows, rhs = [], []
        for terms, r in self.prog.equalities:
            row = np.zeros(self.nparams)
            for t in terms:
                blk = self.prog.blocks[t.var]
                row[self.offsets[t.var]:self.offsets[t.var] + blk.params] += \
                    functional_row(blk.kind, blk.dim, t.coeff)
            rows.append(row)
            rhs.append(r)
        if self.prog.ellipsoid is not None:
            var, handle = self.prog.ellipsoid
            off = self.offsets[var]
            for u in handle.pinned:
                row = np.zeros(self.nparams)
                row[off:off + u.size] = u
                rows.append(row)
                rhs.append(float(u @ handle.center))
        if not rows:
            return np.zeros((0, self.nparams)), np.zeros(0)
        return np.array(rows), np.array(rhs)

    def reduce_rows(self, rows, rhs):
        """Greedy independent subset of equality rows with consistency check.

        Returns (kept indices, infeasibility message or None). A dropped
        row whose right-hand side disagrees with the induced combination
        of kept rows makes the program infeasible. Runs an incremental
        Cholesky factorization of the kept rows' Gram matrix.
        """
        nr = rows.shape[0]
        if nr == 0:
            return [], None
        gram = rows @ rows.T
        kept = []
        chol = np.zeros((nr, nr))
        tol2 = self.tol.row_independence**2
        for i in range(nr):
            gii = gram[i, i]
            if gii <= tol2:
                # zero row: feasible iff rhs is zero
                if abs(rhs[i]) > self.tol.feasibility:
                    return kept, f"equality row {i} is 0 = {rhs[i]:.3e}"
                continue
            k = len(kept)
            gi = gram[kept, i]
            if k:
                w = solve_triangular(chol[:k, :k], gi, lower=True)
                res2 = gii - w @ w
            else:
                w = np.zeros(0)
                res2 = gii
            if res2 > tol2 * gii:
                chol[k, :k] = w
                chol[k, k] = np.sqrt(max(res2, 1e-300))
                kept.append(i)
            else:
                if k:
                    coef = solve_triangular(chol[:k, :k].T, w, lower=False)
                    implied = float(coef @ rhs[kept])
                else:
                    implied = 0.0
                if abs(rhs[i] - implied) > self.tol.feasibility * max(1.0, abs(rhs[i])):
                    return kept, (f"equality row {i} inconsistent with span of kept rows "
                                  f"({rhs[i]:.6e} vs implied {implied:.6e})")
        return kept, None

    def psd_rows(self, grid, dims, row_base):
        """COO triplets and offsets for one PSD block; returns cone size."""
        side = int(sum(dims))
        embed = self.prog.block_needs_embedding(grid)
        full = 2 * side if embed else side
        svec, nsv = _svec_index_map(full)
        starts = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        coo_r, coo_c, coo_v = [], [], []
        bvec = np.zeros(nsv)

        def emit(i, j, val, col):
            # one real entry of the assembled (embedded) matrix; mirrored
            # entries are emitted separately, hence sqrt(2)/2 off-diagonal
            if abs(val) < 1e-300:
                return
            a, b = (i, j) if i <= j else (j, i)
            k = svec[(a, b)]
            scl = 1.0 if a == b else RT2 / 2.0
            if col is None:
                bvec[k] += val * scl
            else:
                coo_r.append(row_base + k)
                coo_c.append(col)
                coo_v.append(-val * scl)

        def emit_complex(i, j, z, col):
            if embed:
                emit(i, j, z.real, col)
                emit(side + i, side + j, z.real, col)
                emit(side + i, j, z.imag, col)
                emit(i, side + j, -z.imag, col)
            else:
                emit(i, j, z.real, col)

        for r, row in enumerate(grid):
            for c, cell in enumerate(row):
                ro, co = starts[r], starts[c]
                for term in cell or []:
                    if isinstance(term, MatTerm):
                        blk = self.prog.blocks[term.var]
                        off = self.offsets[term.var]
                        for p, i, j, v in _param_entries(blk.kind, blk.dim, term.adjoint):
                            emit_complex(ro + i, co + j, term.scale * v, off + p)
                    elif isinstance(term, VecTerm):
                        off = self.offsets[term.var] + term.index
                        m = np.asarray(term.matrix, dtype=complex)
                        for i in range(m.shape[0]):
                            for j in range(m.shape[1]):
                                if m[i, j] != 0:
                                    emit_complex(ro + i, co + j, m[i, j], off)
                    else:
                        m = np.asarray(term.matrix, dtype=complex)
                        for i in range(m.shape[0]):
                            for j in range(m.shape[1]):
                                if m[i, j] != 0:
                                    emit_complex(ro + i, co + j, m[i, j], None)
        return (coo_r, coo_c, coo_v), bvec, full


def solve(prog: ConicProgram, tolerances: SolverTolerances = None,
          backend: str = "clarabel") -> Solution:
    """Solve the program with the requested backend.

    The default backend lowers directly to the clarabel interior-point
    solver; "cvxpy" routes through cvxpy for cross-validation.
    """
    tol = tolerances or DEFAULT_SOLVER_TOL
    if backend == "clarabel":
        return _solve_clarabel(prog, tol)
    if backend == "cvxpy":
        return _solve_cvxpy(prog, tol)
    raise ValueError(f"unknown backend {backend!r}")


def _solve_clarabel(prog: ConicProgram, tol: SolverTolerances) -> Solution:
    import clarabel

    t0 = time.time()
    asm = _Assembler(prog, tol)
    q = asm.objective()
    rows, rhs = asm.equality_rows()
    n_user_eq = len(prog.equalities)
    kept, bad = asm.reduce_rows(rows, rhs)
    if bad is not None:
        return Solution(status="infeasible", primal_objective=np.nan,
                        dual_objective=np.nan, block_values={},
                        equality_duals=np.zeros(n_user_eq),
                        diagnostics={"certificate": bad, "stage": "presolve"})
    a_parts = [sparse.csr_matrix(rows[kept])] if len(kept) else \
        [sparse.csr_matrix((0, asm.nparams))]
    b_parts = [rhs[kept] if len(kept) else np.zeros(0)]
    cones = [clarabel.ZeroConeT(len(kept))]
    row_base = len(kept)

    if prog.ellipsoid is not None:
        var, handle = prog.ellipsoid
        off = asm.offsets[var]
        nlive = handle.whiten.shape[0]
        soc = np.zeros((1 + nlive, asm.nparams))
        soc_b = np.zeros(1 + nlive)
        soc_b[0] = handle.radius
        soc[1:, off:off + handle.center.size] = -handle.whiten
        soc_b[1:] = -(handle.whiten @ handle.center)
        # s = b - Ax = (radius, whiten (p - center)) in the second-order cone
        soc_b[1:] *= -1.0
        soc[1:] *= -1.0
        a_parts.append(sparse.csr_matrix(soc))
        b_parts.append(soc_b)
        cones.append(clarabel.SecondOrderConeT(1 + nlive))
        row_base += 1 + nlive

    for grid, dims in prog.psd_blocks:
        (cr, cc, cv), bvec, full = asm.psd_rows(grid, dims, row_base)
        mat = sparse.coo_matrix((cv, (np.array(cr) - row_base, cc)),
                                shape=(len(bvec), asm.nparams)).tocsr()
        a_parts.append(mat)
        b_parts.append(bvec)
        cones.append(clarabel.PSDTriangleConeT(full))
        row_base += len(bvec)

    amat = sparse.vstack(a_parts, format="csc")
    bvec = np.concatenate(b_parts)
    pmat = sparse.csc_matrix((asm.nparams, asm.nparams))

    def make_settings():
        s = clarabel.DefaultSettings()
        s.verbose = False
        s.tol_feas = tol.feasibility
        s.tol_gap_abs = tol.gap
        s.tol_gap_rel = tol.gap
        s.max_iter = tol.max_iter
        return s

    solver = clarabel.DefaultSolver(pmat, q, amat, bvec, cones, make_settings())
    sol = solver.solve()
    retried = None
    # Ruiz equilibration occasionally stalls the KKT factorization on
    # highly redundant equality blocks; retry unscaled before giving up.
    if _map_status(str(sol.status)) == "numerical-failure":
        for label in ("no-equilibration", "static-regularization"):
            settings = make_settings()
            settings.equilibrate_enable = False
            if label == "static-regularization":
                settings.static_regularization_constant = 1e-6
            solver = clarabel.DefaultSolver(pmat, q, amat, bvec, cones, settings)
            sol = solver.solve()
            if _map_status(str(sol.status)) != "numerical-failure":
                retried = label
                break

    status = _map_status(str(sol.status))
    x = np.asarray(sol.x)
    values = {}
    if status in ("optimal", "near-optimal"):
        for name in prog.block_order:
            blk = prog.blocks[name]
            off = asm.offsets[name]
            values[name] = value_from_params(blk.kind, blk.dim, x[off:off + blk.params])
    duals = np.zeros(n_user_eq)
    z = np.asarray(sol.z)
    for out_pos, row_idx in enumerate(kept):
        if row_idx < n_user_eq:
            duals[row_idx] = -z[out_pos]
    diag = {
        "iterations": int(sol.iterations),
        "solve_time": float(sol.solve_time),
        "wall_time": time.time() - t0,
        "rows_total": int(rows.shape[0]),
        "rows_kept": len(kept),
        "params": asm.nparams,
        "backend": "clarabel",
        "raw_status": str(sol.status),
    }
    if retried is not None:
        diag["retried"] = retried
    if status == "infeasible":
        diag["certificate"] = "primal infeasibility certificate from solver"
    primal = sol.obj_val + prog.objective_const
    dual = sol.obj_val_dual + prog.objective_const
    if status not in ("optimal", "near-optimal"):
        primal, dual = np.nan, np.nan
    return Solution(status=status, primal_objective=primal, dual_objective=dual,
                    block_values=values, equality_duals=duals, diagnostics=diag)


def _map_status(raw: str) -> str:
    if "AlmostSolved" in raw:
        return "near-optimal"
    if "Solved" in raw:
        return "optimal"
    if "PrimalInfeasible" in raw:
        return "infeasible"
    return "numerical-failure"


def _solve_cvxpy(prog: ConicProgram, tol: SolverTolerances) -> Solution:
    import cvxpy as cp

    t0 = time.time()
    cvars = {}
    for name in prog.block_order:
        blk = prog.blocks[name]
        if blk.kind == "herm":
            cvars[name] = cp.Variable((blk.dim, blk.dim), hermitian=True, name=name)
        elif blk.kind == "sym":
            cvars[name] = cp.Variable((blk.dim, blk.dim), symmetric=True, name=name)
        elif blk.kind == "gen":
            cvars[name] = cp.Variable((blk.dim, blk.dim), complex=True, name=name)
        elif blk.kind == "genr":
            cvars[name] = cp.Variable((blk.dim, blk.dim), name=name)
        else:
            cvars[name] = cp.Variable(blk.dim, name=name)

    def functional(terms):
        expr = 0
        for t in terms:
            v = cvars[t.var]
            if prog.blocks[t.var].kind == "vec":
                expr = expr + np.asarray(t.coeff, dtype=float) @ v
            else:
                c = np.asarray(t.coeff, dtype=complex)
                tr = cp.trace(c.conj().T @ v)
                expr = expr + (cp.real(tr) if tr.is_complex() else tr)
        return expr

    constraints = []
    for terms, rhs in prog.equalities:
        constraints.append(functional(terms) == rhs)
    n_user_eq = len(constraints)

    if prog.ellipsoid is not None:
        var, handle = prog.ellipsoid
        p = cvars[var]
        if handle.whiten.shape[0]:
            constraints.append(
                cp.SOC(handle.radius, handle.whiten @ (p - handle.center)))
        for u in handle.pinned:
            constraints.append(u @ p == float(u @ handle.center))

    for grid, dims in prog.psd_blocks:
        rows = []
        for row in grid:
            cells = []
            for cell in row:
                expr = None
                for term in cell or []:
                    if isinstance(term, MatTerm):
                        v = cvars[term.var]
                        e = term.scale * (cp.conj(v.T) if term.adjoint and
                                          prog.blocks[term.var].kind in ("gen", "herm")
                                          else (v.T if term.adjoint else v))
                    elif isinstance(term, VecTerm):
                        e = cvars[term.var][term.index] * np.asarray(term.matrix)
                    else:
                        e = cp.Constant(np.asarray(term.matrix))
                    expr = e if expr is None else expr + e
                cells.append(expr)
            rows.append(cells)
        for r in range(len(grid)):
            for c in range(len(grid)):
                if rows[r][c] is None:
                    rows[r][c] = np.zeros((dims[r], dims[c]))
        block = cp.bmat(rows)
        if block.is_complex():
            constraints.append(block >> 0)
        else:
            constraints.append((block + block.T) / 2 >> 0)

    obj = functional(prog.objective_terms) + prog.objective_const
    problem = cp.Problem(cp.Minimize(obj), constraints)
    try:
        problem.solve(solver=cp.CLARABEL, verbose=False,
                      tol_feas=tol.feasibility, tol_gap_abs=tol.gap,
                      tol_gap_rel=tol.gap, max_iter=tol.max_iter)
    except cp.error.SolverError as exc:
        return Solution(status="numerical-failure", primal_objective=np.nan,
                        dual_objective=np.nan, block_values={},
                        equality_duals=np.zeros(n_user_eq),
                        diagnostics={"error": str(exc), "backend": "cvxpy"})

    stat_map = {
        cp.OPTIMAL: "optimal",
        cp.OPTIMAL_INACCURATE: "near-optimal",
        cp.INFEASIBLE: "infeasible",
        cp.INFEASIBLE_INACCURATE: "infeasible",
    }
    status = stat_map.get(problem.status, "numerical-failure")
    values, duals = {}, np.zeros(n_user_eq)
    primal = dual = np.nan
    if status in ("optimal", "near-optimal"):
        for name in prog.block_order:
            values[name] = cvars[name].value
        for i in range(n_user_eq):
            # flip cvxpy's sign convention so that dual objective = rhs . y
            duals[i] = -float(np.real(constraints[i].dual_value))
        primal = float(problem.value)
        dual = prog.objective_const
        for i, (_, rhs) in enumerate(prog.equalities):
            dual += rhs * duals[i]
        idx = n_user_eq
        if prog.ellipsoid is not None:
            var, handle = prog.ellipsoid
            if handle.whiten.shape[0]:
                dv = constraints[idx].dual_value
                t_dual = float(dv[0]) if np.ndim(dv[0]) == 0 else float(dv[0][0])
                u_dual = np.asarray(dv[1]).reshape(-1)
                dual += -handle.radius * t_dual + \
                    float((handle.whiten @ handle.center) @ u_dual)
                idx += 1
            for u in handle.pinned:
                dual += -float(u @ handle.center) * float(np.real(constraints[idx].dual_value))
                idx += 1
    return Solution(status=status, primal_objective=primal, dual_objective=dual,
                    block_values=values, equality_duals=duals,
                    diagnostics={"backend": "cvxpy", "raw_status": problem.status,
                                 "wall_time": time.time() - t0})
