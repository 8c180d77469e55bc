"""Credible regions for measurement statistics estimated from counts.

Observed counts are summarized by a Gaussian approximation to the
posterior over outcome frequencies (flat prior), truncated to the set of
frequencies some quantum state can actually produce. The region handed to
the rate computation is the ellipsoid (p - f)^T Sigma^-1 (p - f) <= chi^2
with chi calibrated by Monte Carlo so the region carries posterior mass
1 - alpha.

All frequency vectors here use the stacked per-setting convention with
the last outcome of each setting dropped; the dropped entry is recovered
by normalization.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .conic import ConicProgram, MatTerm, Term, VecTerm, solve
from .entropysdp import ProtocolInstance, SolverFailureError

N_PARTITIONS = 8
PILOT_SIZE = 200
PILOT_THRESHOLD = 0.02
BURN_IN = 1000
THINNING = 10
MAX_BISECTION = 40
COMPAT_TOL = 1e-7


@dataclass(frozen=True)
class SettingCounts:
    """Outcome counts of one measurement setting.

    operators[w] is the index of the constraint operator describing
    outcome w in the protocol the counts belong to, or None when that
    operator was pruned as linearly dependent.
    """

    label: str
    operators: tuple
    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts)
        if counts.ndim != 1 or counts.size < 2:
            raise ValueError(f"setting '{self.label}': need at least 2 outcomes")
        if not np.issubdtype(counts.dtype, np.integer):
            rounded = np.rint(counts)
            if np.abs(counts - rounded).max() > 0:
                raise ValueError(f"setting '{self.label}': counts must be integers")
            counts = rounded.astype(np.int64)
        if counts.min() < 0:
            raise ValueError(f"setting '{self.label}': counts must be nonnegative")
        if counts.sum() < 1:
            raise ValueError(f"setting '{self.label}': all counts are zero")
        ops = tuple(None if o is None else int(o) for o in self.operators)
        if len(ops) != counts.size:
            raise ValueError(
                f"setting '{self.label}': {len(ops)} operators for "
                f"{counts.size} outcomes"
            )
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "operators", ops)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class CountsDataset:
    """Counts of all settings plus their mapping into a protocol."""

    settings: tuple

    def __post_init__(self):
        object.__setattr__(self, "settings", tuple(self.settings))
        if not self.settings:
            raise ValueError("dataset has no settings")


@dataclass(frozen=True)
class RegionSetting:
    """Slice [start, stop) of the region coordinates owned by one setting."""

    label: str
    start: int
    stop: int
    last_op: int | None


@dataclass(frozen=True)
class CredibleRegion:
    """Calibrated posterior ellipsoid over outcome frequencies."""

    f: np.ndarray
    sigma: np.ndarray
    chi: float
    alpha: float
    op_indices: tuple
    settings: tuple
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.array(self.f, dtype=float)
        sigma = np.array(self.sigma, dtype=float)
        if self.chi < 0:
            raise ValueError("chi must be nonnegative")
        if sigma.shape != (f.size, f.size):
            raise ValueError("covariance shape does not match f")
        if len(self.op_indices) != f.size:
            raise ValueError("operator index list does not match f")
        f.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "op_indices", tuple(self.op_indices))
        object.__setattr__(self, "settings", tuple(self.settings))


def gaussian_from_counts(data: CountsDataset):
    """Mean vector and covariance of the frequency posterior.

    Per setting the mean is counts/N with the last outcome dropped and the
    covariance block is (diag(mu) - mu mu^T)/N. Zero counts enter the
    covariance as a single count (taken from the largest outcome so the
    total stays N), which keeps the block nonsingular.
    """
    fs = []
    blocks = []
    for s in data.settings:
        c = np.asarray(s.counts, dtype=float)
        n = c.sum()
        if n < 1:
            raise ValueError(f"setting '{s.label}': all counts are zero")
        fs.append(c[:-1] / n)
        ct = c.copy()
        zero = ct == 0
        if zero.any():
            moved = float(zero.sum())
            ct[zero] = 1.0
            top = int(np.argmax(c))
            if ct[top] - moved >= 1.0:
                ct[top] -= moved
            else:
                ct *= n / ct.sum()
        mu = (ct / n)[:-1]
        blocks.append((np.diag(mu) - np.outer(mu, mu)) / n)
    f = np.concatenate(fs)
    dim = f.size
    sigma = np.zeros((dim, dim))
    pos = 0
    for b in blocks:
        k = b.shape[0]
        sigma[pos : pos + k, pos : pos + k] = b
        pos += k
    return f, sigma


def region_layout(data: CountsDataset):
    """Coordinate-to-operator mapping implied by the dataset ordering."""
    op_indices = []
    settings = []
    pos = 0
    for s in data.settings:
        k = len(s.operators)
        op_indices.extend(s.operators[: k - 1])
        settings.append(RegionSetting(s.label, pos, pos + k - 1, s.operators[-1]))
        pos += k - 1
    return tuple(op_indices), tuple(settings)


def initial_chi(kappa: int, alpha: float) -> float:
    """Radius whose ellipsoid holds mass 1-alpha of a kappa-dim Gaussian."""
    if int(kappa) != kappa or kappa < 1:
        raise ValueError(f"kappa must be a positive integer, got {kappa}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return float(np.sqrt(stats.chi2.ppf(1.0 - alpha, int(kappa))))


def _lambda_max(dim: int, ops, values) -> float:
    """Largest minimum eigenvalue over unit-trace states matching values.

    Returns -inf when no Hermitian solution exists at all.
    """
    prog = ConicProgram()
    sigma = prog.add_variable("sigma", "herm", dim)
    lam = prog.add_variable("lam", "vec", 1)
    prog.set_objective(0.0, [Term(lam, np.array([-1.0]))])
    prog.add_equality([Term(sigma, np.eye(dim))], 1.0)
    for e, val in zip(ops, values):
        prog.add_equality([Term(sigma, np.asarray(e))], float(val))
    prog.add_psd([[[MatTerm(sigma), VecTerm(lam, 0, -np.eye(dim))]]])
    sol = solve(prog)
    if sol.status == "infeasible":
        return -np.inf
    if sol.status not in ("optimal", "near-optimal"):
        raise SolverFailureError(
            f"compatibility check failed with status {sol.status}", sol.status
        )
    return -sol.primal_objective


def is_quantum_compatible(p, protocol: ProtocolInstance) -> bool:
    """Whether some state reproduces the full probability vector p.

    p holds one entry per protocol constraint operator. Entries outside
    [0, 1] are rejected without solving.
    """
    p = np.asarray(p, dtype=float)
    nops = len(protocol.constraint_ops)
    if p.shape != (nops,):
        raise ValueError(f"expected {nops} probabilities, got shape {p.shape}")
    if p.min() < -1e-12 or p.max() > 1.0 + 1e-12:
        return False
    lam = _lambda_max(protocol.d ** 2, protocol.constraint_ops, p)
    return lam >= -COMPAT_TOL


def _region_checker(protocol, op_indices, settings):
    """Compatibility test for region-coordinate vectors.

    Re-expands each setting's dropped outcome by normalization, applies
    cheap necessary conditions, then solves the feasibility program over
    the covered operators.
    """
    cons = [np.asarray(e) for e in protocol.constraint_ops]
    ops = []
    pick = []
    for r, idx in enumerate(op_indices):
        if idx is not None:
            ops.append(cons[idx])
            pick.append(("coord", r))
    for s in settings:
        if s.last_op is not None:
            ops.append(cons[s.last_op])
            pick.append(("last", s))
    dim = protocol.d ** 2

    def check(x) -> bool:
        x = np.asarray(x, dtype=float)
        if x.min() < -1e-12 or x.max() > 1.0 + 1e-12:
            return False
        values = []
        for kind, ref in pick:
            if kind == "coord":
                values.append(x[ref])
            else:
                rest = 1.0 - x[ref.start : ref.stop].sum()
                if rest < -1e-12:
                    return False
                values.append(max(rest, 0.0))
        return _lambda_max(dim, ops, values) >= -COMPAT_TOL

    return check


def _posterior_sqrt(sigma: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _chain_start(f, sigma, checker, protocol, op_indices, settings, rng):
    """Compatible starting point for the Metropolis chain.

    Projects f onto the compatible set: feasibility programs over growing
    ellipsoids around f, each maximizing the minimum eigenvalue, then a
    last-resort scan of random posterior draws.
    """
    from .conic import ellipsoid_constraint

    if checker(f):
        return f, 0
    cons = [np.asarray(e) for e in protocol.constraint_ops]
    dim = protocol.d ** 2
    r_dim = len(op_indices)

    def try_radius(radius):
        prog = ConicProgram()
        sigma_v = prog.add_variable("sigma", "herm", dim)
        lam = prog.add_variable("lam", "vec", 1)
        pvec = prog.add_variable("freq", "vec", r_dim)
        prog.set_objective(0.0, [Term(lam, np.array([-1.0]))])
        prog.add_equality([Term(sigma_v, np.eye(dim))], 1.0)
        for r, idx in enumerate(op_indices):
            if idx is None:
                continue
            unit = np.zeros(r_dim)
            unit[r] = -1.0
            prog.add_equality([Term(sigma_v, cons[idx]), Term(pvec, unit)], 0.0)
        for s in settings:
            if s.last_op is None:
                continue
            ones = np.zeros(r_dim)
            ones[s.start : s.stop] = 1.0
            prog.add_equality([Term(sigma_v, cons[s.last_op]), Term(pvec, ones)], 1.0)
        prog.add_psd([[[MatTerm(sigma_v), VecTerm(lam, 0, -np.eye(dim))]]])
        prog.set_ellipsoid(pvec, ellipsoid_constraint(f, sigma, radius))
        sol = solve(prog)
        if sol.status in ("optimal", "near-optimal") and -sol.primal_objective >= -COMPAT_TOL:
            return np.asarray(sol.block_values["freq"], dtype=float)
        return None

    try:
        radius = 1.0
        for _ in range(12):
            x = try_radius(radius)
            if x is not None and checker(x):
                return x, 0
            radius *= 2.0
    except SolverFailureError:
        pass
    scale = _posterior_sqrt(sigma)
    for attempt in range(100):
        x = f + scale @ rng.standard_normal(f.size)
        try:
            if checker(x):
                return x, attempt + 1
        except SolverFailureError:
            continue
    raise RuntimeError(
        "sampler failure: no quantum-compatible point found near the data "
        "after 100 random restarts"
    )


def _safe_check(checker, x, stats_box):
    try:
        return checker(x)
    except SolverFailureError:
        stats_box["indeterminate"] += 1
        return False


def _rejection_partition(f, scale, checker, quota, rng, stats_box):
    out = np.empty((quota, f.size))
    got = 0
    proposals = 0
    cap = 500 * quota + 1000
    while got < quota:
        if proposals >= cap:
            raise RuntimeError(
                "sampler failure: rejection sampling acceptance collapsed"
            )
        x = f + scale @ rng.standard_normal(f.size)
        proposals += 1
        if _safe_check(checker, x, stats_box):
            out[got] = x
            got += 1
    return out, proposals


def _metropolis_partition(f, sigma_inv, step_scale, checker, start, quota, rng, stats_box):
    x = np.array(start, dtype=float)
    dx = x - f
    logp = -0.5 * float(dx @ sigma_inv @ dx)
    out = np.empty((quota, f.size))
    accepted = 0
    proposals = 0
    got = 0
    steps_needed = BURN_IN + THINNING * quota
    for step in range(steps_needed):
        y = x + step_scale @ rng.standard_normal(f.size)
        dy = y - f
        logq = -0.5 * float(dy @ sigma_inv @ dy)
        proposals += 1
        if math.log(rng.uniform()) <= logq - logp and _safe_check(checker, y, stats_box):
            x, logp = y, logq
            accepted += 1
        if step >= BURN_IN and (step - BURN_IN) % THINNING == THINNING - 1:
            out[got] = x
            got += 1
    return out, proposals, accepted


def calibrate_region(
    data: CountsDataset,
    protocol: ProtocolInstance,
    alpha: float,
    n_samples: int = 20000,
    seed: int = 0,
    compatible=None,
) -> CredibleRegion:
    """Monte Carlo calibration of the credible-region radius chi.

    Draws n_samples from the Gaussian posterior truncated to the
    quantum-compatible set (rejection sampling when a 200-draw pilot
    accepts more than 2%, Metropolis otherwise) and bisects chi until the
    ellipsoid holds a fraction 1-alpha of them, up to twice the binomial
    standard error. Deterministic for fixed (data, seed). A callable
    `compatible` overrides the built-in feasibility test.
    """
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples for calibration")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    f, sigma = gaussian_from_counts(data)
    op_indices, settings = region_layout(data)
    checker = compatible if compatible is not None else _region_checker(
        protocol, op_indices, settings
    )
    kappa = f.size
    chi0 = initial_chi(kappa, alpha)
    scale = _posterior_sqrt(sigma)
    sigma_inv = np.linalg.pinv(sigma)

    master = np.random.default_rng(seed)
    rngs = master.spawn(2 + N_PARTITIONS)
    pilot_rng, start_rng = rngs[0], rngs[1]
    part_rngs = rngs[2:]
    stats_box = {"indeterminate": 0}

    pilot_hits = 0
    for _ in range(PILOT_SIZE):
        x = f + scale @ pilot_rng.standard_normal(kappa)
        if _safe_check(checker, x, stats_box):
            pilot_hits += 1
    pilot_rate = pilot_hits / PILOT_SIZE

    quotas = [n_samples // N_PARTITIONS] * N_PARTITIONS
    for i in range(n_samples % N_PARTITIONS):
        quotas[i] += 1
    diagnostics = {
        "pilot_acceptance": pilot_rate,
        "samples": n_samples,
        "chi0": chi0,
    }
    if pilot_rate > PILOT_THRESHOLD:
        diagnostics["sampler"] = "rejection"
        with ThreadPoolExecutor(max_workers=N_PARTITIONS) as pool:
            parts = list(
                pool.map(
                    lambda args: _rejection_partition(
                        f, scale, checker, args[0], args[1], stats_box
                    ),
                    zip(quotas, part_rngs),
                )
            )
        samples = np.concatenate([p[0] for p in parts])
        proposals = sum(p[1] for p in parts)
        diagnostics["acceptance"] = n_samples / proposals
        restarts = 0
    else:
        diagnostics["sampler"] = "metropolis"
        start, restarts = _chain_start(
            f, sigma, checker, protocol, op_indices, settings, start_rng
        )
        step_scale = scale * math.sqrt(0.5)
        with ThreadPoolExecutor(max_workers=N_PARTITIONS) as pool:
            parts = list(
                pool.map(
                    lambda args: _metropolis_partition(
                        f, sigma_inv, step_scale, checker, start,
                        args[0], args[1], stats_box,
                    ),
                    zip(quotas, part_rngs),
                )
            )
        samples = np.concatenate([p[0] for p in parts])
        proposals = sum(p[1] for p in parts)
        diagnostics["acceptance"] = sum(p[2] for p in parts) / proposals
    diagnostics["proposals"] = proposals
    diagnostics["restarts"] = restarts
    diagnostics["indeterminate"] = stats_box["indeterminate"]

    diff = samples - f
    dist = np.sqrt(np.einsum("ij,jk,ik->i", diff, sigma_inv, diff))
    target = 1.0 - alpha
    tol_est = 2.0 * math.sqrt(alpha * (1.0 - alpha) / n_samples)
    lo, hi = 0.0, 10.0 * chi0
    chi = hi
    est = 1.0
    for step in range(MAX_BISECTION):
        chi = 0.5 * (lo + hi)
        est = float(np.mean(dist <= chi))
        if abs(est - target) <= tol_est:
            break
        if est < target:
            lo = chi
        else:
            hi = chi
    diagnostics["bisection_steps"] = step + 1
    diagnostics["mass_estimate"] = est
    return CredibleRegion(
        f=f, sigma=sigma, chi=chi, alpha=alpha,
        op_indices=op_indices, settings=settings, diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# counts input and synthetic data


def load_counts(source) -> CountsDataset:
    """Dataset from a JSON file path, JSON text, or parsed mapping.

    Expected shape: {"settings": [{"label": str, "operators": [int or
    null, ...], "counts": [int, ...]}, ...]}.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        text = path.read_text() if path.exists() else str(source)
        obj = json.loads(text)
    else:
        obj = source
    if not isinstance(obj, dict) or "settings" not in obj:
        raise ValueError("counts file must be an object with a 'settings' list")
    settings = []
    for i, raw in enumerate(obj["settings"]):
        label = raw.get("label", f"setting-{i}")
        for key in ("operators", "counts"):
            if key not in raw:
                raise ValueError(f"setting '{label}': missing '{key}'")
        settings.append(SettingCounts(label, tuple(raw["operators"]), raw["counts"]))
    return CountsDataset(tuple(settings))


def counts_to_json(data: CountsDataset) -> dict:
    return {
        "settings": [
            {
                "label": s.label,
                "operators": list(s.operators),
                "counts": [int(c) for c in s.counts],
            }
            for s in data.settings
        ]
    }


def _locate_operator(cons, target) -> int | None:
    for i, e in enumerate(cons):
        if np.abs(e - target).max() < 1e-10:
            return i
    return None


def mub_counts_layout(protocol: ProtocolInstance, bases):
    """Per-basis outcome -> constraint-operator index for full-data counts.

    Outcomes are the d^2 ordered pairs (i, j) per basis; operators pruned
    from the protocol as linearly dependent map to None.
    """
    from .entropysdp import _product_constraints

    ops, index = _product_constraints(bases)
    cons = [np.asarray(e) for e in protocol.constraint_ops]
    layout = []
    for k in range(bases.n):
        idxs = tuple(
            _locate_operator(cons, e)
            for (kk, _, _), e in zip(index, ops)
            if kk == k
        )
        layout.append((f"basis-{k}", idxs))
    return layout


def simulate_mub_counts(
    d: int, v: float, bases, protocol: ProtocolInstance, shots: int, seed: int = 0
) -> CountsDataset:
    """Multinomial counts of the full-data protocol on an isotropic state."""
    rng = np.random.default_rng(seed)
    probs = np.array(
        [
            v * (1.0 if i == j else 0.0) / d + (1.0 - v) / d**2
            for i in range(d)
            for j in range(d)
        ]
    )
    settings = []
    for label, idxs in mub_counts_layout(protocol, bases):
        counts = rng.multinomial(shots, probs)
        settings.append(SettingCounts(label, idxs, counts))
    return CountsDataset(tuple(settings))
