"""Command-line surface: rate sweeps, data-driven rates, and utilities.

Exit codes: 0 success, 2 invalid configuration or input, 3 solver or
sampler failure. Every failure prints a single line of the form
"error: <kind>: <reason>" to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import bayes
from . import entropysdp as esdp
from .bases import approximate_mubs, mub_set
from .conic import DEFAULT_SOLVER_TOL, SolverTolerances
from .qcore import subspace_key_rate, tomographic_key_rate
from .quadrature import c_constant, gauss_radau

CSV_HEADER = "protocol,d,k,v,m,H_AE,H_AB,rate,status,seconds"

ENV_TOLERANCES = (
    ("feasibility", "QKDRATES_TOL_FEAS", float),
    ("gap", "QKDRATES_TOL_GAP", float),
    ("max_iter", "QKDRATES_MAX_ITER", int),
)


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _fail(kind: str, message: str) -> None:
    message = " ".join(str(message).split())
    print(f"error: {kind}: {message}", file=sys.stderr)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return str(obj)


def solver_tolerances() -> SolverTolerances:
    """Default tolerances with any environment overrides applied."""
    overrides = {}
    for field_name, var, cast in ENV_TOLERANCES:
        raw = os.environ.get(var)
        if raw is None:
            continue
        try:
            overrides[field_name] = cast(raw)
        except ValueError:
            raise ConfigError(f"{var} must parse as {cast.__name__}, got {raw!r}")
    if overrides:
        return dataclasses.replace(DEFAULT_SOLVER_TOL, **overrides)
    return DEFAULT_SOLVER_TOL


def parse_grid(text: str) -> list:
    """A single value "x" or an inclusive grid "lo:hi:step"."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            vals = [float(parts[0])]
        elif len(parts) == 3:
            lo, hi, step = (float(p) for p in parts)
            if step <= 0:
                raise ConfigError(f"grid step must be positive, got {step}")
            if hi < lo:
                raise ConfigError(f"grid upper bound {hi} below lower bound {lo}")
            vals = []
            i = 0
            while True:
                x = lo + i * step
                if x > hi + 1e-12:
                    break
                vals.append(hi if abs(x - hi) <= 1e-12 else x)
                i += 1
        else:
            raise ConfigError(f"grid must be 'x' or 'lo:hi:step', got {text!r}")
    except ValueError as exc:
        raise ConfigError(f"cannot parse grid {text!r}: {exc}")
    for v in vals:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"visibility {v:g} outside [0, 1]")
    return vals


def _check_m(m: int) -> int:
    if not 1 <= m <= 64:
        raise ConfigError(f"m must lie in [1, 64], got {m}")
    return m


def _solve_options(args) -> esdp.SolveOptions:
    return esdp.SolveOptions(
        real_mode=args.real,
        conjugation=args.conjugation,
        facial=args.facial,
        split=getattr(args, "split", False),
        backend=args.backend,
        tolerances=solver_tolerances(),
        worst_case_hab=getattr(args, "worst_case_hab", False),
    )


def _build_protocol(protocol: str, d: int, k, v):
    if protocol == "mub":
        return esdp.build_mub_protocol(d, v, mub_set(d))
    if protocol == "mub-coarse":
        return esdp.build_mub_protocol(d, v, mub_set(d), full_data=False)
    if protocol == "subspace":
        if k is None:
            raise ConfigError("subspace protocol needs --k")
        return esdp.build_subspace_protocol(d, k, v, mub_set(k))
    if protocol == "overlap":
        return esdp.build_overlap_protocol(d, v)
    raise ConfigError(f"unknown protocol {protocol!r}")


def _analytic_rate(protocol: str, d: int, k, v):
    if v is None:
        return None
    if protocol in ("mub", "mub-coarse"):
        return tomographic_key_rate(v, d)
    if protocol == "subspace":
        return subspace_key_rate(v, k, d)
    return None


def _emit(text: str, output) -> None:
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_rate(args) -> int:
    grid = parse_grid(args.v)
    m = _check_m(args.m)
    rule = gauss_radau(m)
    opts = _solve_options(args)

    def run(v):
        proto = _build_protocol(args.protocol, args.d, args.k, v)
        return esdp.compute_rate(esdp.EntropyProblem(proto, rule, options=opts))

    results = []
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        futures = [pool.submit(run, v) for v in grid]
        for v, fut in zip(grid, futures):
            try:
                results.append(fut.result())
            except (esdp.SolverFailureError, esdp.InfeasibleStatisticsError) as exc:
                _fail("solver", f"grid point v={v:g}: {exc}")
                return 3

    if args.format == "csv":
        lines = [CSV_HEADER]
        lines.extend(",".join(r.csv_row()) for r in results)
        _emit("\n".join(lines) + "\n", args.output)
    else:
        rows = []
        for v, r in zip(grid, results):
            row = r.to_json()
            analytic = _analytic_rate(args.protocol, args.d, args.k, v)
            if analytic is not None:
                row["analytic"] = analytic
            rows.append(row)
        _emit(
            json.dumps({"rows": rows}, indent=2, default=_json_default) + "\n",
            args.output,
        )
    return 0


def cmd_data(args) -> int:
    try:
        data = bayes.load_counts(args.counts)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"counts file: {exc}")
    m = _check_m(args.m)
    if not 0.0 < args.alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {args.alpha}")
    proto = _build_protocol(args.protocol, args.d, args.k, None)
    opts = _solve_options(args)
    try:
        region = bayes.calibrate_region(
            data, proto, args.alpha, n_samples=args.samples, seed=args.seed
        )
    except RuntimeError as exc:
        _fail("region-empty", exc)
        return 3
    prob = esdp.EntropyProblem(proto, rule=gauss_radau(m), options=opts, region=region)
    try:
        res = esdp.compute_rate(prob)
    except esdp.InfeasibleStatisticsError as exc:
        _fail("infeasible", exc)
        return 3
    except esdp.SolverFailureError as exc:
        _fail("solver", exc)
        return 3

    if args.format == "json":
        payload = res.to_json()
        payload["chi"] = region.chi
        payload["alpha"] = region.alpha
        payload["region"] = dict(region.diagnostics)
        _emit(json.dumps(payload, indent=2, default=_json_default) + "\n", args.output)
    else:
        diag = region.diagnostics
        lines = [
            f"rate {res.rate:.6f}",
            f"H_AE {res.H_AE_bound:.6f}",
            f"H_AB {res.H_AB:.6f}",
            f"chi {region.chi:.6f}",
            f"alpha {region.alpha:g}",
            f"sampler {diag.get('sampler', '?')}",
            f"acceptance {diag.get('acceptance', float('nan')):.6f}",
            f"samples {diag.get('samples', 0)}",
            f"status {res.status}",
        ]
        _emit("\n".join(lines) + "\n", args.output)
    return 0


def cmd_quadrature(args) -> int:
    rule = gauss_radau(args.m)
    payload = {
        "m": rule.m,
        "t": rule.t.tolist(),
        "w": rule.w.tolist(),
        "constant": c_constant(rule),
    }
    _emit(json.dumps(payload, indent=2) + "\n", args.output)
    return 0


def cmd_mubgen(args) -> int:
    bs, objective = approximate_mubs(args.d, args.n, restarts=args.restarts, seed=args.seed)
    payload = json.loads(bs.to_json())
    payload["objective"] = objective
    _emit(json.dumps(payload, indent=2) + "\n", args.output)
    return 0


def _add_solver_flags(p, split: bool = True):
    p.add_argument("--real", choices=("auto", "on", "off"), default="auto",
                   help="force or forbid the all-real formulation")
    p.add_argument("--conjugation", choices=("auto", "on", "off"), default="auto",
                   help="real formulation for transpose-closed operator families")
    p.add_argument("--facial", choices=("auto", "on", "off"), default="auto",
                   help="facial reduction of degenerate statistics")
    if split:
        p.add_argument("--split", action="store_true",
                       help="sum of single-node programs instead of the joint bound")
    p.add_argument("--backend", choices=("clarabel", "cvxpy"), default="clarabel")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for grid points")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--output", default=None, help="write to a file instead of stdout")


def build_parser() -> _Parser:
    parser = _Parser(prog="qkdrates", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_rate = sub.add_parser("rate", help="key-rate lower bounds over a visibility grid")
    p_rate.add_argument("protocol", choices=("mub", "mub-coarse", "subspace", "overlap"))
    p_rate.add_argument("--d", type=int, required=True, help="local dimension")
    p_rate.add_argument("--k", type=int, default=None, help="subspace block dimension")
    p_rate.add_argument("--m", type=int, required=True, help="quadrature order")
    p_rate.add_argument("--v", required=True, help="visibility value or lo:hi:step grid")
    _add_solver_flags(p_rate)
    p_rate.set_defaults(func=cmd_rate)

    p_data = sub.add_parser("data", help="key rate from measured counts")
    p_data.add_argument("protocol", choices=("mub", "mub-coarse", "subspace", "overlap"))
    p_data.add_argument("--counts", required=True, help="counts JSON file")
    p_data.add_argument("--d", type=int, required=True)
    p_data.add_argument("--k", type=int, default=None)
    p_data.add_argument("--m", type=int, required=True)
    p_data.add_argument("--alpha", type=float, default=0.05)
    p_data.add_argument("--samples", type=int, default=20000)
    p_data.add_argument("--seed", type=int, default=0)
    p_data.add_argument("--worst-case-hab", action="store_true",
                        help="maximize the error-correction cost over the region")
    _add_solver_flags(p_data, split=False)
    p_data.set_defaults(func=cmd_data)

    p_quad = sub.add_parser("quadrature", help="print one quadrature rule as JSON")
    p_quad.add_argument("--m", type=int, required=True)
    p_quad.add_argument("--output", default=None)
    p_quad.set_defaults(func=cmd_quadrature)

    p_mub = sub.add_parser("mubgen", help="search for approximately unbiased bases")
    p_mub.add_argument("--d", type=int, required=True)
    p_mub.add_argument("--n", type=int, required=True)
    p_mub.add_argument("--restarts", type=int, default=20)
    p_mub.add_argument("--seed", type=int, default=0)
    p_mub.add_argument("--output", default=None)
    p_mub.set_defaults(func=cmd_mubgen)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        _fail("config", exc)
        return 2
    except ValueError as exc:
        _fail("config", exc)
        return 2
    except esdp.SolverFailureError as exc:
        _fail("solver", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
