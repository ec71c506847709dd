"""Command-line front end.

Exit status is 0 on success, 1 on bad input and 2 when the problem is
infeasible, unsolvable or a numerical guard trips.  Every run writes
``report.json``; failures record a single ``reason`` string there and on
stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import auxiliary, duality, portfolio, riccati
from .exceptions import InputError, MFLQError
from .model import load_problem, normalize, validate
from .simulate import SimulationConfig, simulate, write_paths_csv

OUTPUT_ENV = "MFLQ_OUTPUT_DIR"


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(args):
    # worker count is left out: it never changes the results
    keys = ("substeps", "quadrature", "paths", "steps", "seed", "antithetic",
            "sigma3", "preset", "element", "lo", "hi", "points", "keep_paths")
    over = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return {"command": args.command, "input_path": args.file, "overrides": over}


def _solve_report(sol):
    cert = sol.certificate
    return {
        "case": sol.case.to_dict(),
        "certificate": cert.to_dict(),
        "min_eig_P": sol.riccati.min_eig_P,
        "consistency_PK_minus_H": auxiliary.consistency_check(sol.riccati, sol.aux),
    }


def _write_feedback_csv(path, sol):
    fb = sol.feedback
    m, n = fb.Theta.shape[1:]
    t = np.arange(fb.Theta.shape[0]) * (fb.horizon / fb.n_intervals)
    cols = [f"Theta{i + 1}{j + 1}" for i in range(m) for j in range(n)] + [f"u0_{i + 1}" for i in range(m)]
    with open(path, "w") as fh:
        fh.write(",".join(["t"] + cols) + "\n")
        for k in range(t.shape[0]):
            vals = list(fb.Theta[k].ravel()) + list(fb.u0[k])
            fh.write(",".join(repr(float(v)) for v in [t[k]] + vals) + "\n")


# -- commands ----------------------------------------------------------------------

def cmd_check(args, out):
    spec = normalize(load_problem(args.file))
    case = validate(spec)
    feas = duality.feasibility(spec)
    report = {"case": case.to_dict(), "feasibility": feas.to_dict()}
    ric = riccati.integrate(spec, substeps=args.substeps, case=case)
    report["positivity"] = riccati.check_uniform_positivity(ric, spec, case).to_dict()
    aux = auxiliary.solve_auxiliary(spec, ric)
    report["consistency_PK_minus_H"] = auxiliary.consistency_check(ric, aux)
    Psi, psi, Delta = duality.compute_psi(spec, ric, aux, args.quadrature)
    Phi = None
    if aux.K is not None:
        Phi, _, _ = duality.compute_phi(spec, ric, aux, args.quadrature)
    report["verdicts"] = duality.solvability(Psi, Phi, spec.cost.G, spec.cost.Gbar).to_dict()
    report["min_eig_Psi"] = float(np.linalg.eigvalsh(Psi).min())
    with open(out / "riccati.csv", "w") as fh:
        riccati.write_csv(ric, fh)
    return report


def cmd_solve(args, out):
    sol = duality.solve(load_problem(args.file), substeps=args.substeps, quadrature=args.quadrature)
    with open(out / "riccati.csv", "w") as fh:
        riccati.write_csv(sol.riccati, fh)
    _write_feedback_csv(out / "feedback.csv", sol)
    return _solve_report(sol)


def cmd_simulate(args, out):
    sol = duality.solve(load_problem(args.file), substeps=args.substeps, quadrature=args.quadrature)
    cfg = SimulationConfig(n_paths=args.paths, n_steps=args.steps, master_seed=args.seed,
                           antithetic=args.antithetic, n_workers=args.workers, keep_paths=args.keep_paths)
    rep = simulate(sol.original, sol.feedback, cfg)
    if args.keep_paths:
        with open(out / "paths.csv", "w") as fh:
            write_paths_csv(rep, sol.original.grid.horizon, fh)
    report = _solve_report(sol)
    d = sol.certificate.d_star
    report["simulation"] = rep.to_dict()
    report["simulation"]["z_mean_XT"] = ((rep.mean_XT - d) / rep.se_XT).tolist()
    report["simulation"]["z_cost"] = (rep.cost - sol.certificate.value) / rep.se_cost
    return report


def _load_market(args):
    if args.file is None:
        mv = portfolio.reference_market(args.preset or "benchmark", use_sigma3=args.sigma3)
        return mv, args.steps or 50
    if args.preset:
        raise InputError("give either a market file or --preset, not both")
    mv, steps = portfolio.load_mv(args.file)
    if args.sigma3:
        if mv.n < 3:
            raise InputError("--sigma3 needs at least three assets")
        sig = mv.sigma.copy()
        sig[2] = portfolio.SIGMA3_ALT
        mv = portfolio.MVModel(mv.mu, sig, mv.upsilon, mv.Sigma, mv.x0, mv.T)
    return mv, args.steps or steps


def cmd_mv(args, out):
    mv, steps = _load_market(args)
    sol = portfolio.solve_mv(mv, steps=steps, substeps=args.substeps, quadrature=args.quadrature)
    cert = sol.certificate
    cf = portfolio.closed_form_value(mv, sol.riccati.P0)
    report = _solve_report(sol)
    report["market"] = mv.to_dict()
    report["J_preference"] = portfolio.preference_value(mv, cert.value)
    report["closed_form"] = {"value": cf.value, "value_unshifted_reading": cf.value_unshifted,
                             "minus_pipeline_value": -cert.value, "d_star": cf.d_star}
    with open(out / "riccati.csv", "w") as fh:
        riccati.write_csv(sol.riccati, fh)
    return report


def _parse_element(text, n):
    try:
        i, j = (int(s) for s in text.split(","))
    except ValueError:
        raise InputError(f"--element must look like 'i,j', got {text!r}") from None
    if not (1 <= i <= n and 1 <= j <= n):
        raise InputError(f"--element indices must lie in 1..{n}")
    return i - 1, j - 1


def cmd_sweep(args, out):
    mv, steps = _load_market(args)
    i, j = _parse_element(args.element, mv.n)
    lo, hi = portfolio.default_range(mv.Sigma, i, j)
    lo = lo if args.lo is None else args.lo
    hi = hi if args.hi is None else args.hi
    if args.points < 2:
        raise InputError("--points must be >= 2")
    values = np.linspace(lo, hi, args.points)
    rows = portfolio.sweep(mv, (i, j), values, steps=steps, substeps=args.substeps)
    with open(out / "sweep.csv", "w") as fh:
        portfolio.write_sweep_csv(rows, fh)
    verdict = portfolio.sweep_verdict(rows, i == j)
    return {"element": portfolio.element_name(i, j), "range": [lo, hi], "verdict": verdict,
            "skipped": sum(r.skipped for r in rows)}


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "simulate": cmd_simulate, "mv": cmd_mv, "sweep": cmd_sweep}


def build_parser():
    p = argparse.ArgumentParser(prog="mflq", description="Mean-field LQ solver with a terminal mean-field cost.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or the current directory)")
    common.add_argument("--substeps", type=int, default=8, help="RK4 substeps per grid cell")
    common.add_argument("--quadrature", choices=duality.QUADRATURES, default="rk4",
                        help="rule for the dual-form integrals")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("check", "solve"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("file")
    s = sub.add_parser("simulate", parents=[common])
    s.add_argument("file")
    s.add_argument("--paths", type=int, default=10_000)
    s.add_argument("--steps", type=int, default=None, help="Euler steps (multiple of the grid steps)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--antithetic", action="store_true")
    s.add_argument("--keep-paths", type=int, default=0, help="dump the first K paths to paths.csv")
    for name in ("mv", "sweep"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("file", nargs="?", help="market JSON (omit to use --preset)")
        s.add_argument("--preset", choices=("initial", "benchmark"))
        s.add_argument("--sigma3", action="store_true", help="use 0.30 for the third volatility")
        s.add_argument("--steps", type=int, default=None, help="time grid steps")
        if name == "sweep":
            s.add_argument("--element", required=True, help="1-based 'i,j'")
            s.add_argument("--from", dest="lo", type=float)
            s.add_argument("--to", dest="hi", type=float)
            s.add_argument("--points", type=int, default=21)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; 2 is reserved for solver failures here
        return 1 if exc.code else 0
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
    payload = {"manifest": _manifest(args)}
    try:
        if args.substeps < 1:
            raise InputError("--substeps must be >= 1")
        out.mkdir(parents=True, exist_ok=True)
        payload.update(COMMANDS[args.command](args, out))
        payload["status"] = "ok"
        code = 0
    except (InputError, OSError, ValueError, TypeError) as exc:
        reason = exc.reason if isinstance(exc, MFLQError) else f"input: {exc}"
        payload.update(status="error", reason=reason)
        code = 1
    except MFLQError as exc:
        payload.update(status="error", reason=exc.reason)
        code = 2
    if code:
        print(payload["reason"], file=sys.stderr)
    try:
        _write_json(out / "report.json", payload)
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
