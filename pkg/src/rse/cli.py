"""``rse`` command line: analyze | estimate | montecarlo.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from rse import experiment as ex
from rse.identifiability import analyze
from rse.measurements import (MeasurementSet, PlanError, ScaleBy, inject_outliers, jacobian_polar,
                              measurement_matrices, random_state, simulate, to_polar)
from rse.network import CaseFormatError
from rse.sdr import EstimateOptions, SolverError, SolverOptions, default_lambda, robust_estimate
from rse.wls import Converged, GaussNewtonOptions, flat_start, gauss_newton

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--case", default="builtin:ieee30", help="case JSON path or builtin:<name>")
    p.add_argument("--plan", default="builtin:ieee30", help="plan JSON path or builtin:ieee30")
    p.add_argument("--out", help="output directory (default: stdout only)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rse", description="Robust power-system state estimation via semidefinite relaxation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="identifiability report of the Jacobian at flat start")
    _common(a)
    a.add_argument("--drop-ref-angle", action="store_true", help="remove the reference angle column first")

    e = sub.add_parser("estimate", help="single estimation on given or simulated measurements")
    _common(e)
    e.add_argument("--method", choices=ex.METHODS, default="sdr")
    e.add_argument("--measurements", help="MeasurementSet JSON; simulated from --seed when omitted")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--outlier-meter", type=int, action="append", default=[],
                   help="0-based meter index to scale by --outlier-factor (simulation only, repeatable)")
    e.add_argument("--outlier-factor", type=float, default=1.2)
    e.add_argument("--lambda", dest="lam", type=float)
    e.add_argument("--kappa", type=float, default=6.0)
    e.add_argument("--samples", type=int, default=100)
    e.add_argument("--tol", type=float, default=1e-6)
    e.add_argument("--max-iters", type=int, default=50)
    e.add_argument("--cond-max", type=float, default=1e8)
    e.add_argument("--start", choices=("flat", "truth", "custom"), default="flat")
    e.add_argument("--x0", help="JSON list [|V|..., angle...] for --start custom")

    m = sub.add_parser("montecarlo", help="seeded WLS vs SDR Monte-Carlo study")
    _common(m)
    m.add_argument("--config", help="scenario JSON; command-line flags override it")
    m.add_argument("--runs", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--lambda", dest="lam", type=float)
    m.add_argument("--kappa", type=float)
    m.add_argument("--samples", type=int)
    m.add_argument("--workers", type=int)
    m.add_argument("--methods", help="comma-separated subset of wls,sdr")
    return parser


def _emit(obj: dict, out: str | None, name: str):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)
    sys.stdout.write(text)


def cmd_analyze(args) -> int:
    net = ex.resolve_case(args.case)
    plan = ex.resolve_plan(args.plan, net)
    coeffs = measurement_matrices(net, plan)
    J = jacobian_polar(coeffs, flat_start(net.n_buses))
    if args.drop_ref_angle:
        J = np.delete(J, net.n_buses + net.ref_bus - 1, axis=1)
    report = analyze(J)
    _emit(json.loads(report.to_json()), args.out, "identifiability.json")
    return EXIT_OK


def _measurements(args, net, plan, coeffs):
    if args.measurements:
        ms = MeasurementSet.from_json(Path(args.measurements).read_text())
        if ms.m != len(plan):
            raise ex.ConfigError(f"measurement file has {ms.m} readings, plan has {len(plan)}")
        return ms
    v = random_state(net.n_buses, args.seed, ref_bus=net.ref_bus)
    ms = simulate(coeffs, plan, v, args.seed)
    if args.outlier_meter:
        bad = [i for i in args.outlier_meter if not 0 <= i < len(plan)]
        if bad:
            raise ex.ConfigError(f"outlier meter index out of range: {bad}")
        ms = inject_outliers(ms, args.outlier_meter, ScaleBy(args.outlier_factor))
    return ms


def cmd_estimate(args) -> int:
    net = ex.resolve_case(args.case)
    plan = ex.resolve_plan(args.plan, net)
    coeffs = measurement_matrices(net, plan)
    ms = _measurements(args, net, plan, coeffs)
    record = {"method": args.method, "true_outliers": np.flatnonzero(ms.true_outliers).tolist()}
    if args.method == "wls":
        if args.start == "flat":
            x0 = flat_start(net.n_buses)
        elif args.start == "truth":
            if ms.v_true is None:
                raise ex.ConfigError("--start truth needs measurements with v_true")
            x0 = to_polar(ms.v_true)
        else:
            if not args.x0:
                raise ex.ConfigError("--start custom needs --x0")
            x0 = np.array(json.loads(args.x0), dtype=float)
        g = gauss_newton(coeffs, ms, x0, net.ref_bus, GaussNewtonOptions(args.tol, args.max_iters, args.cond_max))
        record.update(status=type(g.status).__name__, detail=vars(g.status), step_norms=g.step_norms,
                      costs=g.costs, v_re=g.v.real.tolist(), v_im=g.v.imag.tolist())
        v_hat = g.v
        code = EXIT_OK if isinstance(g.status, Converged) else EXIT_RUNTIME
    else:
        lam = args.lam
        if lam is None:
            lam = default_lambda(ms.w, args.kappa)
            warnings.warn(f"no --lambda given; using kappa * median(sqrt(w)) = {lam:.6g}", stacklevel=1)
        est, a, sol = robust_estimate(net, plan, ms, lam, EstimateOptions(SolverOptions(), args.samples, args.seed),
                                      coeffs=coeffs)
        record.update(sol.to_dict())
        record.update(lam=lam, support=np.flatnonzero(a).tolist(), extraction=est.method,
                      rank_of_V=est.rank_of_V, fit_cost=est.fit_cost,
                      v_re=est.v.real.tolist(), v_im=est.v.imag.tolist())
        v_hat = est.v
        code = EXIT_OK
    if ms.v_true is not None:
        ang, mag = ex.bus_errors(v_hat, ms.v_true, net.ref_bus)
        record.update(angle_err=ang.tolist(), mag_err=mag.tolist())
    _emit(record, args.out, "estimate.json")
    return code


def cmd_montecarlo(args) -> int:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(base, dict):
        raise ex.ConfigError("config must be a JSON object")
    overrides = {"case": args.case, "plan": args.plan, "n_runs": args.runs, "seed": args.seed,
                 "lam": args.lam, "kappa": args.kappa, "samples": args.samples, "workers": args.workers}
    if args.methods:
        overrides["methods"] = tuple(s.strip() for s in args.methods.split(","))
    for k, v in overrides.items():
        if v is not None and not (k in ("case", "plan") and args.config and v == "builtin:ieee30"):
            base[k] = v
    cfg = ex.ScenarioConfig.from_dict(base)
    if not args.out:
        raise ex.ConfigError("montecarlo needs --out")
    records = ex.run_montecarlo(cfg)
    summary = ex.write_outputs(records, cfg, args.out)
    _emit({"counts": summary.counts,
           "network_mean_angle_err": {m: summary.network_mean_angle(m) for m in cfg.methods}}, None, "")
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "estimate": cmd_estimate, "montecarlo": cmd_montecarlo}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ex.ConfigError, CaseFormatError, PlanError, FileNotFoundError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"rse: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"rse: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
