"""Seeded Monte-Carlo comparison of Gauss-Newton WLS and the SDR robust estimator."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rse.measurements import (AddOffset, MeasurementPlan, ScaleBy, SetTo,
                              flows_and_voltages_plan, inject_outliers, load_plan,
                              measurement_matrices, random_state, simulate)
from rse.network import Network, builtin_case, load_case
from rse.sdr import EstimateOptions, SolverError, align_phase, default_lambda, robust_estimate
from rse.wls import Converged, GaussNewtonOptions, flat_start, gauss_newton

log = logging.getLogger(__name__)

METHODS = ("wls", "sdr")
BUILTIN_PREFIX = "builtin:"


class ConfigError(ValueError):
    """Invalid scenario configuration."""


@dataclass(frozen=True)
class OutlierPolicy:
    count: int = 1
    mode: str = "scale"  # scale | set | offset
    value: float = 1.2
    kinds: tuple = ("flow_p", "flow_q")

    def make(self):
        return {"scale": ScaleBy, "set": SetTo, "offset": AddOffset}[self.mode](self.value)


@dataclass(frozen=True)
class ScenarioConfig:
    case: str = "builtin:ieee30"
    plan: str = "builtin:ieee30"
    n_runs: int = 100
    seed: int = 0
    outliers: OutlierPolicy = field(default_factory=OutlierPolicy)
    lam: float | None = None  # None: per-run default_lambda(w, kappa)
    kappa: float = 6.0
    methods: tuple = METHODS
    samples: int = 100
    noise_scale: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigError("n_runs must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
        if self.outliers.count < 0:
            raise ConfigError("outlier count must be non-negative")
        if self.outliers.mode not in ("scale", "set", "offset"):
            raise ConfigError(f"unknown outlier mode {self.outliers.mode!r}")
        if self.lam is not None and not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if self.samples < 1:
            raise ConfigError("samples must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "outliers" in d:
            o = dict(d["outliers"])
            if "kinds" in o:
                o["kinds"] = tuple(o["kinds"])
            try:
                d["outliers"] = OutlierPolicy(**o)
            except TypeError as exc:
                raise ConfigError(str(exc)) from None
        if "methods" in d:
            d["methods"] = tuple(d["methods"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def resolve_case(spec: str) -> Network:
    if spec.startswith(BUILTIN_PREFIX):
        net = builtin_case(spec[len(BUILTIN_PREFIX):])
    else:
        net = load_case(spec)
    if not net.is_connected():
        warnings.warn(f"network {net.name or spec!r} is not connected", stacklevel=2)
    return net


def resolve_plan(spec: str, net: Network) -> MeasurementPlan:
    if spec.startswith(BUILTIN_PREFIX):
        if spec[len(BUILTIN_PREFIX):] != "ieee30":
            raise ConfigError(f"unknown builtin plan {spec!r}")
        return flows_and_voltages_plan(net)
    return load_plan(spec)


def run_seed(base_seed: int, run_index: int) -> int:
    return (base_seed ^ run_index) & (2**64 - 1)


def _sub_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)[0])


def bus_errors(v_hat: np.ndarray, v_true: np.ndarray, ref_bus: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus angle error wrapped to [0, pi] and magnitude error.

    Both phasors are first rotated to a zero reference angle, so the
    reference bus error is exactly 0.
    """
    v_hat, v_true = align_phase(v_hat, ref_bus), align_phase(v_true, ref_bus)
    ang = np.abs(np.angle(v_hat * np.conj(v_true)))
    ang[ref_bus - 1] = 0.0
    return ang, np.abs(np.abs(v_hat) - np.abs(v_true))


@dataclass
class MethodResult:
    status: str
    angle_err: np.ndarray | None = None
    mag_err: np.ndarray | None = None
    iterations: int = 0
    support: tuple = ()
    message: str = ""


@dataclass
class RunRecord:
    run: int
    seed: int
    v_true: np.ndarray
    corrupted: tuple
    results: dict


class _Context:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.net = resolve_case(cfg.case)
        self.plan = resolve_plan(cfg.plan, self.net)
        self.coeffs = measurement_matrices(self.net, self.plan)
        eligible = [i for i, m in enumerate(self.plan.meters) if m.kind in set(cfg.outliers.kinds)]
        if cfg.outliers.count > len(eligible):
            raise ConfigError("not enough eligible meters for the outlier policy")
        self.eligible = np.array(eligible, dtype=int)


def simulate_run(ctx: _Context, run: int):
    """Truth, measurements and corrupted meter indices for one run."""
    cfg = ctx.cfg
    seed = run_seed(cfg.seed, run)
    v = random_state(ctx.net.n_buses, _sub_seed(seed, 0), ref_bus=ctx.net.ref_bus)
    ms = simulate(ctx.coeffs, ctx.plan, v, _sub_seed(seed, 1), noise_scale=cfg.noise_scale)
    rng = np.random.default_rng(_sub_seed(seed, 2))
    corrupted = tuple(sorted(int(i) for i in rng.choice(ctx.eligible, cfg.outliers.count, replace=False)))
    if corrupted:
        ms = inject_outliers(ms, list(corrupted), cfg.outliers.make())
    return seed, v, ms, corrupted


def execute_run(ctx: _Context, run: int) -> RunRecord:
    cfg = ctx.cfg
    seed, v, ms, corrupted = simulate_run(ctx, run)
    results = {}
    if "wls" in cfg.methods:
        try:
            g = gauss_newton(ctx.coeffs, ms, flat_start(ctx.net.n_buses), ctx.net.ref_bus, GaussNewtonOptions())
            ang, mag = bus_errors(g.v, v, ctx.net.ref_bus)
            status = type(g.status).__name__.lower()
            its = g.status.iterations if isinstance(g.status, Converged) else len(g.step_norms)
            results["wls"] = MethodResult(status, ang, mag, its)
        except Exception as exc:  # a failed run never aborts the batch
            log.warning("run %d wls failed: %s", run, exc)
            results["wls"] = MethodResult("failed", message=str(exc))
    if "sdr" in cfg.methods:
        lam = cfg.lam if cfg.lam is not None else default_lambda(ms.w, cfg.kappa)
        try:
            est, a, sol = robust_estimate(ctx.net, ctx.plan, ms, lam,
                                          EstimateOptions(n_samples=cfg.samples, seed=_sub_seed(seed, 3)),
                                          coeffs=ctx.coeffs)
            ang, mag = bus_errors(est.v, v, ctx.net.ref_bus)
            results["sdr"] = MethodResult("converged", ang, mag, sol.iterations, tuple(int(i) for i in np.flatnonzero(a)))
        except (SolverError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("run %d sdr failed: %s", run, exc)
            results["sdr"] = MethodResult("failed", message=str(exc))
    return RunRecord(run, seed, v, corrupted, results)


def _worker(args):
    cfg, runs = args
    ctx = _Context(cfg)
    return [execute_run(ctx, r) for r in runs]


def run_montecarlo(cfg: ScenarioConfig) -> list[RunRecord]:
    """All runs, ordered by run index (independent of the worker count)."""
    if cfg.lam is None:
        warnings.warn(f"no lambda given; using kappa * median(sqrt(w)) with kappa = {cfg.kappa}", stacklevel=2)
    ctx = _Context(cfg)
    runs = list(range(cfg.n_runs))
    if cfg.workers <= 1:
        return [execute_run(ctx, r) for r in runs]
    chunks = [runs[i::cfg.workers] for i in range(cfg.workers)]
    with ProcessPoolExecutor(cfg.workers) as pool:
        records = [rec for part in pool.map(_worker, [(cfg, c) for c in chunks]) for rec in part]
    return sorted(records, key=lambda r: r.run)


@dataclass
class Summary:
    n_buses: int
    mean_angle: dict
    mean_mag: dict
    counts: dict

    def network_mean_angle(self, method: str) -> float:
        return float(np.mean(self.mean_angle[method]))


def summarize(records: list[RunRecord], methods=METHODS) -> Summary:
    """Per-bus mean errors over usable runs; WLS runs that did not converge are excluded."""
    n = records[0].v_true.size
    mean_angle, mean_mag, counts = {}, {}, {}
    for m in methods:
        used = [r.results[m] for r in records if m in r.results and r.results[m].status == "converged"]
        tally = {}
        for r in records:
            if m in r.results:
                s = r.results[m].status
                tally[s] = tally.get(s, 0) + 1
        tally["used"] = len(used)
        counts[m] = tally
        if used:
            mean_angle[m] = np.mean([u.angle_err for u in used], axis=0)
            mean_mag[m] = np.mean([u.mag_err for u in used], axis=0)
        else:
            mean_angle[m] = np.full(n, np.nan)
            mean_mag[m] = np.full(n, np.nan)
    return Summary(n, mean_angle, mean_mag, counts)


def _fmt(x: float) -> str:
    return f"{x:.12e}"


GNUPLOT_SCRIPT = """\
# Per-bus mean estimation errors: angle (top) and magnitude (bottom).
set terminal pngcairo size 800,900
set output 'errors.png'
set multiplot layout 2,1
set xlabel 'bus'
set key top left
set ylabel 'mean angle error (rad)'
plot 'plot_data.dat' using 1:2 with linespoints title 'WLS', \\
     ''              using 1:3 with linespoints title 'SDR'
set ylabel 'mean magnitude error (p.u.)'
plot 'plot_data.dat' using 1:4 with linespoints title 'WLS', \\
     ''              using 1:5 with linespoints title 'SDR'
unset multiplot
"""


def write_outputs(records: list[RunRecord], cfg: ScenarioConfig, out: str | Path) -> Summary:
    """Write runs.csv, bus_errors.csv, summary.csv, plot_data.dat, errors.gp and summary.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(records, cfg.methods)

    with open(out / "runs.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["run", "seed", "method", "status", "iterations", "corrupted", "support",
                     "hit", "false_positives", "mean_angle_err", "mean_mag_err", "message"])
        for r in records:
            for m in cfg.methods:
                res = r.results[m]
                ok = res.angle_err is not None
                fp = len(set(res.support) - set(r.corrupted))
                wr.writerow([r.run, r.seed, m, res.status, res.iterations, ";".join(map(str, r.corrupted)),
                             ";".join(map(str, res.support)),
                             int(set(r.corrupted) <= set(res.support)) if m == "sdr" else "",
                             fp if m == "sdr" else "",
                             _fmt(res.angle_err.mean()) if ok else "", _fmt(res.mag_err.mean()) if ok else "",
                             res.message])

    with open(out / "bus_errors.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["run", "method", "bus", "angle_err", "mag_err"])
        for r in records:
            for m in cfg.methods:
                res = r.results[m]
                if res.angle_err is None:
                    continue
                for b in range(summary.n_buses):
                    wr.writerow([r.run, m, b + 1, _fmt(res.angle_err[b]), _fmt(res.mag_err[b])])

    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["bus", "method", "mean_angle_err", "mean_mag_err", "runs_used"])
        for b in range(summary.n_buses):
            for m in cfg.methods:
                wr.writerow([b + 1, m, _fmt(summary.mean_angle[m][b]), _fmt(summary.mean_mag[m][b]),
                             summary.counts[m]["used"]])

    cols = ["wls", "sdr"]
    with open(out / "plot_data.dat", "w") as fh:
        fh.write("# bus wls_angle sdr_angle wls_mag sdr_mag\n")
        for b in range(summary.n_buses):
            vals = [summary.mean_angle.get(m, np.full(summary.n_buses, np.nan))[b] for m in cols]
            vals += [summary.mean_mag.get(m, np.full(summary.n_buses, np.nan))[b] for m in cols]
            fh.write(" ".join([str(b + 1)] + [_fmt(x) for x in vals]) + "\n")
    (out / "errors.gp").write_text(GNUPLOT_SCRIPT)

    meta = {
        "config": cfg.to_dict(),
        "counts": summary.counts,
        "network_mean_angle_err": {m: _fmt(summary.network_mean_angle(m)) for m in cfg.methods},
    }
    (out / "summary.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return summary

