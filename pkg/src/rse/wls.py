"""Gauss-Newton weighted least-squares state estimation in polar coordinates.

This is the classical baseline: undamped Gauss-Newton on
sum_l w_l (z_l - h_l(x))^2 with the reference-bus angle held at zero, stopped
on a small step, an iteration cap, or an ill-conditioned weighted Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from rse.measurements import HermitianCoeffs, MeasurementSet, eval_h, from_polar, jacobian_polar


@dataclass(frozen=True)
class Converged:
    iterations: int


@dataclass(frozen=True)
class Diverged:
    condition_number: float
    reason: str = "ill-conditioned"


@dataclass(frozen=True)
class MaxIters:
    iterations: int


@dataclass(frozen=True)
class GaussNewtonOptions:
    tol: float = 1e-6
    max_iters: int = 50
    cond_max: float = 1e8


@dataclass(frozen=True)
class GaussNewtonResult:
    x: np.ndarray
    status: Converged | Diverged | MaxIters
    step_norms: list = field(default_factory=list)
    costs: list = field(default_factory=list)

    @property
    def v(self) -> np.ndarray:
        return from_polar(self.x)

    @property
    def converged(self) -> bool:
        return isinstance(self.status, Converged)


def flat_start(n_buses: int) -> np.ndarray:
    return np.concatenate([np.ones(n_buses), np.zeros(n_buses)])


def wls_cost(coeffs: HermitianCoeffs, ms: MeasurementSet, x: np.ndarray) -> float:
    r = ms.z - eval_h(coeffs, from_polar(x))
    return float(ms.w @ r**2)


def gauss_newton(coeffs: HermitianCoeffs, ms: MeasurementSet, x0: np.ndarray, ref_bus: int = 1,
                 opts: GaussNewtonOptions | None = None) -> GaussNewtonResult:
    """Gauss-Newton iterations from the polar state ``x0`` = [|V|, angle V].

    The reference angle is set to zero and its Jacobian column removed; the
    reference magnitude stays free. Each step solves the weighted linearized
    least-squares problem by QR of the weighted Jacobian.
    """
    opts = opts or GaussNewtonOptions()
    n = coeffs.n
    x = np.array(x0, dtype=float)
    if x.shape != (2 * n,) or not np.all(np.isfinite(x)):
        raise ValueError("x0 must be a finite polar state of length 2N")
    if np.any(x[:n] <= 0):
        raise ValueError("x0 must have positive magnitudes")
    if not 1 <= ref_bus <= n:
        raise IndexError(f"reference bus {ref_bus} out of range")
    ref_col = n + ref_bus - 1
    x[ref_col] = 0.0
    keep = np.delete(np.arange(2 * n), ref_col)
    sw = np.sqrt(ms.w)

    steps, costs = [], []
    for k in range(1, opts.max_iters + 1):
        v = from_polar(x)
        r = ms.z - eval_h(coeffs, v)
        costs.append(float(ms.w @ r**2))
        try:
            J = jacobian_polar(coeffs, x)[:, keep]
        except ValueError:
            return GaussNewtonResult(x, Diverged(np.inf, "zero magnitude"), steps, costs)
        Jw = sw[:, None] * J
        sv = np.linalg.svd(Jw, compute_uv=False)
        # Fewer rows than unknowns means a nontrivial null space.
        cond = sv[0] / sv[-1] if sv[-1] > 0 and Jw.shape[0] >= Jw.shape[1] else np.inf
        if not cond <= opts.cond_max:
            return GaussNewtonResult(x, Diverged(float(cond)), steps, costs)
        Q, R = np.linalg.qr(Jw)
        dx = sla.solve_triangular(R, Q.T @ (sw * r))
        x = x.copy()
        x[keep] += dx
        step = float(np.abs(dx).max())
        steps.append(step)
        if not np.all(np.isfinite(x)):
            return GaussNewtonResult(x, Diverged(float(cond), "non-finite iterate"), steps, costs)
        if step < opts.tol:
            costs.append(wls_cost(coeffs, ms, x))
            return GaussNewtonResult(x, Converged(k), steps, costs)
    return GaussNewtonResult(x, MaxIters(opts.max_iters), steps, costs)
