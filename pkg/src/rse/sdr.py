"""Semidefinite relaxation of the l1-regularized robust state estimator.

The convex program is

    min_{V >= 0, a}  sum_l w_l (z_l - Tr(H_l V) - a_l)^2 + lam * ||a||_1

which is the Schur-complement SDP with chi_l eliminated (chi_l equals the
squared residual at any optimum). Minimizing over ``a`` in closed form turns
each summand into a Huber penalty of the residual z_l - Tr(H_l V), whose
Lagrange dual is

    max_psi  z^T psi - sum_l psi_l^2 / (4 w_l)
    s.t.     -sum_l psi_l H_l >= 0,   |psi_l| <= lam.

``solve_relaxation`` runs a primal-dual interior-point method on this pair
(HKM direction, Mehrotra predictor-corrector) and certifies the result with
the duality gap and first-order optimality residuals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from rse.measurements import HermitianCoeffs, MeasurementPlan, MeasurementSet, measurement_matrices
from rse.network import Network

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The relaxation was not solved to the requested accuracy."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SdpProblem:
    coeffs: HermitianCoeffs
    z: np.ndarray
    w: np.ndarray
    lam: float

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if z.shape != (self.coeffs.m,) or w.shape != z.shape:
            raise ValueError("z and w must have one entry per measurement matrix")
        if not np.all(w > 0):
            raise ValueError("weights must be positive")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "w", w)

    @classmethod
    def from_measurements(cls, coeffs: HermitianCoeffs, ms: MeasurementSet, lam: float) -> "SdpProblem":
        return cls(coeffs, ms.z, ms.w, lam)

    def objective(self, V: np.ndarray, a: np.ndarray) -> float:
        r = self.z - self.coeffs.trace(V) - a
        return float(self.w @ r**2 + self.lam * np.abs(a).sum())

    def dual_objective(self, psi: np.ndarray) -> float:
        return float(self.z @ psi - np.sum(psi**2 / (4 * self.w)))


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 100
    tol: float = 1e-10  # interior-point target for gap and infeasibility
    accept_tol: float = 1e-8  # accepted once interior-point progress stalls
    gap_tol: float = 1e-7  # duality gap required of the returned solution
    kkt_tol: float = 1e-6  # first-order residual targeted by the proximal method
    polish: bool = True
    polish_below: float = 1e-8  # polish when the certificate is worse than this
    step_fraction: float = 0.98
    method: str = "ipm"


@dataclass(frozen=True)
class SdpSolution:
    V: np.ndarray
    a: np.ndarray
    chi: np.ndarray
    objective: float
    iterations: int
    primal_residual: float
    dual_value: float
    psi: np.ndarray = field(repr=False)
    kkt: dict = field(default_factory=dict)
    problem: SdpProblem | None = field(default=None, repr=False)

    @property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of V in descending order."""
        return np.linalg.eigvalsh(self.V)[::-1]

    @property
    def gap(self) -> float:
        return self.objective - self.dual_value

    def rank_one_ratio(self) -> float:
        ev = self.eigenvalues
        return float(ev[1] / ev[0]) if ev.size > 1 and ev[0] > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "a": self.a.tolist(),
            "chi": self.chi.tolist(),
            "objective": self.objective,
            "dual_value": self.dual_value,
            "iterations": self.iterations,
            "primal_residual": self.primal_residual,
            "kkt": self.kkt,
        }


def _herm(X):
    return (X + X.conj().T) / 2


def psd_project(A: np.ndarray) -> np.ndarray:
    """Nearest (Frobenius) positive semidefinite matrix to Hermitian ``A``."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("psd_project needs a square matrix")
    if np.abs(A - A.conj().T).max(initial=0.0) > 1e-12 * max(1.0, np.abs(A).max(initial=0.0)):
        raise ValueError("psd_project needs a Hermitian matrix")
    e, U = np.linalg.eigh(_herm(A))
    return _herm((U * np.maximum(e, 0.0)) @ U.conj().T)


def soft_threshold(a, tau):
    """sign(a) * max(|a| - tau, 0), elementwise."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("threshold must be positive")
    a = np.asarray(a, dtype=float)
    out = np.sign(a) * np.maximum(np.abs(a) - tau, 0.0)
    return out if out.ndim else float(out)


def default_lambda(w: np.ndarray, kappa: float = 6.0) -> float:
    """kappa * median(w_l * sigma_l) with sigma_l = 1/sqrt(w_l).

    Each meter's residual threshold lam / (2 w_l) is then about kappa/2 noise
    standard deviations.
    """
    return float(kappa * np.median(np.sqrt(w)))


def lambda_cap(p: SdpProblem) -> float:
    """A lam above which the outlier term is inactive (every a_l = 0).

    Any optimum has w_l r_l^2 <= F0 = sum_l w_l z_l^2 (the cost of V = 0), so
    |psi_l| = 2 w_l |r_l| stays strictly below 2 sqrt(w_l F0) * (1 + 1e-3).
    """
    f0 = float(p.w @ p.z**2)
    return float(2 * np.sqrt(p.w.max() * f0) * (1 + 1e-3))


def kkt_residuals(p: SdpProblem, V: np.ndarray, a: np.ndarray) -> dict:
    """First-order optimality residuals of the composite problem at (V, a).

    Gradients are scaled by 1/lam and V by max(1, ||V||_F), so every entry is
    invariant to a common rescaling of (w, lam).
    """
    r = p.z - p.coeffs.trace(V) - a
    psi = 2 * p.w * r  # minus the gradient in a
    G = -p.coeffs.combine(psi)  # gradient in V
    vscale = max(1.0, np.linalg.norm(V))
    Gs = G / p.lam
    nz = a != 0
    dist = np.where(nz, np.abs(psi - p.lam * np.sign(a)), np.maximum(np.abs(psi) - p.lam, 0.0))
    return {
        "projected_gradient": float(np.linalg.norm(V - psd_project(V - Gs * vscale)) / vscale),
        "complementarity": float(np.real(np.vdot(Gs, V)) / vscale),
        "dual_infeasibility": float(max(0.0, -np.linalg.eigvalsh(Gs)[0])),
        "outlier_stationarity": float(dist.max(initial=0.0) / p.lam),
    }


def _max_step_psd(X, dX):
    L = np.linalg.cholesky(X)
    Li = sla.solve_triangular(L, np.eye(len(X)), lower=True)
    e = np.linalg.eigvalsh(_herm(Li @ dX @ Li.conj().T))[0]
    return np.inf if e >= 0 else -1.0 / e


def _max_step_pos(x, dx):
    neg = dx < 0
    return np.min(-x[neg] / dx[neg]) if neg.any() else np.inf


def _is_pd(X):
    try:
        np.linalg.cholesky(X)
        return True
    except np.linalg.LinAlgError:
        return False


def _ipm(p: SdpProblem, opts: SolverOptions):
    """Primal-dual path following on the Huber dual, with lam scaled to 1."""
    coeffs = p.coeffs
    H = coeffs.H
    M, N = coeffs.m, coeffs.n
    z = p.z
    w = p.w / p.lam
    eye = np.eye(N)
    V = np.eye(N, dtype=complex)
    S = np.eye(N, dtype=complex)
    psi = np.zeros(M)
    mp = np.ones(M)
    mm = np.ones(M)
    nu = N + 2 * M

    best = None
    history = []
    for it in range(1, opts.max_iters + 1):
        up, um = 1.0 - psi, 1.0 + psi
        RS = -coeffs.combine(psi) - S
        Rp = z - psi / (2 * w) - coeffs.trace(V) - mp + mm
        mu = (np.trace(S @ V).real + up @ mp + um @ mm) / nu

        a = mp - mm
        primal = float(w @ (z - coeffs.trace(V) - a) ** 2 + np.abs(a).sum())
        dual = float(z @ psi - np.sum(psi**2 / (4 * w)))
        # Measured in the units of the original problem, as in the final certificate.
        gap = p.lam * abs(primal - dual) / (1 + p.lam * (abs(primal) + abs(dual)))
        infeas = max(np.abs(RS).max() / (1 + np.abs(S).max()), np.abs(Rp).max() / (1 + np.abs(z).max()))
        history.append(max(gap, infeas))
        log.debug("ipm %3d mu=%.2e gap=%.2e infeas=%.2e", it, mu, gap, infeas)
        if best is None or history[-1] < best[0]:
            best = (history[-1], it, V, psi, S)
        if gap < opts.tol and infeas < opts.tol:
            break
        if len(history) > 8 and min(history[-8:]) > 0.5 * min(history[:-8]) and best[0] < opts.accept_tol:
            break

        LS = np.linalg.cholesky(S)
        RV = np.linalg.cholesky(V)
        LSi = sla.solve_triangular(LS, eye, lower=True)
        Sinv = _herm(LSi.conj().T @ LSi)
        # Schur complement Re Tr(H_l S^-1 H_k V) as a Gram matrix, PSD by construction.
        B = (LSi @ H @ RV).reshape(M, -1)
        K = (B.conj() @ B.T).real + np.diag(1 / (2 * w) + mp / up + mm / um)
        sc = 1 / np.sqrt(np.diag(K))
        Ks = K * sc[:, None] * sc[None, :]
        try:
            cf = sla.cho_factor(Ks)
            solve_k = lambda b: sc * sla.cho_solve(cf, sc * b)
        except np.linalg.LinAlgError:
            e, Q = np.linalg.eigh(Ks)
            e = np.maximum(e, 1e-15 * e.max())
            solve_k = lambda b: sc * (Q @ ((Q.T @ (sc * b)) / e))

        def direction(target, corr_v=None, corr_p=0.0, corr_m=0.0):
            base = target * Sinv - V - Sinv @ RS @ V
            if corr_v is not None:
                base = base - Sinv @ corr_v
            pp = (target - up * mp - corr_p) / up
            pm = (target - um * mm - corr_m) / um
            dpsi = solve_k(Rp - coeffs.trace(_herm(base)) - pp + pm)
            dS = -coeffs.combine(dpsi) + RS
            dV = _herm(base + Sinv @ coeffs.combine(dpsi) @ V)
            return dpsi, dS, dV, pp + mp / up * dpsi, pm - mm / um * dpsi

        def step_length(d):
            dpsi, dS, dV, dmp, dmm = d
            return min(1.0, _max_step_psd(V, dV), _max_step_psd(S, dS), _max_step_pos(mp, dmp),
                       _max_step_pos(mm, dmm), _max_step_pos(up, -dpsi), _max_step_pos(um, dpsi))

        aff = direction(0.0)
        al = step_length(aff)
        dpsi, dS, dV, dmp, dmm = aff
        mu_aff = (np.trace((S + al * dS) @ (V + al * dV)).real + (up - al * dpsi) @ (mp + al * dmp)
                  + (um + al * dpsi) @ (mm + al * dmm)) / nu
        sigma = min(1.0, (mu_aff / mu) ** 3)
        d = direction(sigma * mu, corr_v=dS @ dV, corr_p=-dpsi * dmp, corr_m=dpsi * dmm)
        al = opts.step_fraction * step_length(d)
        dpsi, dS, dV, dmp, dmm = d
        for _ in range(40):
            S_new, V_new = _herm(S + al * dS), _herm(V + al * dV)
            if _is_pd(S_new) and _is_pd(V_new):
                break
            al *= 0.5
        else:
            break
        psi = np.clip(psi + al * dpsi, -1 + 1e-300, 1 - 1e-300)
        S, V = S_new, V_new
        mp = np.maximum(mp + al * dmp, 1e-300)
        mm = np.maximum(mm + al * dmm, 1e-300)

    score, _, V, psi, _ = best
    return V, psi * p.lam, it, score


def _proximal(p: SdpProblem, opts: SolverOptions):
    """Accelerated projected/proximal gradient with adaptive restart.

    Only practical for small instances; converges sublinearly.
    """
    coeffs, z, w, lam = p.coeffs, p.z, p.w, p.lam
    rng = np.random.default_rng(0)
    X = rng.standard_normal((coeffs.n, coeffs.n))
    Xv, xa = _herm(X + 0j), rng.standard_normal(coeffs.m)
    for _ in range(50):  # power iteration for the Lipschitz constant of the smooth part
        y = np.sqrt(w) * (coeffs.trace(Xv) + xa)
        Xv, xa = coeffs.combine(np.sqrt(w) * y), np.sqrt(w) * y
        nrm = np.sqrt(np.linalg.norm(Xv) ** 2 + xa @ xa)
        Xv, xa = Xv / nrm, xa / nrm
    step = 1 / (2.02 * nrm)
    V = np.zeros((coeffs.n, coeffs.n), dtype=complex)
    a = np.zeros(coeffs.m)
    Vy, ay, th = V, a, 1.0
    prev = p.objective(V, a)
    window = []
    for it in range(1, opts.max_iters + 1):
        r = z - coeffs.trace(Vy) - ay
        Vn = psd_project(Vy + step * 2 * coeffs.combine(w * r))
        an = soft_threshold(ay + step * 2 * w * r, step * lam)
        f = p.objective(Vn, an)
        if f > prev:
            Vy, ay, th = V, a, 1.0
            continue
        thn = (1 + np.sqrt(1 + 4 * th**2)) / 2
        Vy = Vn + (th - 1) / thn * (Vn - V)
        ay = an + (th - 1) / thn * (an - a)
        window.append(abs(prev - f) / max(1.0, abs(f)))
        V, a, th, prev = Vn, an, thn, f
        if len(window) >= 50 and max(window[-50:]) < opts.accept_tol:
            k = kkt_residuals(p, V, soft_threshold(z - coeffs.trace(V), lam / (2 * w)))
            if max(k["projected_gradient"], k["dual_infeasibility"]) < opts.kkt_tol:
                break
    psi = np.clip(2 * w * (z - coeffs.trace(V)), -lam, lam)
    return V, psi, it, window[-1] if window else np.inf


def _huber_loss(c2):
    """Per-residual Huber loss rho(s) on squared residuals s, threshold c2."""
    c = np.sqrt(c2)

    def loss(s):
        out = np.empty((3, s.size))
        small = s <= c2
        rs = np.sqrt(np.maximum(s, 1e-300))
        out[0] = np.where(small, s, 2 * c * rs - c2)
        out[1] = np.where(small, 1.0, c / rs)
        out[2] = np.where(small, 0.0, -c / (2 * rs**3))
        return out

    return loss


def _polish(p: SdpProblem, V: np.ndarray, rel_rank_tol: float = 1e-6) -> np.ndarray:
    """Refine V = U U^H over low-rank factors U, keeping the rank seen in V.

    Interior-point iterates stall short of full accuracy when the optimal face
    is degenerate (e.g. zero-residual data); Gauss-Newton on the factors
    converges quickly from such a warm start.
    """
    from scipy.optimize import least_squares

    e, Q = np.linalg.eigh(V)
    keep = e >= rel_rank_tol * e[-1]
    U0 = Q[:, keep] * np.sqrt(e[keep])
    n, r = U0.shape
    H, sw = p.coeffs.H, np.sqrt(p.w)

    def unpack(x):
        return (x[: n * r] + 1j * x[n * r:]).reshape(n, r)

    def fun(x):
        U = unpack(x)
        return sw * (p.z - p.coeffs.trace(U @ U.conj().T))

    def jac(x):
        HU = (H @ unpack(x)).reshape(p.coeffs.m, -1)
        return -sw[:, None] * np.hstack([2 * HU.real, 2 * HU.imag])

    x0 = np.concatenate([U0.real.ravel(), U0.imag.ravel()])
    c2 = (p.lam / (2 * sw)) ** 2
    with np.errstate(divide="ignore", over="ignore"):
        res = least_squares(fun, x0, jac=jac, loss=_huber_loss(c2), f_scale=1.0,
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=100)
    U = unpack(res.x)
    return _herm(U @ U.conj().T)


def _refinements(p: SdpProblem, V: np.ndarray):
    """Candidate high-accuracy refinements of an interior-point iterate."""
    yield _polish(p, V)


def _certify(p: SdpProblem, V: np.ndarray, psi: np.ndarray):
    """Exact outlier update for V plus optimality residuals."""
    resid = p.z - p.coeffs.trace(V)
    a = soft_threshold(resid, p.lam / (2 * p.w))
    chi = (resid - a) ** 2
    objective = float(p.w @ chi + p.lam * np.abs(a).sum())
    dual = p.dual_objective(psi)
    kkt = kkt_residuals(p, V, a)
    kkt["relative_gap"] = float(abs(objective - dual) / (1 + abs(objective) + abs(dual)))
    kkt["dual_psd_violation"] = float(max(0.0, -np.linalg.eigvalsh(-p.coeffs.combine(psi))[0]) / p.lam)
    return a, chi, objective, dual, kkt


def _score(kkt):
    return max(kkt["projected_gradient"], kkt["dual_infeasibility"], kkt["relative_gap"], kkt["dual_psd_violation"])


def solve_relaxation(p: SdpProblem, opts: SolverOptions | None = None) -> SdpSolution:
    """Globally solve the convex relaxation.

    Raises :class:`SolverError` (with the residuals in ``.diagnostics``) unless
    a dual-feasible point certifies a relative duality gap within
    ``opts.gap_tol``. First-order residuals are reported in ``kkt``.
    """
    opts = opts or SolverOptions()
    if opts.method not in ("ipm", "proximal"):
        raise ValueError(f"unknown solver method {opts.method!r}")
    # Beyond lam_cap the box |psi| <= lam is inactive and the optimum does not
    # depend on lam, so the iterations run on the better-scaled capped problem.
    cap = lambda_cap(p)
    q = SdpProblem(p.coeffs, p.z, p.w, cap) if 0 < cap < p.lam else p
    if opts.method == "ipm":
        V, psi, iters, infeas = _ipm(q, opts)
    else:
        V, psi, iters, infeas = _proximal(q, opts)

    def certify(V, psi):
        # The dual bound may come from the interior-point iterate, from the point
        # induced by V, or from psi = 0 (always feasible); keep whichever is best.
        induced = np.clip(2 * p.w * (p.z - p.coeffs.trace(V)), -p.lam, p.lam)
        cands = [(_certify(p, V, q), q) for q in (psi, induced, np.zeros_like(psi))]
        return min(cands, key=lambda c: _score(c[0][4]))

    cert, psi = certify(V, psi)
    if opts.polish and _score(cert[4]) > opts.polish_below:
        for cand in _refinements(p, V):
            cert2, psi2 = certify(cand, psi)
            if _score(cert2[4]) < _score(cert[4]):
                V, psi, cert = cand, psi2, cert2
            if _score(cert[4]) <= opts.polish_below:
                break
        log.debug("refined certificate score %.2e", _score(cert[4]))

    a, chi, objective, dual, kkt = cert
    if kkt["relative_gap"] > opts.gap_tol or kkt["dual_psd_violation"] > opts.gap_tol:
        diag = dict(kkt, iterations=iters, objective=objective, dual=dual)
        raise SolverError(f"relaxation not solved to tolerance after {iters} iterations", diag)
    return SdpSolution(V, a, chi, objective, iters, infeas, dual, psi, kkt, problem=p)


# ---------------------------------------------------------------------------
# Rank-one extraction


RANK_ONE_RATIO = 1e-6


@dataclass(frozen=True)
class StateEstimate:
    """A complex state estimate with the bookkeeping of how it was obtained.

    ``method`` is ``"eigen"``, ``"randomized"`` or ``"gauss_newton"``;
    ``samples`` is set for randomized extraction. ``fit_cost`` is the weighted
    squared residual over ``inliers`` (0-based meter indices).
    """

    v: np.ndarray
    method: str
    rank_of_V: int
    inliers: np.ndarray
    fit_cost: float
    samples: int | None = None


def outlier_support(a: np.ndarray, z: np.ndarray, rel_tol: float = 1e-6) -> np.ndarray:
    """Indices with |a_l| > rel_tol * max(1, |z_l|)."""
    a, z = np.asarray(a, dtype=float), np.asarray(z, dtype=float)
    return np.flatnonzero(np.abs(a) > rel_tol * np.maximum(1.0, np.abs(z)))


def align_phase(v: np.ndarray, ref_bus: int = 1) -> np.ndarray:
    """Rotate v globally so that the reference bus angle is exactly zero."""
    v = np.asarray(v, dtype=complex)
    k = ref_bus - 1
    if not 0 <= k < v.size:
        raise IndexError(f"reference bus {ref_bus} out of range")
    if v[k] == 0:
        return v.copy()
    out = v * (abs(v[k]) / v[k])
    out[k] = abs(v[k])
    return out


def _inliers(sol: SdpSolution, rel_tol: float) -> np.ndarray:
    p = sol.problem
    out = outlier_support(sol.a, p.z, rel_tol)
    return np.setdiff1d(np.arange(p.coeffs.m), out)


def _fit_costs(p: SdpProblem, X: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Inlier fit cost for each row of X (candidate states)."""
    q = _batch_quad(p.coeffs, X)
    return ((p.z[idx] - q[:, idx]) ** 2) @ p.w[idx]


def _batch_quad(coeffs: HermitianCoeffs, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    P = (X.conj()[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)
    return (P @ coeffs.H.reshape(coeffs.m, -1).T).real


def rank_of(V: np.ndarray) -> int:
    e = np.linalg.eigvalsh(V)
    if e[-1] <= 0:
        return 0
    return int(np.count_nonzero(e > len(V) * np.finfo(float).eps * e[-1]))


def _leading_vector(V: np.ndarray) -> np.ndarray:
    e, U = np.linalg.eigh(V)
    top = e[-1]
    if not top > 0:
        raise ValueError("V has no positive eigenvalue")
    tied = U[:, e >= top - len(V) * np.finfo(float).eps * top]
    if tied.shape[1] == 1:
        u = tied[:, 0]
    else:
        # Deterministic choice inside a repeated eigenspace: the projection of
        # the first unit vector with a nonzero component there.
        P = tied @ tied.conj().T
        j = int(np.argmax(np.linalg.norm(P, axis=0) > 1e-8))
        u = P[:, j] / np.linalg.norm(P[:, j])
    return np.sqrt(top) * u


def extract_eigen(sol: SdpSolution, ref_bus: int = 1, support_tol: float = 1e-6) -> StateEstimate:
    """Leading-eigenpair estimate sqrt(lambda_1) u_1, phase-aligned to the reference bus."""
    v = align_phase(_leading_vector(sol.V), ref_bus)
    cost, idx = np.nan, np.arange(0)
    if sol.problem is not None:
        idx = _inliers(sol, support_tol)
        cost = float(_fit_costs(sol.problem, v, idx)[0])
    return StateEstimate(v, "eigen", rank_of(sol.V), idx, cost)


def extract_randomized(sol: SdpSolution, n_samples: int = 100, rng_seed: int = 0,
                       ref_bus: int = 1, support_tol: float = 1e-6) -> StateEstimate:
    """Best of Gaussian samples nu ~ CN(0, V) rescaled by the optimal c, or the eigen estimate.

    Only the inlier meters enter the rescaling and the selection cost.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    p = sol.problem
    if p is None:
        raise ValueError("solution does not carry its problem data")
    idx = _inliers(sol, support_tol)
    try:
        eig = extract_eigen(sol, ref_bus, support_tol)
    except ValueError:
        eig = None

    e, U = np.linalg.eigh(sol.V)
    L = U * np.sqrt(np.maximum(e, 0.0))
    rng = np.random.default_rng(rng_seed)
    g = (rng.standard_normal((n_samples, len(e))) + 1j * rng.standard_normal((n_samples, len(e)))) / np.sqrt(2)
    nu = g @ L.T
    q = _batch_quad(p.coeffs, nu)[:, idx]
    wz, w = p.w[idx] * p.z[idx], p.w[idx]
    num, den = q @ wz, (q**2) @ w
    ok = (num > 0) & (den > 0)
    best = None
    if ok.any():
        cand = nu[ok] * np.sqrt(num[ok] / den[ok])[:, None]
        costs = _fit_costs(p, cand, idx)
        k = int(np.argmin(costs))
        best = StateEstimate(align_phase(cand[k], ref_bus), "randomized", rank_of(sol.V), idx,
                             float(costs[k]), samples=n_samples)
    if best is None and eig is None:
        raise ValueError("every sample was rejected and V has no positive eigenvalue")
    if best is None or (eig is not None and eig.fit_cost <= best.fit_cost):
        return eig
    return best


@dataclass(frozen=True)
class EstimateOptions:
    solver: SolverOptions = field(default_factory=SolverOptions)
    n_samples: int = 100
    seed: int = 0
    support_tol: float = 1e-6
    randomize: bool = True


def robust_estimate(net: Network, plan: MeasurementPlan, ms: MeasurementSet, lam: float,
                    opts: EstimateOptions | None = None, coeffs: HermitianCoeffs | None = None):
    """Relaxation plus extraction; returns ``(StateEstimate, a_hat, solution)``.

    ``a_hat`` is zeroed below the support tolerance so its nonzeros are the
    declared outliers.
    """
    opts = opts or EstimateOptions()
    coeffs = coeffs if coeffs is not None else measurement_matrices(net, plan)
    sol = solve_relaxation(SdpProblem.from_measurements(coeffs, ms, lam), opts.solver)
    if opts.randomize:
        est = extract_randomized(sol, opts.n_samples, opts.seed, net.ref_bus, opts.support_tol)
    else:
        est = extract_eigen(sol, net.ref_bus, opts.support_tol)
    a = np.zeros_like(sol.a)
    supp = outlier_support(sol.a, ms.z, opts.support_tol)
    a[supp] = sol.a[supp]
    return est, a, sol
