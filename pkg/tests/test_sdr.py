import numpy as np
import pytest

from rse.measurements import (HermitianCoeffs, Meter, MeasurementPlan, ScaleBy, inject_outliers,
                              measurement_matrices, random_state, simulate, to_polar)
from rse.network import Line, Network
from rse.sdr import (EstimateOptions, SdpProblem, SdpSolution, SolverError, SolverOptions, align_phase,
                     default_lambda, extract_eigen, extract_randomized, outlier_support, psd_project, rank_of,
                     robust_estimate, soft_threshold, solve_relaxation)
from rse.wls import gauss_newton

from oracles import cvx_relaxation


def huber_cost(p, v):
    r = p.z - p.coeffs.quad(v)
    a = soft_threshold(r, p.lam / (2 * p.w))
    return float(p.w @ (r - a) ** 2 + p.lam * np.abs(a).sum())


def manual_solution(p, V):
    r = p.z - p.coeffs.trace(V)
    a = np.zeros_like(r)
    return SdpSolution(V, a, r**2, float(p.w @ r**2), 0, 0.0, 0.0, np.zeros_like(r), problem=p)


@pytest.fixture(scope="module")
def noisy_outlier(net30, plan30, coeffs30):
    v = random_state(30, 0)
    ms = inject_outliers(simulate(coeffs30, plan30, v, 0), [83], ScaleBy(1.2))
    p = SdpProblem.from_measurements(coeffs30, ms, default_lambda(ms.w, 6))
    return v, ms, p, solve_relaxation(p)


# --- proximal building blocks ------------------------------------------------

def test_psd_project_examples():
    np.testing.assert_allclose(psd_project(np.diag([1.0, -1.0])), np.diag([1.0, 0.0]))
    np.testing.assert_allclose(psd_project(np.diag([2.0, 3.0])), np.diag([2.0, 3.0]))
    np.testing.assert_allclose(psd_project(-np.eye(3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        psd_project(np.array([[0, 1], [0, 0]], dtype=float))


def test_psd_project_is_nearest(rng=np.random.default_rng(0)):
    B = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    A = (B + B.conj().T) / 2
    P = psd_project(A)
    assert np.linalg.eigvalsh(P)[0] >= -1e-12
    d = np.linalg.norm(A - P)
    for _ in range(200):
        G = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        S = G @ G.conj().T * rng.uniform(0, 0.5)
        assert np.linalg.norm(A - S) >= d - 1e-12


def test_soft_threshold_examples():
    assert soft_threshold(3.0, 1.0) == 2.0
    assert soft_threshold(-0.5, 1.0) == 0.0
    assert soft_threshold(-3.0, 1.0) == -2.0
    np.testing.assert_allclose(soft_threshold([1.0, -4.0], [2.0, 1.0]), [0.0, -3.0])
    with pytest.raises(ValueError):
        soft_threshold(1.0, 0.0)


def test_default_lambda():
    assert default_lambda(np.full(5, 4.0), kappa=3) == pytest.approx(6.0)


def test_problem_validation(coeffs30):
    z = np.zeros(coeffs30.m)
    with pytest.raises(ValueError):
        SdpProblem(coeffs30, z, np.ones(coeffs30.m), 0.0)
    with pytest.raises(ValueError):
        SdpProblem(coeffs30, z, -np.ones(coeffs30.m), 1.0)
    with pytest.raises(ValueError):
        SdpProblem(coeffs30, z[:3], np.ones(3), 1.0)
    with pytest.raises(ValueError):
        solve_relaxation(SdpProblem(coeffs30, z, np.ones(coeffs30.m), 1.0), SolverOptions(method="nope"))


# --- the relaxation ----------------------------------------------------------

def test_single_meter_huge_lambda():
    p = SdpProblem(HermitianCoeffs(np.array([[[1.0]]])), np.array([2.0]), np.array([1.0]), 1e6)
    sol = solve_relaxation(p)
    assert sol.objective <= 1e-8
    # The certificate bounds the objective, hence the fit error by its square root.
    assert abs(sol.V[0, 0].real - 2.0) <= np.sqrt(sol.objective) + 1e-12
    assert np.all(sol.a == 0)


def test_single_meter_negative_reading_is_absorbed():
    # A negative squared-magnitude reading cannot be fit by V >= 0; the
    # residual beyond lam / (2 w) goes to the outlier variable.
    p = SdpProblem(HermitianCoeffs(np.array([[[1.0]]])), np.array([-3.0]), np.array([1.0]), 2.0)
    sol = solve_relaxation(p)
    assert sol.V[0, 0].real == pytest.approx(0.0, abs=1e-7)
    assert sol.a[0] == pytest.approx(-2.0, abs=1e-7)
    assert sol.objective == pytest.approx(1.0 + 4.0, abs=1e-6)


def test_noise_free_recovery(coeffs30, plan30):
    v = random_state(30, 4)
    ms = simulate(coeffs30, plan30, v, 4, noise_scale=0)
    p = SdpProblem.from_measurements(coeffs30, ms, default_lambda(ms.w))
    sol = solve_relaxation(p)
    assert sol.objective <= 1e-8
    assert sol.rank_one_ratio() < 1e-6
    assert rank_of(sol.V) == 1 or sol.rank_one_ratio() < 1e-8
    est = extract_eigen(sol)
    assert np.abs(est.v - align_phase(v)).max() < 1e-6


def test_tiny_lambda_absorbs_residuals(coeffs30, plan30):
    ms = simulate(coeffs30, plan30, random_state(30, 5), 5)
    lam = 1e-6
    sol = solve_relaxation(SdpProblem.from_measurements(coeffs30, ms, lam))
    # a = z with V = 0 is feasible, so the optimum cannot exceed lam * ||z||_1.
    assert sol.objective <= lam * np.abs(ms.z).sum() * (1 + 1e-6)


@pytest.mark.filterwarnings("ignore:Solution may be inaccurate")
def test_matches_cvxpy_oracle(noisy_outlier):
    pytest.importorskip("cvxpy")
    _, _, p, sol = noisy_outlier
    V, a, val = cvx_relaxation(p.coeffs, p.z, p.w, p.lam)
    # Clarabel reports this instance as only approximately optimal (~1e-6).
    assert abs(sol.objective - val) <= 1e-5 * max(1.0, abs(val))
    assert sol.objective <= val + 1e-9 * abs(val)
    # Weak duality: our dual bound cannot exceed the objective at the oracle's V.
    V = psd_project((V + V.conj().T) / 2)
    at_oracle = p.objective(V, soft_threshold(p.z - p.coeffs.trace(V), p.lam / (2 * p.w)))
    assert sol.dual_value <= at_oracle + 1e-9 * abs(at_oracle)
    np.testing.assert_array_equal(outlier_support(sol.a, p.z, 1e-4), outlier_support(a, p.z, 1e-4))


def test_matches_cvxpy_on_random_small_network():
    pytest.importorskip("cvxpy")
    rng = np.random.default_rng(7)
    lines = (Line(1, 2, 1 - 5j), Line(2, 3, 2 - 6j), Line(1, 3, 1.5 - 4j, 0.02j))
    net = Network(3, lines, np.zeros(3))
    meters = [Meter("vmagsq", b) for b in (1, 2, 3)]
    meters += [Meter(k, ln.from_bus, ln.to_bus) for ln in lines for k in ("flow_p", "flow_q")]
    plan = MeasurementPlan(tuple(meters), np.full(len(meters), 0.02))
    C = measurement_matrices(net, plan)
    v = np.array([1.0, 0.97 * np.exp(-0.2j), 1.03 * np.exp(0.1j)])
    ms = inject_outliers(simulate(C, plan, v, 1), [int(rng.integers(len(meters)))], ScaleBy(1.5))
    lam = default_lambda(ms.w, 3)
    sol = solve_relaxation(SdpProblem.from_measurements(C, ms, lam))
    _, _, val = cvx_relaxation(C, ms.z, ms.w, lam)
    assert abs(sol.objective - val) <= 1e-5 * max(1.0, abs(val))
    assert sol.objective <= val + 1e-9 * max(1.0, abs(val))


def test_scaling_consistency(noisy_outlier):
    _, _, p, sol = noisy_outlier
    c = 7.5
    sol2 = solve_relaxation(SdpProblem(p.coeffs, p.z, c * p.w, c * p.lam))
    assert sol2.objective == pytest.approx(c * sol.objective, rel=1e-6)
    np.testing.assert_allclose(sol2.a, sol.a, atol=1e-5)


def test_chi_is_squared_residual(noisy_outlier):
    _, _, p, sol = noisy_outlier
    r = p.z - p.coeffs.trace(sol.V) - sol.a
    np.testing.assert_allclose(sol.chi, r**2, rtol=1e-12, atol=1e-15)
    assert sol.objective == pytest.approx(p.objective(sol.V, sol.a), rel=1e-12)


def test_relaxation_is_a_lower_bound(noisy_outlier, coeffs30):
    v, ms, p, sol = noisy_outlier
    tol = 1e-7 * max(1.0, sol.objective)
    assert sol.objective <= huber_cost(p, v) + tol
    gn = gauss_newton(coeffs30, ms, to_polar(v))
    assert sol.objective <= huber_cost(p, gn.v) + tol
    assert sol.dual_value <= sol.objective + tol


def test_certificate_and_kkt(noisy_outlier):
    _, _, _, sol = noisy_outlier
    assert sol.kkt["relative_gap"] <= 1e-7
    assert sol.kkt["dual_psd_violation"] <= 1e-7
    assert sol.kkt["projected_gradient"] <= 1e-6
    assert sol.kkt["outlier_stationarity"] <= 1e-6
    assert np.linalg.eigvalsh(sol.V)[0] >= -1e-10


def test_iteration_cap_raises(coeffs30, plan30):
    ms = simulate(coeffs30, plan30, random_state(30, 1), 1)
    p = SdpProblem.from_measurements(coeffs30, ms, default_lambda(ms.w))
    with pytest.raises(SolverError) as err:
        solve_relaxation(p, SolverOptions(max_iters=2, polish=False))
    assert "relative_gap" in err.value.diagnostics


# --- extraction --------------------------------------------------------------

def test_eigen_extraction_of_rank_one(coeffs30):
    v = random_state(30, 9)
    p = SdpProblem(coeffs30, coeffs30.quad(v), np.ones(coeffs30.m), 1.0)
    est = extract_eigen(manual_solution(p, np.outer(v, v.conj())))
    assert est.rank_of_V == 1
    np.testing.assert_allclose(est.v, align_phase(v), atol=1e-10)
    assert est.fit_cost < 1e-20
    assert est.v[0].imag == 0.0


def test_eigen_extraction_tie_break():
    p = SdpProblem(HermitianCoeffs(np.eye(2)[None]), np.array([1.0]), np.array([1.0]), 1.0)
    est = extract_eigen(manual_solution(p, np.eye(2, dtype=complex)))
    assert est.rank_of_V == 2
    np.testing.assert_allclose(est.v, [1.0, 0.0], atol=1e-12)


def test_eigen_extraction_phase_invariance(coeffs30):
    v = random_state(30, 2)
    p = SdpProblem(coeffs30, coeffs30.quad(v), np.ones(coeffs30.m), 1.0)
    a = extract_eigen(manual_solution(p, np.outer(v, v.conj()))).v
    u = v * np.exp(0.7j)
    b = extract_eigen(manual_solution(p, np.outer(u, u.conj()))).v
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_randomized_rescale_example():
    # One meter |v|^2 = 2 with V = [[1]]: every sample rescales to |v| = sqrt(2).
    p = SdpProblem(HermitianCoeffs(np.array([[[1.0]]])), np.array([2.0]), np.array([1.0]), 1.0)
    est = extract_randomized(manual_solution(p, np.array([[1.0 + 0j]])), n_samples=5)
    assert est.method == "randomized" and est.samples == 5
    assert est.v[0] == pytest.approx(np.sqrt(2))
    assert est.fit_cost < 1e-24


def test_randomized_never_worse_than_eigen(noisy_outlier):
    _, _, _, sol = noisy_outlier
    eig = extract_eigen(sol)
    for seed in range(3):
        assert extract_randomized(sol, 30, seed).fit_cost <= eig.fit_cost


def test_randomized_on_rank_one_matches_eigen(coeffs30):
    v = random_state(30, 3)
    p = SdpProblem(coeffs30, coeffs30.quad(v), np.ones(coeffs30.m), 1.0)
    sol = manual_solution(p, np.outer(v, v.conj()))
    est = extract_randomized(sol, 20, 0)
    assert est.fit_cost <= extract_eigen(sol).fit_cost + 1e-20
    np.testing.assert_allclose(est.v, align_phase(v), atol=1e-8)


def test_randomized_rejects_bad_arguments(noisy_outlier):
    _, _, p, sol = noisy_outlier
    with pytest.raises(ValueError):
        extract_randomized(sol, 0)
    bare = SdpSolution(sol.V, sol.a, sol.chi, 0.0, 0, 0.0, 0.0, sol.psi)
    with pytest.raises(ValueError):
        extract_randomized(bare)


# --- end to end --------------------------------------------------------------

def test_robust_estimate_huge_lambda_has_no_outliers(net30, plan30, coeffs30):
    ms = simulate(coeffs30, plan30, random_state(30, 6), 6)
    est, a, sol = robust_estimate(net30, plan30, ms, 1e9, coeffs=coeffs30)
    assert not a.any()
    assert est.v.shape == (30,) and est.v[0].imag == 0.0


def test_robust_estimate_noise_free(net30, plan30, coeffs30):
    v = random_state(30, 8)
    ms = simulate(coeffs30, plan30, v, 8, noise_scale=0)
    est, a, sol = robust_estimate(net30, plan30, ms, default_lambda(ms.w), coeffs=coeffs30)
    assert not a.any()
    assert np.abs(est.v - align_phase(v)).max() < 1e-6


def test_robust_estimate_is_deterministic(net30, plan30, coeffs30, noisy_outlier):
    _, ms, p, _ = noisy_outlier
    opts = EstimateOptions(n_samples=20, seed=3)
    e1, a1, _ = robust_estimate(net30, plan30, ms, p.lam, opts, coeffs30)
    e2, a2, _ = robust_estimate(net30, plan30, ms, p.lam, opts, coeffs30)
    np.testing.assert_array_equal(e1.v, e2.v)
    np.testing.assert_array_equal(a1, a2)
