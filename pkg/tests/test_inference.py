import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from vareg import (
    DgpConfig, GmmError, PanelData, PanelError, build_longrun_system, build_overid_system, build_va_outcome_system,
    corrected_sigma2, dx_orthogonality_test, estimate_va, fit_2sls_random_assignment, fit_3sls, gmm_minimize,
    multistep_ols_kappa, numerical_jacobian, simulate_panel, solve_exactly_identified, tsls, va_outcome_fit,
    variance_gap_diagnostic,
)
from vareg.gmm import evaluate
from vareg.inference import gradient_blocks, longrun_data, w1_weight

from conftest import random_panel, small_config

seeds = st.integers(0, 2 ** 31 - 1)
EQUIV = settings(max_examples=8, deadline=None)


def _panel(seed, **kw):
    return simulate_panel(small_config(seed=seed, **kw), 0)


def _fits(panel, **kw):
    est = estimate_va(panel, **kw)
    k = multistep_ols_kappa(est.prelim, est.mu_star)
    return est, k


# ---------------------------------------------------------------- equivalences


@EQUIV
@given(seed=seeds, T=st.integers(3, 6), resid=st.booleans())
def test_multistep_equals_exactly_identified_gmm(seed, T, resid):
    p = _panel(seed, T=T)
    est, k = _fits(p, residualize_outcome=resid)
    fit = solve_exactly_identified(build_longrun_system(p, residualize_outcome=resid))
    assert fit.param("kappa")[0] == pytest.approx(k.kappa_hat, rel=1e-8)
    np.testing.assert_allclose(fit.param("beta"), est.beta_hat, rtol=1e-8)
    np.testing.assert_allclose(fit.param("phi"), est.phi.coefficients, rtol=1e-7, atol=1e-12)


@EQUIV
@given(seed=seeds, T=st.integers(3, 6), resid=st.booleans(), missing=st.sampled_from([0.0, 0.3]))
def test_corrected_variance_equals_full_sandwich(seed, T, resid, missing):
    p = _panel(seed, T=T, outcome_missing=missing)
    est, k = _fits(p, residualize_outcome=resid)
    ck = corrected_sigma2(p, est, k)
    fit = solve_exactly_identified(build_longrun_system(p, residualize_outcome=resid))
    J = p.n_teachers
    assert ck.sigma2_hat == pytest.approx(fit.cov[-1, -1] * J, rel=1e-6)
    assert ck.se == pytest.approx(fit.se("kappa")[0], rel=1e-6)


def test_corrected_variance_unrestricted_and_unbalanced():
    rng = np.random.default_rng(7)
    p = random_panel(rng, J=60, T=5, n=6, K=2, unbalanced=True, missing=0.1)
    est, k = _fits(p)
    fit = solve_exactly_identified(build_longrun_system(p))
    assert corrected_sigma2(p, est, k).sigma2_hat == pytest.approx(fit.cov[-1, -1] * p.n_teachers, rel=1e-6)
    q = _panel(3, T=4)
    est, k = _fits(q, phi_mode="unrestricted")
    fit = solve_exactly_identified(build_longrun_system(q, phi_mode="unrestricted"))
    assert corrected_sigma2(q, est, k).sigma2_hat == pytest.approx(fit.cov[-1, -1] * q.n_teachers, rel=1e-6)


@EQUIV
@given(seed=seeds, T=st.integers(3, 5))
def test_gradient_blocks_match_jacobian(seed, T):
    p = _panel(seed, T=T, outcome_missing=0.2)
    s = build_longrun_system(p)
    fit = solve_exactly_identified(s)
    d = longrun_data(p)
    th = fit.theta
    b = gradient_blocks(d, fit.param("beta"), fit.param("beta_y"), fit.param("phi"), fit.param("kappa")[0])
    G = numerical_jacobian(s, th)
    ms, ps = s.moment_slice, s.param_slice
    tol = dict(rtol=1e-4, atol=1e-6 * np.abs(G).max())
    np.testing.assert_allclose(b.G_kappa, G[ms("g"), ps("kappa")][0, 0], **tol)
    np.testing.assert_allclose(b.G_beta, G[ms("g"), ps("beta")][0], **tol)
    np.testing.assert_allclose(b.G_phi, G[ms("g"), ps("phi")][0], **tol)
    np.testing.assert_allclose(b.G_betaY, G[ms("g"), ps("beta_y")][0], **tol)
    np.testing.assert_allclose(b.M2phi, G[ms("m2"), ps("phi")], **tol)
    np.testing.assert_allclose(b.M2beta, G[ms("m2"), ps("beta")], **tol)
    np.testing.assert_allclose(b.M1, G[ms("m1"), ps("beta")], **tol)


@EQUIV
@given(seed=seeds, T=st.integers(3, 5))
def test_analytic_jacobians_match_finite_differences(seed, T):
    p = _panel(seed, T=T, outcome_missing=0.2)
    rng = np.random.default_rng(seed)
    systems = [build_longrun_system(p), build_overid_system(p), build_longrun_system(p, residualize_outcome=False)]
    for s in systems:
        th = rng.normal(size=s.n_params) * 0.5 + 1.0
        _, _, G = evaluate(s, th)
        Gn = numerical_jacobian(s, th)
        assert np.max(np.abs(G - Gn)) < 1e-4 * max(1.0, np.abs(Gn).max())
    D = rng.normal(size=(p.n_cells, 2))
    s = build_va_outcome_system(p, D)
    th = rng.normal(size=s.n_params)
    assert np.max(np.abs(evaluate(s, th)[2] - numerical_jacobian(s, th))) < 1e-4


def test_3sls_jacobian_matches_finite_differences():
    p = _panel(4, T=4, rho=0.0)
    fit = fit_3sls(p, random_assignment=True)
    s = fit.system
    th = fit.theta + 0.1
    _, _, G = evaluate(s, th)
    Gn = numerical_jacobian(s, th)
    assert np.max(np.abs(G - Gn)) < 1e-4 * max(1.0, np.abs(Gn).max())


@EQUIV
@given(seed=seeds, T=st.integers(3, 6))
def test_w1_weight_reproduces_multistep(seed, T):
    p = _panel(seed, T=T)
    est, k = _fits(p)
    s = build_overid_system(p)
    W = w1_weight(s, est.phi.coefficients)
    fit = gmm_minimize(s, W, theta0=np.concatenate([est.beta_hat, est.beta_y_hat, [k.kappa_hat + 1.0]]))
    assert fit.param("kappa")[0] == pytest.approx(k.kappa_hat, rel=1e-6)


@EQUIV
@given(seed=seeds, leaveout=st.booleans(), intercept=st.booleans())
def test_va_outcome_v1_equals_sandwich(seed, leaveout, intercept):
    p = _panel(seed, T=4)
    rng = np.random.default_rng(seed)
    cells_x = np.bincount(p.cell, weights=p.X[:, 0]) / np.bincount(p.cell)
    D = np.column_stack([cells_x + rng.normal(size=p.n_cells) * 0.05, rng.normal(size=p.n_cells)])
    vf = va_outcome_fit(p, D, leaveout=leaveout, add_intercept=intercept)
    gm = solve_exactly_identified(build_va_outcome_system(p, D, leaveout=leaveout, add_intercept=intercept))
    np.testing.assert_allclose(vf.alpha_hat, gm.param("alpha"), rtol=1e-8, atol=1e-12)
    sl = gm.system.param_slice("alpha")
    np.testing.assert_allclose(vf.v1_hat, gm.cov[sl, sl], rtol=1e-6, atol=1e-14)


# ---------------------------------------------------------------- corrected inference behaviour


def test_variance_gap_decomposition(medium_panel):
    est, k = _fits(medium_panel)
    ck = corrected_sigma2(medium_panel, est, k)
    gap = variance_gap_diagnostic(medium_panel, ck)
    assert gap.gap == pytest.approx(gap.cross + gap.variance, rel=1e-10)
    assert ck.naive_s2 == pytest.approx(np.mean(ck.g ** 2) / ck.blocks.G_kappa ** 2)


def test_corrected_exceeds_naive_with_sorting():
    p = simulate_panel(DgpConfig(J=1500, seed=3), 0)
    est, k = _fits(p)
    ck = corrected_sigma2(p, est, k)
    assert ck.se > k.naive_se
    # naive_s2 of the influence representation is the unclustered-in-time analogue of the OLS naive variance
    assert ck.naive_se == pytest.approx(k.naive_se, rel=0.05)


def test_instruments_valid_at_truth():
    p = simulate_panel(DgpConfig(J=3000, seed=9), 0)
    s = build_overid_system(p)
    g = s.contributions(np.array([1.0, 10.0, 100.0]))
    J = g.shape[0]
    gbar = g.mean(axis=0)
    Sc = np.cov(g.T, bias=True)
    stat = J * gbar @ np.linalg.solve(Sc, gbar)
    assert stat < stats.chi2.ppf(0.999, g.shape[1])


def test_overid_dof(small_panel):
    from vareg import optimal_gmm
    fit = optimal_gmm(build_overid_system(small_panel))
    assert fit.dof == small_panel.years_per_teacher[0].size - 2


# ---------------------------------------------------------------- random assignment


def test_2sls_requires_flag(small_panel):
    with pytest.raises(ValueError, match="random assignment"):
        fit_2sls_random_assignment(small_panel)
    with pytest.raises(ValueError, match="random assignment"):
        fit_3sls(small_panel)


def test_2sls_matches_tsls_on_cells(small_panel):
    from vareg import class_aggregate
    k = fit_2sls_random_assignment(small_panel, random_assignment=True)
    cp = class_aggregate(small_panel, small_panel.score, small_panel.outcome).centered("year")
    Z = cp.from_grid(cp.leaveout_design(cp.to_grid(cp.prelim_va), "stationary"))
    ref = tsls(cp.outcome_resid, cp.prelim_va, Z, cluster=cp.teacher)
    assert k.kappa_hat == pytest.approx(ref.coef[0], rel=1e-12)
    assert k.naive_se == pytest.approx(np.sqrt(ref.cov_2sls[0, 0]), rel=1e-12)


def test_3sls_equals_2sls_with_diagonal_covariance():
    p = _panel(5, T=4, rho=0.0)
    fit = fit_3sls(p, random_assignment=True, uu_cov=np.diag([1.0, 2.0, 3.0]))
    assert fit.param("kappa")[0] == pytest.approx(fit.extras["kappa_2sls"], rel=1e-8)
    full = fit_3sls(p, random_assignment=True)
    assert full.extras["uu_cov"].shape == (3, 3)


def test_3sls_without_covariates_equals_2sls():
    rng = np.random.default_rng(11)
    base = random_panel(rng, J=80, T=4, n=5, K=0)
    fit = fit_3sls(base, random_assignment=True)
    assert fit.param("kappa")[0] == pytest.approx(fit.extras["kappa_2sls"], rel=1e-8)


def test_3sls_needs_all_outcomes():
    p = _panel(2, T=3, n_per_class=2, outcome_missing=0.6)
    with pytest.raises(PanelError, match="every teacher-year"):
        fit_3sls(p, random_assignment=True)


# ---------------------------------------------------------------- VA as outcome


def test_va_outcome_alpha_is_ols(small_panel):
    rng = np.random.default_rng(0)
    D = rng.normal(size=(small_panel.n_cells, 1))
    vf = va_outcome_fit(small_panel, D)
    est = estimate_va(small_panel)
    from vareg import class_aggregate
    cp = class_aggregate(small_panel, small_panel.score).centered("grand")
    v = cp.prelim_va - cp.covariate_means @ est.beta_hat
    H = np.column_stack([np.ones_like(v), D[:, 0]])
    np.testing.assert_allclose(vf.alpha_hat, np.linalg.lstsq(H, v, rcond=None)[0], atol=1e-10)
    assert vf.names == ("const", "d1")
    assert vf.dx_cross.shape == (1, 1)


def test_va_outcome_corrected_exceeds_naive_when_d_is_covariate():
    p = simulate_panel(DgpConfig(J=1500, seed=4), 0)
    xbar = np.bincount(p.cell, weights=p.X[:, 0]) / np.bincount(p.cell)
    vf = va_outcome_fit(p, xbar[:, None])
    assert vf.corrected_se[1] > vf.naive_se[1]
    assert vf.dx_test[1] < 1e-6


def test_dx_test_shapes_and_errors(small_panel):
    rng = np.random.default_rng(1)
    D = rng.normal(size=(small_panel.n_cells, 2))
    stat, p, cross = dx_orthogonality_test(small_panel, D)
    assert cross.shape == (2, 1) and 0 <= p <= 1
    with pytest.raises(PanelError):
        dx_orthogonality_test(small_panel, D[:-1])
    q = PanelData.from_arrays(small_panel.student_id, small_panel.teacher, small_panel.year, small_panel.score)
    with pytest.raises(ValueError, match="no covariates"):
        dx_orthogonality_test(q, D)


def test_gmm_error_on_zero_va():
    # a panel with no persistent VA and no covariates still fits; a constant score gives no VA variation
    rng = np.random.default_rng(2)
    p = random_panel(rng, J=10, T=3, n=3, K=1)
    q = PanelData.from_arrays(p.student_id, p.teacher, p.year, np.zeros(p.n_students), p.outcome, p.X)
    with pytest.raises((GmmError, np.linalg.LinAlgError)):
        solve_exactly_identified(build_longrun_system(q))
