import csv
import math

import numpy as np
import pytest

from vareg import DgpConfig, cluster_sandwich, ols_fe, rho_sweep, run_replications, simulate_panel
from vareg.simulation import EstimatorDraws, McSummary, het_effects_run, simulate_truth

from conftest import small_config


@pytest.fixture(scope="module")
def full_draw():
    return simulate_truth(DgpConfig(), 0)


def test_layout_and_determinism():
    c = small_config(J=20, T=3, n_per_class=4)
    a, b = simulate_panel(c, 3), simulate_panel(c, 3)
    np.testing.assert_array_equal(a.score, b.score)
    assert not np.array_equal(a.score, simulate_panel(c, 4).score)
    assert a.n_students == 20 * 3 * 4 and a.n_cells == 60
    assert sorted(set(a.year.tolist())) == [1, 2, 3]


def test_replication_stream_independent_of_design_size():
    # a variable's stream is keyed by (seed, rep, variable), so changing rho leaves eps untouched
    c0, c1 = small_config(rho=0.0), small_config(rho=0.7)
    p0, p1 = simulate_panel(c0, 2), simulate_panel(c1, 2)
    np.testing.assert_allclose(p0.score - p0.X[:, 0], p1.score - p1.X[:, 0])


def test_covariate_correlation(full_draw):
    panel, mu = full_draw
    mu_s = mu[panel.cell]
    r = np.corrcoef(panel.X[:, 0], mu_s)[0, 1]
    target = 0.5 / math.sqrt(0.5)
    # mu varies across 3000 teachers only
    assert abs(r - target) < 3 * (1 - target ** 2) / math.sqrt(3000)
    p0, mu0 = simulate_truth(small_config(J=3000, n_per_class=5, T=2, rho=0.0), 0)
    assert abs(np.corrcoef(p0.X[:, 0], mu0[p0.cell])[0, 1]) < 3 / math.sqrt(3000)


def test_score_variance(full_draw):
    panel, _ = full_draw
    v = np.var(panel.score)
    assert v == pytest.approx(1.10, rel=0.02)
    exact = 0.01 + 0.01 + 2 * 0.5 * 0.01 / math.sqrt(0.5) + 0.81 * 4 / 3
    assert v == pytest.approx(exact, rel=0.01)


def test_fixed_effect_coefficients_recovered(full_draw):
    panel, _ = full_draw
    f = ols_fe(panel.score, panel.X, panel.teacher)
    se = math.sqrt(cluster_sandwich(f)[0, 0])
    assert abs(f.beta[0] - 1.0) < 3 * se
    fy = ols_fe(panel.outcome, panel.X, panel.teacher)
    assert abs(fy.beta[0] - 10.0) < 3 * math.sqrt(cluster_sandwich(fy)[0, 0])


def test_config_validation():
    with pytest.raises(ValueError):
        DgpConfig(rho=1.0)
    with pytest.raises(ValueError):
        DgpConfig(var_eps=0)
    with pytest.raises(ValueError):
        DgpConfig(mu_model="random_walk")
    with pytest.raises(ValueError):
        DgpConfig(mu_model="persistent", sigma_omega=0.2)
    with pytest.raises(ValueError):
        het_effects_run(small_config(), R=1)
    assert DgpConfig().var_epsbar == pytest.approx(0.81 * 4 / 3 / 30)
    assert DgpConfig(heteroskedastic=False).var_epsbar == pytest.approx(0.81 / 30)


def test_heterogeneous_effects_draw():
    c = small_config(J=400, kappa_sd=5.0, mu_model="constant")
    p = simulate_panel(c, 0)
    assert np.all(np.isfinite(p.outcome))
    with pytest.raises(ValueError):
        DgpConfig(het_dependence=2.0)


def test_missing_outcomes():
    p = simulate_panel(small_config(outcome_missing=0.3), 0)
    assert 0.25 < 1 - p.has_outcome.mean() < 0.35


def test_run_replications_jobs_invariant():
    c = small_config(J=80, T=4)
    a = run_replications(c, ("ols_naive", "gmm"), R=4, jobs=1, start=10)
    b = run_replications(c, ("ols_naive", "gmm"), R=4, jobs=2, start=10)
    np.testing.assert_array_equal(a["ols_naive"].kappa, b["ols_naive"].kappa)
    np.testing.assert_array_equal(a.reps, np.arange(10, 14))
    # exactly identified GMM reproduces the multi-step estimate
    np.testing.assert_allclose(a["gmm"].kappa, a["ols_naive"].kappa, rtol=1e-8)
    assert a.extras["phi"].shape == (4, 3)


def test_failures_are_recorded():
    c = small_config(J=40, T=3, n_per_class=2, outcome_missing=0.6)
    s = run_replications(c, ("ols_naive", "3sls"), R=2)
    assert s["3sls"].n_failed == 2
    assert "PanelError" in next(iter(s["3sls"].errors.values()))
    assert s["ols_naive"].n_failed == 0
    with pytest.raises(ValueError, match="unknown estimator"):
        run_replications(c, ("bogus",), R=1)
    with pytest.raises(ValueError):
        run_replications(c, ("gmm",), R=0)


def test_summary_metrics():
    k = np.array([99.0, 101.0, 100.0, np.nan])
    s = np.array([1.0, 0.5, 2.0, 1.0])
    d = EstimatorDraws(k, s, np.full(4, np.nan), 100.0)
    assert d.n_failed == 1
    assert d.bias == pytest.approx(0.0)
    assert d.mc_variance == pytest.approx(1.0)
    assert d.mean_variance == pytest.approx((1 + 0.25 + 4) / 3)
    assert d.coverage == pytest.approx(2 / 3)
    summ = McSummary(DgpConfig(), np.arange(4), {"x": d}, {"phi": np.zeros((4, 2))}, 0.0)
    assert summ.subset(2)["x"].kappa.size == 2
    assert summ.table()[0]["estimator"] == "x"


def test_rho_sweep_csv(tmp_path):
    c = small_config(J=60, T=4)
    path = tmp_path / "sweep.csv"
    out = rho_sweep(c, rhos=(0.0, 0.5), R=2, estimators=("ols_naive",), path=path)
    assert set(out) == {0.0, 0.5}
    rows = list(csv.DictReader(open(path)))
    assert [r["rho"] for r in rows] == ["0", "0.5"]
    assert set(rows[0]) == {"rho", "estimator", "coverage", "mc_sd", "mean_se"}
    again = rho_sweep(c, rhos=(0.0,), R=1, estimators=("ols_naive",), reuse=out)
    assert again[0.0]["ols_naive"].kappa[0] == out[0.0]["ols_naive"].kappa[0]


def test_shrinkage_property(full_draw):
    from vareg import estimate_va
    est = estimate_va(full_draw[0])
    assert np.var(est.mu_star) < np.var(est.prelim.prelim_va)
