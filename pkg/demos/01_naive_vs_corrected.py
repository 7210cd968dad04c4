"""Regress a long-run outcome on estimated value added.

A synthetic panel is drawn in which the student covariate is correlated with
teacher quality. The multi-step estimate of kappa is computed together with
the naive clustered standard error and the corrected one that accounts for
the first-step estimation of beta and phi.
"""
from vareg import DgpConfig, corrected_sigma2, estimate_va, multistep_ols_kappa, simulate_panel

cfg = DgpConfig(J=1000, T=6, rho=0.5, seed=1)
panel = simulate_panel(cfg)
print(f"{panel.n_students} students, {panel.n_teachers} teachers, {panel.n_cells} classes")

est = estimate_va(panel)
print("beta (score)  :", est.beta_hat.round(3))
print("phi by lag    :", est.phi.as_dict())

k = multistep_ols_kappa(est.prelim, est.mu_star)
ck = corrected_sigma2(panel, est, k)
print(f"kappa_hat     : {k.kappa_hat:.2f}  (true {cfg.kappa0})")
print(f"naive SE      : {k.naive_se:.3f}")
print(f"corrected SE  : {ck.se:.3f}")
print(f"the naive variance is {1 - ck.naive_s2 / ck.sigma2_hat:.0%} too small")
