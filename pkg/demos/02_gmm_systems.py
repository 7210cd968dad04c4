"""The same estimate as a GMM system, then an efficient overidentified one.

Stacking the score regression, the best-linear-predictor equations and the
outcome equation gives an exactly identified system whose solution is the
multi-step estimate. Replacing the estimated VA with the raw other-year
class means as instruments gives T - 2 overidentifying restrictions, which
optimal GMM uses for efficiency and for a J-test.
"""
from vareg import (
    DgpConfig, build_longrun_system, build_overid_system, estimate_va, j_test, multistep_ols_kappa,
    optimal_gmm, simulate_panel, solve_exactly_identified,
)

panel = simulate_panel(DgpConfig(J=1000, T=6, seed=2))
est = estimate_va(panel)
k = multistep_ols_kappa(est.prelim, est.mu_star)

exact = solve_exactly_identified(build_longrun_system(panel))
print(f"multi-step kappa          : {k.kappa_hat:.6f}")
print(f"exactly identified GMM    : {exact.param('kappa')[0]:.6f}  SE {exact.se('kappa')[0]:.3f}")

opt = optimal_gmm(build_overid_system(panel))
stat, dof, p = j_test(opt)
print(f"optimal GMM               : {opt.param('kappa')[0]:.6f}  SE {opt.se('kappa')[0]:.3f}")
print(f"J = {stat:.2f} on {dof} dof, p = {p:.3f}")
