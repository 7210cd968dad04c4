"""Random assignment of students to teachers.

When covariates are unrelated to teacher quality the score residualization
step does not matter for kappa, and a cell-level 2SLS that instruments this
year's class mean with the other years' means already gives valid
inference. 3SLS stacks the score and outcome equations; without covariates it
collapses to 2SLS.
"""
from vareg import DgpConfig, fit_2sls_random_assignment, fit_3sls, simulate_panel

panel = simulate_panel(DgpConfig(J=1000, T=6, rho=0.0, covariates=False, seed=3))
k2 = fit_2sls_random_assignment(panel, random_assignment=True)
k3 = fit_3sls(panel, random_assignment=True)
print(f"2SLS kappa {k2.kappa_hat:.3f}  SE {k2.naive_se:.3f}")
print(f"3SLS kappa {k3.param('kappa')[0]:.3f}  SE {k3.se('kappa')[0]:.3f}")

try:
    fit_2sls_random_assignment(panel)
except ValueError as exc:
    print("without the flag:", exc)
