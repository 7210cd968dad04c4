"""Value added as the dependent variable.

Teacher-year characteristics D are regressed on preliminary VA. One D is
pure noise, the other is the class mean of the student covariate, which
enters the residualization. Only the second needs the variance correction,
and the D'X orthogonality test flags it.
"""
import numpy as np

from vareg import DgpConfig, simulate_panel, va_outcome_fit

panel = simulate_panel(DgpConfig(J=1000, T=5, seed=4))
rng = np.random.default_rng(0)
xbar = np.bincount(panel.cell, weights=panel.X[:, 0]) / np.bincount(panel.cell)

for label, D in (("noise", rng.normal(size=(panel.n_cells, 1))), ("class mean of X", xbar[:, None])):
    fit = va_outcome_fit(panel, D)
    stat, p = fit.dx_test
    print(f"{label:16s} alpha {fit.alpha_hat[1]: .4f}  naive SE {fit.naive_se[1]:.4f}  "
          f"corrected SE {fit.corrected_se[1]:.4f}  D'X test p = {p:.3g}")
