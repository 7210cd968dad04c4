"""The multi-step value-added procedure.

Scores and outcomes are residualized on covariates with teacher fixed
effects, class means give preliminary VA, other-year preliminary VA is
projected onto the current year to form shrunk VA, and the long-run outcome
is regressed on shrunk VA.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .panel import ClassPanel, PanelData, PanelError, class_aggregate
from .regression import FeFit, SingularDesignError, cluster_sandwich, ols, ols_fe


@dataclass(frozen=True, eq=False)
class PhiSpec:
    """Best-linear-predictor coefficients.

    In ``stationary`` mode ``labels`` are the year gaps ``|s - t|`` and
    ``coefficients[g]`` multiplies the sum of preliminary VA over the years
    at gap ``labels[g]``. In ``unrestricted`` mode ``labels`` are
    leave-out positions ``1..T-1`` (other years in ascending order).
    """

    mode: str
    labels: np.ndarray
    coefficients: np.ndarray

    def as_dict(self) -> dict:
        return {int(k): float(v) for k, v in zip(self.labels, self.coefficients)}

    def aligned(self, labels) -> np.ndarray:
        """Coefficients ordered like ``labels``; error when one is missing."""
        lookup = self.as_dict()
        missing = [int(g) for g in labels if int(g) not in lookup]
        if missing:
            raise PanelError(f"no coefficient for gap(s) {missing}")
        return np.array([lookup[int(g)] for g in labels])


@dataclass(frozen=True, eq=False)
class KappaFit:
    kappa_hat: float
    naive_se: float
    corrected_se: float | None = None
    n_teacheryears: int = 0
    n_teachers: int = 0
    estimator: str = "multistep"


@dataclass(frozen=True, eq=False)
class VaEstimates:
    """Output of the VA construction steps.

    ``prelim`` holds the centered class aggregates of residualized scores and
    outcomes; ``mu_star`` is shrunk VA for each of its cells.
    """

    beta_hat: np.ndarray
    beta_y_hat: np.ndarray | None
    phi: PhiSpec
    mu_star: np.ndarray
    prelim: ClassPanel
    center: str = "grand"
    score_fit: FeFit | None = field(default=None, repr=False)
    outcome_fit: FeFit | None = field(default=None, repr=False)


def residualize_scores(panel: PanelData):
    """Within-teacher regression of scores on covariates.

    Returns ``(beta_hat, residuals)`` with residuals ``score - X @ beta_hat``;
    the teacher effects are not subtracted.
    """
    fit = ols_fe(panel.score, panel.X, panel.teacher, names=panel.covariate_names)
    return fit.beta, fit.residuals


def residualize_outcome(panel: PanelData, passthrough: bool = False):
    """Within-teacher regression of the outcome on covariates.

    Uses students with an observed outcome; residuals are ``nan`` elsewhere.
    With ``passthrough`` the raw outcome is returned and ``beta_y_hat`` is
    ``None``.
    """
    if passthrough:
        return None, panel.outcome.copy()
    obs = panel.has_outcome
    if not np.any(obs):
        raise PanelError("no student has an observed outcome")
    fit = ols_fe(panel.outcome[obs], panel.X[obs], panel.teacher[obs], names=panel.covariate_names)
    res = np.full(panel.n_students, np.nan)
    res[obs] = fit.residuals
    return fit.beta, res


_residualize_outcome = residualize_outcome


def _design(class_panel: ClassPanel, mode: str, values=None):
    values = class_panel.prelim_va if values is None else values
    Z = class_panel.leaveout_design(class_panel.to_grid(values), mode)
    return class_panel.from_grid(Z), class_panel.design_labels(mode)


def fit_blp(class_panel: ClassPanel, mode: str = "stationary") -> PhiSpec:
    """Pooled regression of preliminary VA on other-year preliminary VA.

    Parameters
    ----------
    class_panel : ClassPanel
    mode : {"stationary", "unrestricted"}
        Stationary mode has one coefficient per distinct year gap, applied
        to the sum of preliminary VA at that gap. Unrestricted mode has one
        coefficient per leave-out position and needs a balanced panel.

    Returns
    -------
    PhiSpec
    """
    Z, labels = _design(class_panel, mode)
    names = [f"gap{g}" if mode == "stationary" else f"pos{g}" for g in labels]
    try:
        fit = ols(class_panel.prelim_va, Z, names=names)
    except SingularDesignError as exc:
        raise SingularDesignError(f"best-linear-predictor design is singular: {exc}") from None
    return PhiSpec(mode, np.asarray(labels), fit.beta)


def shrunk_va(class_panel: ClassPanel, phi: PhiSpec) -> np.ndarray:
    """Shrunk VA ``sum_{s != t} phi_|s-t| Rbar_js`` for every cell."""
    Z, labels = _design(class_panel, phi.mode)
    return Z @ phi.aligned(labels)


def multistep_ols_kappa(class_panel: ClassPanel, mu_hat, weights: str = "equal") -> KappaFit:
    """No-intercept regression of class outcome residuals on shrunk VA.

    Only cells with an observed outcome enter. ``naive_se`` is clustered by
    teacher and ignores the estimation of the earlier steps.
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    keep = class_panel.has_outcome
    mu = mu_hat[keep]
    y = class_panel.outcome_resid[keep]
    if weights == "equal":
        w = np.ones_like(mu)
    elif weights == "class_size":
        w = class_panel.class_size[keep].astype(float)
    else:
        raise ValueError(f"unknown weights {weights!r}")
    sxx = np.sum(w * mu * mu)
    if not sxx > 1e-300 or np.allclose(mu, 0.0):
        raise SingularDesignError("shrunk VA has zero variance")
    kappa = np.sum(w * mu * y) / sxx
    sw = np.sqrt(w)
    u = sw * (y - kappa * mu)
    fit = FeFit(np.array([kappa]), u, np.array([[1.0 / sxx]]), (sw * mu)[:, None], u)
    teachers = class_panel.teacher[keep]
    V = cluster_sandwich(fit, teachers)
    return KappaFit(
        kappa_hat=float(kappa), naive_se=float(np.sqrt(V[0, 0])),
        n_teacheryears=int(keep.sum()), n_teachers=int(np.unique(teachers).size),
    )


def analytic_shrinkage_factor(var_mu: float, var_epsbar: float) -> float:
    """Population BLP coefficient ``Var(mu) / (Var(mu) + Var(epsbar))`` for two years of constant VA."""
    if var_mu < 0 or var_epsbar < 0:
        raise ValueError("variances must be non-negative")
    if var_epsbar == 0:
        raise ValueError("var_epsbar must be positive")
    return var_mu / (var_mu + var_epsbar)


def estimate_va(
    panel: PanelData,
    phi_mode: str = "stationary",
    residualize_outcome: bool = True,
    center: str = "grand",
) -> VaEstimates:
    """Run the residualization, aggregation, BLP and shrinkage steps.

    ``center`` removes the mean of the class aggregates (``"grand"``) or
    their year means (``"year"``), standing in for the intercept or year
    effects of the later regressions.
    """
    beta, r = residualize_scores(panel)
    beta_y, y = _residualize_outcome(panel, passthrough=not residualize_outcome)
    cp = class_aggregate(panel, r, y).centered(center)
    phi = fit_blp(cp, phi_mode)
    mu = shrunk_va(cp, phi)
    return VaEstimates(beta, beta_y, phi, mu, cp, center)


def fit_multistep(panel: PanelData, phi_mode: str = "stationary", residualize_outcome: bool = True,
                  center: str = "grand", weights: str = "equal"):
    """Convenience wrapper returning ``(VaEstimates, KappaFit)``."""
    est = estimate_va(panel, phi_mode, residualize_outcome, center)
    return est, multistep_ols_kappa(est.prelim, est.mu_star, weights)
