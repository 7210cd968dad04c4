"""Closed-form linear estimators: fixed-effects OLS, OLS, 2SLS and cluster sandwiches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

RANK_TOL = 1e-10


class SingularDesignError(np.linalg.LinAlgError):
    """A cross-product matrix is numerically singular."""


def _names(names, k):
    return list(names) if names is not None else [f"col{i}" for i in range(k)]


def spd_inverse(a: np.ndarray, names=None, what: str = "design") -> np.ndarray:
    """Invert a symmetric positive definite matrix, failing on rank deficiency.

    The relative tolerance is applied to the eigenvalues of the
    diagonally-scaled matrix, so badly scaled but full-rank designs pass.
    Columns involved in the smallest eigenvector are named in the error.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    k = a.shape[0]
    if k == 0:
        return np.zeros((0, 0))
    d = np.sqrt(np.abs(np.diag(a)))
    zero = d == 0
    if np.any(zero):
        bad = [n for n, z in zip(_names(names, k), zero) if z]
        raise SingularDesignError(f"{what} is singular: columns {bad} have no variation")
    scaled = a / np.outer(d, d)
    w, v = np.linalg.eigh((scaled + scaled.T) / 2)
    if w[0] <= RANK_TOL * max(w[-1], 1.0):
        vec = np.abs(v[:, 0])
        bad = [n for n, c in zip(_names(names, k), vec) if c > 1e-3]
        raise SingularDesignError(f"{what} is singular: collinear columns {bad}")
    c = scipy.linalg.cho_factor(scaled, lower=True)
    inv = scipy.linalg.cho_solve(c, np.eye(k))
    inv = inv / np.outer(d, d)
    return (inv + inv.T) / 2


def demean_by_group(values: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Subtract group means (rows of 1d or 2d ``values``)."""
    values = np.asarray(values, dtype=float)
    g = _codes(groups)
    ng = g.max() + 1 if g.size else 0
    counts = np.bincount(g, minlength=ng).astype(float)
    counts[counts == 0] = 1.0
    if values.ndim == 1:
        return values - (np.bincount(g, weights=values, minlength=ng) / counts)[g]
    out = np.empty_like(values)
    for k in range(values.shape[1]):
        col = values[:, k]
        out[:, k] = col - (np.bincount(g, weights=col, minlength=ng) / counts)[g]
    return out


def _codes(labels) -> np.ndarray:
    # small non-negative integer labels are used as-is
    labels = np.asarray(labels)
    if labels.dtype.kind in "iu" and labels.size and labels.min() >= 0 and labels.max() < 4 * labels.size:
        return labels.astype(np.intp, copy=False)
    return np.unique(labels, return_inverse=True)[1].ravel()


@dataclass(frozen=True, eq=False)
class FeFit:
    """Linear fit with optional absorbed group effects.

    ``residuals`` are on the original scale, ``y - X @ beta``; the group
    effects are used only to estimate ``beta``. ``design`` and
    ``within_residuals`` are the (demeaned) arrays entering the sandwich.
    """

    beta: np.ndarray
    residuals: np.ndarray
    xtx_inv: np.ndarray
    design: np.ndarray
    within_residuals: np.ndarray
    groups: np.ndarray | None = None

    @property
    def beta_hat(self):
        return self.beta

    @property
    def cluster_ids(self):
        return self.groups


def ols(y, X, names=None) -> FeFit:
    """Ordinary least squares without absorbed effects."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    xtx_inv = spd_inverse(X.T @ X, names)
    beta = xtx_inv @ (X.T @ y)
    u = y - X @ beta
    return FeFit(beta, u, xtx_inv, X, u)


def ols_fe(y, X, group, names=None) -> FeFit:
    """Within (fixed-effects) OLS.

    Parameters
    ----------
    y : array_like, shape (n,)
    X : array_like, shape (n, K)
        ``K`` may be zero, in which case ``beta`` is empty and the residuals
        equal ``y``.
    group : array_like, shape (n,)
        Group identifiers whose effects are absorbed.
    names : sequence of str, optional
        Column names used in error messages.

    Returns
    -------
    FeFit
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    group = np.asarray(group)
    if X.shape[0] != y.shape[0] or group.shape[0] != y.shape[0]:
        raise ValueError("y, X and group must have the same number of rows")
    yd = demean_by_group(y, group)
    K = X.shape[1]
    if K == 0:
        return FeFit(np.zeros(0), y.copy(), np.zeros((0, 0)), np.zeros((y.size, 0)), yd, group)
    Xd = demean_by_group(X, group)
    xtx_inv = spd_inverse(Xd.T @ Xd, names, what="within design")
    beta = xtx_inv @ (Xd.T @ yd)
    return FeFit(beta, y - X @ beta, xtx_inv, Xd, yd - Xd @ beta, group)


def cluster_sandwich(fit: FeFit, cluster=None, small_sample: bool = False) -> np.ndarray:
    """Cluster-robust covariance ``(X'X)^-1 (sum_c X_c'u_c u_c'X_c) (X'X)^-1``.

    With one observation per cluster this is the HC0 estimator. The optional
    ``G / (G - 1)`` factor is off by default.
    """
    cluster = fit.groups if cluster is None else np.asarray(cluster)
    if cluster is None:
        raise ValueError("no cluster identifiers")
    _, c = np.unique(_codes(cluster), return_inverse=True)
    G = c.max() + 1 if c.size else 0
    if G < 2:
        raise ValueError("cluster_sandwich needs at least two clusters")
    scores = fit.design * fit.within_residuals[:, None]
    S = np.empty((G, scores.shape[1]))
    for k in range(scores.shape[1]):
        S[:, k] = np.bincount(c, weights=scores[:, k], minlength=G)
    meat = S.T @ S
    if small_sample:
        meat *= G / (G - 1)
    V = fit.xtx_inv @ meat @ fit.xtx_inv
    return (V + V.T) / 2


@dataclass(frozen=True, eq=False)
class TslsFit:
    """Two-stage least squares fit.

    ``coef`` stacks the endogenous coefficients first, then the included
    exogenous ones. ``first_stage_coef`` has one column per endogenous
    regressor.
    """

    coef: np.ndarray
    first_stage_coef: np.ndarray
    cov_2sls: np.ndarray
    residuals: np.ndarray
    fitted_design: np.ndarray


def tsls(y, endog, instruments, include_cov=None, cluster=None, small_sample: bool = False) -> TslsFit:
    """2SLS of ``y`` on ``endog`` using excluded ``instruments``.

    Parameters
    ----------
    y : array_like, shape (n,)
    endog : array_like, shape (n,) or (n, k1)
    instruments : array_like, shape (n, L)
    include_cov : array_like, shape (n, k2), optional
        Included exogenous regressors, which instrument themselves.
    cluster : array_like, shape (n,), optional
        Cluster labels for the covariance; HC0 when omitted.

    Returns
    -------
    TslsFit
    """
    y = np.asarray(y, dtype=float)
    endog = np.asarray(endog, dtype=float)
    if endog.ndim == 1:
        endog = endog[:, None]
    Z = np.asarray(instruments, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[1] < 1:
        raise ValueError("at least one instrument is required")
    W = np.zeros((y.size, 0)) if include_cov is None else np.asarray(include_cov, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if Z.shape[1] < endog.shape[1]:
        raise ValueError(f"{Z.shape[1]} instruments for {endog.shape[1]} endogenous regressors")
    full_z = np.hstack([Z, W])
    ztz_inv = spd_inverse(full_z.T @ full_z, what="instrument matrix")
    pi = ztz_inv @ (full_z.T @ endog)
    fitted = full_z @ pi
    Xhat = np.hstack([fitted, W])
    X = np.hstack([endog, W])
    try:
        inv = spd_inverse(Xhat.T @ Xhat, what="first stage")
    except SingularDesignError as exc:
        raise SingularDesignError(f"rank-deficient first stage: {exc}") from None
    coef = inv @ (Xhat.T @ y)
    u = y - X @ coef
    fit = FeFit(coef, u, inv, Xhat, u)
    cl = np.arange(y.size) if cluster is None else cluster
    cov = cluster_sandwich(fit, cl, small_sample=small_sample)
    return TslsFit(coef, pi[: Z.shape[1]] if W.shape[1] else pi, cov, u, Xhat)
