"""Stacked-moment GMM: evaluation, solving, sandwich covariance, optimal weighting, J-test.

A :class:`MomentSystem` returns per-cluster moment contributions
``g(z_j, theta)`` as a ``(J, M)`` array. Sample moments are their mean over
clusters and every covariance is of the form ``Omega / J``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy import stats


class GmmError(RuntimeError):
    """Estimation failure (singular matrices, non-finite moments, non-convergence)."""


class ConvergenceError(GmmError):
    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """A stacked set of moment functions.

    Parameters
    ----------
    param_blocks : sequence of (str, int)
        Named parameter blocks in the order they appear in ``theta``.
    moment_blocks : sequence of (str, int)
        Named moment blocks in the order they appear in the moment vector.
    contributions : callable
        ``contributions(theta) -> (J, M)`` array of per-cluster moments.
    jacobian : callable, optional
        ``jacobian(theta) -> (M, P)`` mean Jacobian. Central finite
        differences are used when omitted.
    theta0 : array_like, optional
        Starting values; zeros by default.
    solve_order : sequence of (str, str), optional
        ``(param_block, moment_block)`` pairs for block-triangular exactly
        identified systems, in solving order.
    cluster_labels : array_like, optional
        Labels used in error messages.
    """

    param_blocks: Sequence[tuple]
    moment_blocks: Sequence[tuple]
    contributions: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    theta0: np.ndarray | None = None
    solve_order: Sequence[tuple] | None = None
    cluster_labels: np.ndarray | None = None
    name: str = ""

    @property
    def n_params(self) -> int:
        return int(sum(d for _, d in self.param_blocks))

    @property
    def n_moments(self) -> int:
        return int(sum(d for _, d in self.moment_blocks))

    def param_slice(self, name: str) -> slice:
        return _block_slice(self.param_blocks, name)

    def moment_slice(self, name: str) -> slice:
        return _block_slice(self.moment_blocks, name)

    def start(self) -> np.ndarray:
        return np.zeros(self.n_params) if self.theta0 is None else np.asarray(self.theta0, dtype=float).copy()


def _block_slice(blocks, name):
    start = 0
    for n, d in blocks:
        if n == name:
            return slice(start, start + d)
        start += d
    raise KeyError(name)


@dataclass(frozen=True, eq=False)
class GmmFit:
    """Result of a GMM fit.

    ``cov`` is the estimated covariance of ``theta`` (already divided by the
    number of clusters). ``j_stat`` and ``dof`` are set for overidentified
    fits from :func:`optimal_gmm`.
    """

    theta: np.ndarray
    W: np.ndarray
    G: np.ndarray
    S: np.ndarray
    cov: np.ndarray
    gbar: np.ndarray
    contributions: np.ndarray = field(repr=False)
    system: MomentSystem = field(repr=False)
    j_stat: float | None = None
    dof: int = 0
    iterations: int = 0
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def theta_hat(self):
        return self.theta

    @property
    def omega_hat(self):
        return self.cov

    @property
    def n_clusters(self) -> int:
        return self.contributions.shape[0]

    def param(self, name: str) -> np.ndarray:
        return self.theta[self.system.param_slice(name)]

    def se(self, name: str) -> np.ndarray:
        s = self.system.param_slice(name)
        return np.sqrt(np.diag(self.cov)[s])


def _check_finite(system, g):
    bad = ~np.all(np.isfinite(g), axis=1)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        label = system.cluster_labels[j] if system.cluster_labels is not None else j
        raise GmmError(f"non-finite moment contribution for cluster {label!r}")


def numerical_jacobian(system: MomentSystem, theta) -> np.ndarray:
    """Central differences of the mean moments, step ``1e-6 * max(1, |theta_k|)``."""
    theta = np.asarray(theta, dtype=float)
    G = np.empty((system.n_moments, theta.size))
    for k in range(theta.size):
        h = 1e-6 * max(1.0, abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        G[:, k] = (system.contributions(tp).mean(axis=0) - system.contributions(tm).mean(axis=0)) / (2 * h)
    return G


def evaluate(system: MomentSystem, theta, numeric: bool = False):
    """Sample moments at ``theta``.

    Returns
    -------
    gbar : ndarray, shape (M,)
    S : ndarray, shape (M, M)
        Uncentered mean outer product of the cluster contributions.
    G : ndarray, shape (M, P)
        Mean Jacobian, analytic when the system provides one unless
        ``numeric`` is set.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (system.n_params,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({system.n_params},)")
    g = system.contributions(theta)
    _check_finite(system, g)
    J = g.shape[0]
    gbar = g.mean(axis=0)
    S = g.T @ g / J
    if system.jacobian is not None and not numeric:
        G = np.asarray(system.jacobian(theta), dtype=float)
    else:
        G = numerical_jacobian(system, theta)
    return gbar, S, G


def _solve(a, b, what):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(a, check_finite=True)
    except ValueError as exc:
        raise GmmError(f"{what}: {exc}") from None
    if np.any(np.abs(np.diag(lu[0])) <= 1e-14 * max(np.abs(np.diag(lu[0])).max(), 1e-300)):
        raise GmmError(f"{what} is singular")
    return scipy.linalg.lu_solve(lu, b)


def _pinv_psd_check(a, what):
    w = np.linalg.eigvalsh((a + a.T) / 2)
    if w[0] <= 1e-12 * max(abs(w[-1]), 1e-300):
        raise GmmError(f"{what} is rank deficient")


def solve_exactly_identified(system: MomentSystem, tol: float = 1e-8) -> GmmFit:
    """Block-by-block solution of an exactly identified, block-triangular system.

    Each block's moments are linear in that block's parameters given the
    blocks solved before it, so one Newton step per block is exact; a second
    sweep removes rounding error. The result is checked to satisfy
    ``gbar = 0`` up to ``tol`` relative to the moment scale.
    """
    if system.n_moments != system.n_params:
        raise GmmError(f"system has {system.n_moments} moments for {system.n_params} parameters")
    order = system.solve_order or [(p, m) for (p, _), (m, _) in zip(system.param_blocks, system.moment_blocks)]
    theta = system.start()
    for _sweep in range(2):
        for pname, mname in order:
            ps, ms = system.param_slice(pname), system.moment_slice(mname)
            gbar, _, G = evaluate(system, theta)
            step = _solve(G[ms, ps], gbar[ms], f"Jacobian block ({mname}, {pname})")
            theta[ps] -= step
    fit = _finish(system, theta, np.eye(system.n_moments))
    scale = np.abs(fit.contributions).mean(axis=0)
    if np.any(np.abs(fit.gbar) > tol * np.maximum(scale, 1.0)):
        raise GmmError(f"exactly identified solve left moments at {np.abs(fit.gbar).max():.3g}")
    return fit


def _objective(system, theta, W):
    g = system.contributions(theta)
    _check_finite(system, g)
    gbar = g.mean(axis=0)
    return float(gbar @ W @ gbar)


def gmm_minimize(system: MomentSystem, W=None, theta0=None, tol: float = 1e-10,
                 max_iter: int = 200) -> GmmFit:
    """Minimize ``gbar(theta)' W gbar(theta)`` by damped Gauss-Newton.

    The systems here are linear or bilinear in the parameters, so
    Gauss-Newton converges in a handful of steps. Iteration stops when the
    step is below ``tol`` relative to ``max(1, |theta|)``.

    Raises
    ------
    ConvergenceError
        After ``max_iter`` iterations; ``trajectory`` holds the iterates.
    """
    M = system.n_moments
    W = np.eye(M) if W is None else np.asarray(W, dtype=float)
    if W.shape != (M, M):
        raise ValueError(f"W has shape {W.shape}, expected ({M}, {M})")
    if not np.allclose(W, W.T, rtol=1e-10, atol=1e-12 * np.abs(W).max()):
        raise ValueError("W must be symmetric")
    theta = system.start() if theta0 is None else np.asarray(theta0, dtype=float).copy()
    trajectory = [theta.copy()]
    obj = _objective(system, theta, W)
    for it in range(1, max_iter + 1):
        gbar, _, G = evaluate(system, theta)
        A = G.T @ W @ G
        step = -_solve(A, G.T @ W @ gbar, "G'WG")
        size = np.max(np.abs(step) / np.maximum(1.0, np.abs(theta)))
        lam = 1.0
        while True:
            cand = theta + lam * step
            new = _objective(system, cand, W)
            if new <= obj * (1 + 1e-12) or lam < 1e-8:
                break
            lam /= 2
        theta = cand
        obj = new
        trajectory.append(theta.copy())
        if size * lam < tol or (lam < 1e-8 and size < 1e-6):
            return _finish(system, theta, W, iterations=it)
    raise ConvergenceError(f"Gauss-Newton did not converge in {max_iter} iterations", np.array(trajectory))


def _finish(system, theta, W, iterations=0, cov_kind="sandwich") -> GmmFit:
    g = system.contributions(theta)
    _check_finite(system, g)
    J = g.shape[0]
    gbar = g.mean(axis=0)
    S = g.T @ g / J
    _, _, G = evaluate(system, theta)
    fit = GmmFit(theta=theta, W=W, G=G, S=S, cov=np.full((theta.size, theta.size), np.nan), gbar=gbar,
                 contributions=g, system=system, iterations=iterations)
    object.__setattr__(fit, "cov", sandwich_covariance(fit))
    return fit


def sandwich_covariance(fit: GmmFit) -> np.ndarray:
    """``(G'WG)^-1 G'WSWG (G'WG)^-1 / J``, or ``G^-1 S G^-1' / J`` when ``M = P``."""
    G, W, S = fit.G, fit.W, fit.S
    J = fit.contributions.shape[0]
    M, P = G.shape
    if M == P:
        Ginv_S = _solve(G, S, "G")
        V = _solve(G, Ginv_S.T, "G").T
    else:
        A = G.T @ W @ G
        _pinv_psd_check(A, "G'WG")
        B = G.T @ W @ S @ W @ G
        Ainv_B = _solve(A, B, "G'WG")
        V = _solve(A, Ainv_B.T, "G'WG").T
    V = V / J
    return (V + V.T) / 2


def optimal_gmm(system: MomentSystem, center_s: bool = False, ridge: float = 0.0,
                theta0=None, first_step: str = "scaled") -> GmmFit:
    """Two-step efficient GMM.

    Parameters
    ----------
    system : MomentSystem
    center_s : bool
        Subtract ``gbar gbar'`` from the moment covariance.
    ridge : float
        Adds ``ridge * mean(diag S)`` to the diagonal of ``S`` before inversion.
    theta0 : array_like, optional
        Starting values for the first step.
    first_step : {"scaled", "identity"}
        ``"identity"`` uses ``W = I`` in the first step. ``"scaled"`` uses
        ``W = I`` on moments standardized by their root mean square at the
        starting values, i.e. ``W = diag(1 / mean(g_j^2))``. Moment blocks on
        very different scales make the identity first step imprecise, which
        degrades ``S`` and the J statistic.

    Returns
    -------
    GmmFit
        ``cov`` is ``(G'W*G)^-1 / J`` with ``W* = S^-1`` evaluated at the
        first-step estimate; ``j_stat`` is ``J * gbar' W* gbar``.
    """
    M, P = system.n_moments, system.n_params
    if M == P:
        return solve_exactly_identified(system)
    start = system.start() if theta0 is None else np.asarray(theta0, dtype=float)
    if first_step == "identity":
        W1 = np.eye(M)
    elif first_step == "scaled":
        g0 = system.contributions(start)
        _check_finite(system, g0)
        scale = np.mean(g0 ** 2, axis=0)
        scale[~(scale > 0)] = 1.0
        W1 = np.diag(1.0 / scale)
    else:
        raise ValueError(f"unknown first_step {first_step!r}")
    first = gmm_minimize(system, W1, theta0=start)
    S = first.S.copy()
    if center_s:
        S -= np.outer(first.gbar, first.gbar)
    if ridge:
        S += ridge * np.mean(np.diag(S)) * np.eye(M)
    w = np.linalg.eigvalsh(S)
    if w[0] <= 1e-13 * w[-1]:
        raise GmmError("moment covariance S is singular; pass a ridge tolerance to regularize it")
    Wstar = np.linalg.inv(S)
    Wstar = (Wstar + Wstar.T) / 2
    second = gmm_minimize(system, Wstar, theta0=first.theta)
    J = second.contributions.shape[0]
    A = second.G.T @ Wstar @ second.G
    _pinv_psd_check(A, "G'W*G")
    cov = np.linalg.inv(A) / J
    cov = (cov + cov.T) / 2
    jstat = float(J * second.gbar @ Wstar @ second.gbar)
    return GmmFit(theta=second.theta, W=Wstar, G=second.G, S=second.S, cov=cov, gbar=second.gbar,
                  contributions=second.contributions, system=system, j_stat=jstat, dof=M - P,
                  iterations=first.iterations + second.iterations)


def j_test(fit: GmmFit):
    """Hansen's overidentification test: ``(statistic, dof, p_value)``."""
    if fit.dof <= 0 or fit.j_stat is None:
        raise GmmError("system is exactly identified (0 degrees of freedom); no J-test")
    return fit.j_stat, fit.dof, float(stats.chi2.sf(fit.j_stat, fit.dof))
