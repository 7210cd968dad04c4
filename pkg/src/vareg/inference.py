"""Moment systems for the long-run effect of VA, corrected variances and related tests.

Score- and outcome-side fixed-effects moments are formed from student-level
within-teacher cross products, one set per teacher. Everything else works on
teacher-year cells laid out on the padded ``(J, T)`` grid of
:class:`~vareg.panel.ClassPanel`, where padding contributes zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .gmm import GmmError, GmmFit, MomentSystem, gmm_minimize, solve_exactly_identified
from .panel import ClassPanel, PanelData, PanelError, TeacherYearVars, class_aggregate
from .pipeline import KappaFit, VaEstimates, estimate_va, residualize_scores
from .regression import demean_by_group, spd_inverse, tsls


def _cross_by_teacher(a, b, groups, J):
    """Per-teacher sums of ``a_i b_i'``: ``(J, Ka, Kb)``."""
    out = np.zeros((J, a.shape[1], b.shape[1]))
    for k in range(a.shape[1]):
        for l in range(b.shape[1]):
            out[:, k, l] = np.bincount(groups, weights=a[:, k] * b[:, l], minlength=J)
    return out


@dataclass(frozen=True, eq=False)
class LongRunData:
    """Arrays shared by the long-run moment systems.

    Teacher-level: within-teacher student cross products ``sxx`` (K, K) and
    ``sxr`` (K,) for scores and ``sxx_y``, ``sxy`` for the students with an
    outcome. Grid-level (``(J, T)`` leading axes): centered class means of
    raw scores ``r``, covariates ``x``, outcomes ``y`` and the covariates of
    outcome students ``xo``; the other-year design of scores ``zr`` (J, T, p)
    and of covariates ``zx`` (J, T, p, K).
    """

    sxx: np.ndarray
    sxr: np.ndarray
    sxx_y: np.ndarray
    sxy: np.ndarray
    r: np.ndarray
    x: np.ndarray
    y: np.ndarray
    xo: np.ndarray
    zr: np.ndarray
    zx: np.ndarray
    cell_mask: np.ndarray
    y_mask: np.ndarray
    labels: np.ndarray
    phi_mode: str
    residualize_outcome: bool
    center: str
    class_panel: ClassPanel = field(repr=False)
    teacher_labels: np.ndarray = field(repr=False)

    @property
    def J(self) -> int:
        return self.r.shape[0]

    @property
    def K(self) -> int:
        return self.x.shape[2]

    @property
    def Ky(self) -> int:
        return self.K if self.residualize_outcome else 0

    @property
    def p(self) -> int:
        return self.zr.shape[2]

    def score_resid(self, beta):
        return self.r - self.x @ beta

    def outcome_resid(self, beta_y):
        if not self.residualize_outcome:
            return self.y
        return self.y - self.xo @ beta_y

    def design(self, beta):
        return self.zr - self.zx @ beta

    def m1(self, beta):
        return self.sxr - self.sxx @ beta

    def m3(self, beta_y):
        return self.sxy - self.sxx_y @ beta_y


def longrun_data(panel: PanelData, phi_mode: str = "stationary", residualize_outcome: bool = True,
                 center: str = "grand") -> LongRunData:
    """Build (and cache on ``panel``) the arrays used by the long-run systems."""
    cache = panel.__dict__.setdefault("_longrun_cache", {})
    key = (phi_mode, bool(residualize_outcome), center)
    if key in cache:
        return cache[key]
    J, K = panel.n_teachers, panel.K
    t = panel.teacher
    xd = demean_by_group(panel.X, t) if K else np.zeros((panel.n_students, 0))
    sxx = _cross_by_teacher(xd, xd, t, J)
    sxr = _cross_by_teacher(xd, demean_by_group(panel.score, t)[:, None], t, J)[..., 0]
    obs = panel.has_outcome
    if residualize_outcome and K:
        to = t[obs]
        xdo = demean_by_group(panel.X[obs], to)
        sxx_y = _cross_by_teacher(xdo, xdo, to, J)
        sxy = _cross_by_teacher(xdo, demean_by_group(panel.outcome[obs], to)[:, None], to, J)[..., 0]
    else:
        Ky = K if residualize_outcome else 0
        sxx_y, sxy = np.zeros((J, Ky, Ky)), np.zeros((J, Ky))
    cp = class_aggregate(panel, panel.score, panel.outcome).centered(center)
    yvals = np.where(cp.has_outcome, cp.outcome_resid, 0.0)
    r = cp.to_grid(cp.prelim_va)
    x = cp.to_grid(cp.covariate_means)
    zr = cp.leaveout_design(r, phi_mode)
    zx = cp.leaveout_design(x, phi_mode) if K else np.zeros(zr.shape + (0,))
    data = LongRunData(
        sxx=sxx, sxr=sxr, sxx_y=sxx_y, sxy=sxy, r=r, x=x, y=cp.to_grid(yvals),
        xo=cp.to_grid(cp.outcome_covariate_means), zr=zr, zx=zx, cell_mask=cp.mask,
        y_mask=cp.to_grid(cp.has_outcome.astype(float)) > 0, labels=cp.design_labels(phi_mode),
        phi_mode=phi_mode, residualize_outcome=bool(residualize_outcome), center=center,
        class_panel=cp, teacher_labels=panel.teacher_labels,
    )
    cache[key] = data
    return data


def _split(theta, dims):
    out, s = [], 0
    for d in dims:
        out.append(theta[s:s + d])
        s += d
    return out


def build_longrun_system(panel: PanelData, phi_mode: str = "stationary", residualize_outcome: bool = True,
                         center: str = "grand") -> MomentSystem:
    """Exactly identified system in ``(beta, beta_y, phi, kappa)``.

    Moments per teacher: score and outcome fixed-effects normal equations,
    the BLP normal equations and the shrunk-VA moment for ``kappa``. The
    ``beta_y`` block is absent when the outcome is not residualized and both
    covariate blocks vanish when ``K = 0``.
    """
    d = longrun_data(panel, phi_mode, residualize_outcome, center)
    K, Ky, p = d.K, d.Ky, d.p
    dims = (K, Ky, p, 1)
    my = d.y_mask.astype(float)

    def parts(theta):
        beta, beta_y, phi, kappa = _split(theta, dims)
        Z = d.design(beta)
        R = d.score_resid(beta)
        Y = d.outcome_resid(beta_y)
        mu = Z @ phi
        return beta, beta_y, phi, kappa[0], Z, R, Y, mu

    def contributions(theta):
        beta, beta_y, phi, kappa, Z, R, Y, mu = parts(theta)
        m2 = np.einsum("jtp,jt->jp", Z, R - mu)
        g = np.sum(my * mu * (Y - kappa * mu), axis=1)
        return np.hstack([d.m1(beta), d.m3(beta_y), m2, g[:, None]])

    def jacobian(theta):
        beta, beta_y, phi, kappa, Z, R, Y, mu = parts(theta)
        J = d.J
        e = R - mu
        A = np.einsum("jtpk,p->jtk", d.zx, phi)  # d mu / d beta = -A
        P = K + Ky + p + 1
        G = np.zeros((K + Ky + p + 1, P))
        G[:K, :K] = -d.sxx.mean(axis=0)
        G[K:K + Ky, K:K + Ky] = -d.sxx_y.mean(axis=0)
        r2 = slice(K + Ky, K + Ky + p)
        dm2_db = (-np.einsum("jtpk,jt->pk", d.zx, e) + np.einsum("jtp,jtk->pk", Z, A - d.x)) / J
        G[r2, :K] = dm2_db
        G[r2, r2] = -np.einsum("jtp,jtq->pq", Z, Z) / J
        w = my * (Y - 2 * kappa * mu)
        G[-1, :K] = -np.einsum("jtk,jt->k", A, w) / J
        if Ky:
            G[-1, K:K + Ky] = -np.einsum("jt,jtk->k", my * mu, d.xo) / J
        G[-1, r2] = np.einsum("jtp,jt->p", Z, w) / J
        G[-1, -1] = -np.sum(my * mu * mu) / J
        return G

    params = [("beta", K), ("beta_y", Ky), ("phi", p), ("kappa", 1)]
    moments = [("m1", K), ("m3", Ky), ("m2", p), ("g", 1)]
    order = [("beta", "m1"), ("beta_y", "m3"), ("phi", "m2"), ("kappa", "g")]
    keep = [i for i, (_, dim) in enumerate(params) if dim > 0]
    return MomentSystem(
        param_blocks=[params[i] for i in keep], moment_blocks=[moments[i] for i in keep],
        contributions=contributions, jacobian=jacobian,
        solve_order=[order[i] for i in keep], cluster_labels=d.teacher_labels, name="longrun",
    )


def build_overid_system(panel: PanelData, phi_mode: str = "stationary", residualize_outcome: bool = True,
                        center: str = "grand", use_covariates: bool = True) -> MomentSystem:
    """Overidentified system in ``(beta, beta_y, kappa)``.

    The ``kappa`` moments are ``sum_t z_t (Y_t - kappa R_t)`` where ``z_t`` is
    the other-year design used for the BLP (the leave-out row in
    unrestricted mode, gap sums in stationary mode). With
    ``use_covariates=False`` the covariate blocks are dropped and
    ``beta = 0``.
    """
    d = longrun_data(panel, phi_mode, residualize_outcome, center)
    K = d.K if use_covariates else 0
    Ky = d.Ky if use_covariates else 0
    p = d.p
    dims = (K, Ky, 1)
    my = d.y_mask.astype(float)
    zx = d.zx if K else np.zeros(d.zr.shape + (0,))
    x = d.x if K else np.zeros(d.r.shape + (0,))
    xo = d.xo if Ky else np.zeros(d.r.shape + (0,))

    def parts(theta):
        beta, beta_y, kappa = _split(theta, dims)
        Z = d.zr - zx @ beta
        R = d.r - x @ beta
        Y = d.y - xo @ beta_y if Ky else d.y
        return beta, beta_y, kappa[0], Z, R, Y

    def contributions(theta):
        beta, beta_y, kappa, Z, R, Y = parts(theta)
        g1 = np.einsum("jtp,jt->jp", Z, my * (Y - kappa * R))
        cols = [d.m1(beta)] if K else []
        if Ky:
            cols.append(d.m3(beta_y))
        return np.hstack(cols + [g1])

    def jacobian(theta):
        beta, beta_y, kappa, Z, R, Y = parts(theta)
        J = d.J
        G = np.zeros((K + Ky + p, K + Ky + 1))
        if K:
            G[:K, :K] = -d.sxx.mean(axis=0)
        if Ky:
            G[K:K + Ky, K:K + Ky] = -d.sxx_y.mean(axis=0)
        rows = slice(K + Ky, K + Ky + p)
        u = my * (Y - kappa * R)
        if K:
            G[rows, :K] = (-np.einsum("jtpk,jt->pk", zx, u) + kappa * np.einsum("jtp,jtk->pk", Z, my[..., None] * x)) / J
        if Ky:
            G[rows, K:K + Ky] = -np.einsum("jtp,jtk->pk", Z, my[..., None] * xo) / J
        G[rows, -1] = -np.einsum("jtp,jt->p", Z, my * R) / J
        return G

    params = [("beta", K), ("beta_y", Ky), ("kappa", 1)]
    moments = [("m1", K), ("m3", Ky), ("g1", p)]
    keep = [i for i, (_, dim) in enumerate(params) if dim > 0]
    return MomentSystem(
        param_blocks=[params[i] for i in keep], moment_blocks=[moments[i] for i in keep],
        contributions=contributions, jacobian=jacobian, cluster_labels=d.teacher_labels, name="overid",
    )


def w1_weight(system: MomentSystem, phi) -> np.ndarray:
    """``diag(I, I, phi phi')`` for an overidentified system."""
    M = system.n_moments
    W = np.eye(M)
    s = system.moment_slice("g1")
    phi = np.asarray(phi, dtype=float)
    W[s, s] = np.outer(phi, phi)
    return W


# ---------------------------------------------------------------- corrected variance


@dataclass(frozen=True, eq=False)
class GradientBlocks:
    """Mean Jacobian blocks of the long-run system at the estimates.

    ``G_*`` are derivatives of the ``kappa`` moment; ``M1``, ``M3`` of the
    fixed-effects normal equations; ``M2phi``, ``M2beta`` of the BLP normal
    equations.
    """

    G_kappa: float
    G_beta: np.ndarray
    G_phi: np.ndarray
    G_betaY: np.ndarray
    M1: np.ndarray
    M2phi: np.ndarray
    M2beta: np.ndarray
    M3: np.ndarray


@dataclass(frozen=True, eq=False)
class CorrectedKappa:
    """Corrected inference for the multi-step ``kappa``.

    ``sigma2_hat`` and ``naive_s2`` are asymptotic variances (of
    ``sqrt(J) (kappa_hat - kappa)``); ``influence`` is the per-teacher term
    whose mean square is ``sigma2_hat``. ``g`` and ``correction`` split the
    bracketed term into the ``kappa`` moment and the first-step corrections.
    """

    kappa_hat: float
    sigma2_hat: float
    naive_s2: float
    influence: np.ndarray
    g: np.ndarray = field(repr=False)
    correction: np.ndarray = field(repr=False)
    blocks: GradientBlocks = field(repr=False)

    @property
    def n_teachers(self) -> int:
        return self.influence.shape[0]

    @property
    def se(self) -> float:
        return float(np.sqrt(self.sigma2_hat / self.n_teachers))

    @property
    def naive_se(self) -> float:
        return float(np.sqrt(self.naive_s2 / self.n_teachers))


def gradient_blocks(d: LongRunData, beta, beta_y, phi, kappa) -> GradientBlocks:
    """Jacobian blocks written with the ``A``, leave-out-covariate constructions.

    ``A_t = sum_g phi_g zx_{t,g}`` are the shrinkage-weighted other-year
    covariate means; ``calX = sum_t zx_t R_t`` and ``calX_tilde = sum_t zx_t
    mu_t`` pair other-year covariates with own-year preliminary VA and
    shrunk VA.
    """
    J = d.J
    my = d.y_mask.astype(float)
    Rm = d.design(beta)  # other-year design at beta
    R = d.score_resid(beta)
    Y = d.outcome_resid(beta_y)
    mu = Rm @ phi
    A = np.einsum("jtpk,p->jtk", d.zx, phi)
    RtR = np.einsum("jtp,jtq->pq", Rm, Rm) / J
    RtR_y = np.einsum("jtp,jtq->pq", Rm * my[..., None], Rm) / J
    G_kappa = -float(phi @ RtR_y @ phi)
    G_betaY = -np.einsum("jt,jtk->k", my * mu, d.xo) / J if d.Ky else np.zeros(0)
    G_phi = np.einsum("jt,jtp->p", my * Y, Rm) / J - 2 * kappa * RtR_y @ phi
    G_beta = -(np.einsum("jt,jtk->k", my * Y, A) - 2 * kappa * np.einsum("jt,jtk->k", my * mu, A)) / J
    calX = np.einsum("jtpk,jt->pk", d.zx, R)
    calX_t = np.einsum("jtpk,jt->pk", d.zx, mu)
    M2beta = -(np.einsum("jtp,jtk->pk", Rm, d.x) + calX - calX_t - np.einsum("jtp,jtk->pk", Rm, A)) / J
    return GradientBlocks(
        G_kappa=G_kappa, G_beta=G_beta, G_phi=G_phi, G_betaY=G_betaY,
        M1=-d.sxx.mean(axis=0), M2phi=-RtR, M2beta=M2beta, M3=-d.sxx_y.mean(axis=0),
    )


def corrected_sigma2(panel: PanelData, estimates: VaEstimates, kappa: KappaFit | float) -> CorrectedKappa:
    """Variance of the multi-step ``kappa`` that accounts for the estimated first steps.

    Parameters
    ----------
    panel : PanelData
    estimates : VaEstimates
        Output of :func:`~vareg.pipeline.estimate_va` on ``panel``.
    kappa : KappaFit or float
        The multi-step estimate.

    Returns
    -------
    CorrectedKappa
    """
    k = float(kappa.kappa_hat if isinstance(kappa, KappaFit) else kappa)
    resid_y = estimates.beta_y_hat is not None
    d = longrun_data(panel, estimates.phi.mode, resid_y, estimates.center)
    beta = np.asarray(estimates.beta_hat, dtype=float)
    beta_y = np.asarray(estimates.beta_y_hat, dtype=float) if resid_y else np.zeros(0)
    phi = estimates.phi.aligned(d.labels)
    b = gradient_blocks(d, beta, beta_y, phi, k)
    my = d.y_mask.astype(float)
    Rm = d.design(beta)
    R = d.score_resid(beta)
    Y = d.outcome_resid(beta_y)
    mu = Rm @ phi
    g = np.sum(my * mu * (Y - k * mu), axis=1)
    m2 = np.einsum("jtp,jt->jp", Rm, R - mu)
    try:
        M2inv_m2 = np.linalg.solve(b.M2phi, m2.T).T
    except np.linalg.LinAlgError:
        raise GmmError("M2phi is singular") from None
    psi2 = -M2inv_m2
    corr = psi2 @ b.G_phi
    if d.K:
        M1inv = -spd_inverse(-b.M1, what="M1")
        psi1 = -(M1inv @ d.m1(beta).T).T
        corr = corr + psi1 @ b.G_beta - psi1 @ (b.G_phi @ np.linalg.solve(b.M2phi, b.M2beta))
    if d.Ky:
        M3inv = -spd_inverse(-b.M3, what="M3")
        psi3 = -(M3inv @ d.m3(beta_y).T).T
        corr = corr + psi3 @ b.G_betaY
    if b.G_kappa >= 0:
        raise GmmError("G_kappa is not negative; shrunk VA has no variance")
    infl = (g + corr) / b.G_kappa
    sigma2 = float(np.mean(infl ** 2))
    naive = float(np.mean(g ** 2) / b.G_kappa ** 2)
    return CorrectedKappa(k, sigma2, naive, infl, g, corr, b)


@dataclass(frozen=True)
class VarianceGap:
    """``sigma2_hat - naive_s2 = cross + variance`` with ``cross = 2 mean(g c) / G_kappa^2``."""

    sigma2_hat: float
    naive_s2: float
    gap: float
    cross: float
    variance: float


def variance_gap_diagnostic(panel: PanelData | None, fit: CorrectedKappa) -> VarianceGap:
    """Split the corrected-minus-naive variance into a covariance and a variance part."""
    gk2 = fit.blocks.G_kappa ** 2
    cross = float(2 * np.mean(fit.g * fit.correction) / gk2)
    var = float(np.mean(fit.correction ** 2) / gk2)
    return VarianceGap(fit.sigma2_hat, fit.naive_s2, fit.sigma2_hat - fit.naive_s2, cross, var)


def fit_longrun_gmm(panel: PanelData, phi_mode: str = "stationary", residualize_outcome: bool = True,
                    center: str = "grand") -> GmmFit:
    """Exactly identified GMM on the long-run system."""
    return solve_exactly_identified(build_longrun_system(panel, phi_mode, residualize_outcome, center))


# ---------------------------------------------------------------- random assignment


def _require_random_assignment(flag):
    if not flag:
        raise ValueError("this estimator is valid only under random assignment; pass random_assignment=True")


def fit_2sls_random_assignment(panel: PanelData, random_assignment: bool = False,
                               phi_mode: str = "stationary") -> KappaFit:
    """2SLS of class outcomes on own-year preliminary VA, instrumented by other years.

    Scores and outcomes are year-demeaned cell means; covariates are not
    used. The reported SE is the teacher-clustered 2SLS SE, valid only
    under random assignment.
    """
    _require_random_assignment(random_assignment)
    cp = class_aggregate(panel, panel.score, panel.outcome).centered("year")
    Z = cp.from_grid(cp.leaveout_design(cp.to_grid(cp.prelim_va), phi_mode))
    keep = cp.has_outcome
    fit = tsls(cp.outcome_resid[keep], cp.prelim_va[keep], Z[keep], cluster=cp.teacher[keep])
    se = float(np.sqrt(fit.cov_2sls[0, 0]))
    return KappaFit(float(fit.coef[0]), se, se, int(keep.sum()), int(np.unique(cp.teacher[keep]).size), "2sls")


def _within_cells(cp: ClassPanel, values):
    v = np.asarray(values, dtype=float)
    m = np.zeros((cp.n_teachers,) + v.shape[1:])
    np.add.at(m, cp.teacher, v)
    return v - (m / cp.years_per_teacher.reshape((-1,) + (1,) * (v.ndim - 1)))[cp.teacher]


def fit_3sls(panel: PanelData, random_assignment: bool = False, uu_cov=None,
             phi_mode: str = "stationary", center: str = "year") -> GmmFit:
    """Three-stage least squares for ``(beta, beta_y, kappa)`` on teacher-year cells.

    Stage 1 estimates ``beta`` and ``beta_y`` by within-teacher OLS on cell
    means, stage 2 runs the 2SLS of outcomes on preliminary VA with
    other-year instruments, stage 3 estimates the 3x3 covariance of
    ``u_t = (score FE residual, outcome FE residual, Y_t - kappa R_t)``, and
    stage 4 solves the GLS moment conditions
    ``sum_t H_t' Sigma^-1 u_t(theta) = 0`` with
    ``H_t = blockdiag(Xdd_t, Xdd_t, Z_t phi_hat)``. ``uu_cov`` overrides the
    stage-3 covariance. Without covariates only the third equation remains
    and the estimate equals the 2SLS one.
    """
    _require_random_assignment(random_assignment)
    cp = class_aggregate(panel, panel.score, panel.outcome).centered(center)
    if not np.all(cp.has_outcome):
        raise PanelError("3SLS needs an outcome in every teacher-year")
    K = panel.K
    R0, X, Y0 = cp.prelim_va, cp.covariate_means, cp.outcome_resid
    Rdd, Xdd, Ydd = _within_cells(cp, R0), _within_cells(cp, X), _within_cells(cp, Y0)
    if K:
        xtx_inv = spd_inverse(Xdd.T @ Xdd, panel.covariate_names, what="within design")
        beta1, beta_y1 = xtx_inv @ Xdd.T @ Rdd, xtx_inv @ Xdd.T @ Ydd
    else:
        beta1 = beta_y1 = np.zeros(0)
    R1 = R0 - X @ beta1
    Y1 = Y0 - X @ beta_y1
    Z = cp.from_grid(cp.leaveout_design(cp.to_grid(R1), phi_mode))
    first = tsls(Y1, R1, Z)
    kappa1 = float(first.coef[0])
    phi_hat = first.first_stage_coef[:, 0]
    inst = Z @ phi_hat
    # without covariates only the outcome equation has parameters
    eqs = [0, 1, 2] if K else [2]
    if uu_cov is None:
        U = np.column_stack([Rdd - Xdd @ beta1, Ydd - Xdd @ beta_y1, Y1 - kappa1 * R1])
        Sigma = U.T @ U / U.shape[0]
    else:
        Sigma = np.asarray(uu_cov, dtype=float)
    Sigma = Sigma[np.ix_(eqs, eqs)]
    w = np.linalg.eigvalsh(Sigma)
    if w[0] <= 1e-12 * w[-1]:
        raise GmmError("estimated E[uu'] is singular")
    Si = np.linalg.inv(Sigma)
    J = cp.n_teachers
    teacher = cp.teacher

    def by_teacher(v):
        out = np.zeros((J,) + v.shape[1:])
        np.add.at(out, teacher, v)
        return out

    def residuals(theta):
        beta, beta_y, kappa = theta[:K], theta[K:2 * K], theta[-1]
        u1 = Rdd - Xdd @ beta
        u2 = Ydd - Xdd @ beta_y
        u3 = (Y0 - X @ beta_y) - kappa * (R0 - X @ beta)
        return np.column_stack([u1, u2, u3])[:, eqs]

    def contributions(theta):
        v = residuals(theta) @ Si  # Sigma^-1 u_t
        cols = [Xdd * v[:, [0]], Xdd * v[:, [1]]] if K else []
        return by_teacher(np.hstack(cols + [inst[:, None] * v[:, [-1]]]))

    def jacobian(theta):
        beta, kappa = theta[:K], theta[-1]
        C = R0.shape[0]
        # du/dtheta per cell: (C, 3, P)
        du = np.zeros((C, 3, 2 * K + 1))
        du[:, 0, :K] = -Xdd
        du[:, 1, K:2 * K] = -Xdd
        du[:, 2, :K] = kappa * X
        du[:, 2, K:2 * K] = -X
        du[:, 2, -1] = -(R0 - X @ beta)
        dv = np.einsum("ab,cbp->cap", Si, du[:, eqs])
        blocks = [Xdd[:, :, None] * dv[:, None, 0, :], Xdd[:, :, None] * dv[:, None, 1, :]] if K else []
        rows = np.concatenate(blocks + [inst[:, None, None] * dv[:, None, -1, :]], axis=1)
        return rows.sum(axis=0) / J

    P = 2 * K + 1
    params = [("beta", K), ("beta_y", K), ("kappa", 1)]
    moments = [("h1", K), ("h2", K), ("h3", 1)]
    keep = [i for i, (_, dd) in enumerate(params) if dd > 0]
    system = MomentSystem(
        param_blocks=[params[i] for i in keep], moment_blocks=[moments[i] for i in keep],
        contributions=contributions, jacobian=jacobian, theta0=np.concatenate([beta1, beta_y1, [kappa1]]),
        cluster_labels=panel.teacher_labels, name="3sls",
    )
    assert system.n_params == P
    fit = gmm_minimize(system, np.eye(P), theta0=system.theta0)
    fit.extras.update(uu_cov=Sigma, kappa_2sls=kappa1, phi_hat=phi_hat)
    return fit


# ---------------------------------------------------------------- VA as outcome


@dataclass(frozen=True, eq=False)
class VaOutcomeFit:
    """Regression of VA on teacher-year variables.

    ``v1_hat`` and ``naive_cov`` are covariance matrices of ``alpha_hat``
    (asymptotic variance divided by the number of teachers); ``v1_hat``
    accounts for the estimated ``beta``.
    """

    alpha_hat: np.ndarray
    v1_hat: np.ndarray
    naive_cov: np.ndarray
    dx_cross: np.ndarray
    dx_test: tuple
    names: tuple
    gamma: np.ndarray = field(repr=False)

    @property
    def corrected_se(self):
        return np.sqrt(np.diag(self.v1_hat))

    @property
    def naive_se(self):
        return np.sqrt(np.diag(self.naive_cov))


def _leaveout_mean(cp: ClassPanel, values):
    v = np.asarray(values, dtype=float)
    tot = np.zeros((cp.n_teachers,) + v.shape[1:])
    np.add.at(tot, cp.teacher, v)
    n = cp.years_per_teacher.reshape((-1,) + (1,) * (v.ndim - 1)).astype(float)
    return (tot[cp.teacher] - v) / (n[cp.teacher] - 1)


def _va_outcome_arrays(panel, dvars, leaveout, add_intercept, center):
    D = dvars.align(panel) if isinstance(dvars, TeacherYearVars) else np.asarray(dvars, dtype=float)
    if D.ndim == 1:
        D = D[:, None]
    if D.shape[0] != panel.n_cells:
        raise PanelError(f"expected {panel.n_cells} rows of teacher-year variables, got {D.shape[0]}")
    names = tuple(dvars.names) if isinstance(dvars, TeacherYearVars) and dvars.names else tuple(
        f"d{k + 1}" for k in range(D.shape[1]))
    Duser = D
    if add_intercept:
        D = np.hstack([np.ones((D.shape[0], 1)), D])
        names = ("const",) + names
    cp = class_aggregate(panel, panel.score, None).centered(center)
    R0, X = cp.prelim_va, cp.covariate_means
    if leaveout:
        R0, X = _leaveout_mean(cp, R0), _leaveout_mean(cp, X)
    return D, Duser, names, cp, R0, X


def build_va_outcome_system(panel: PanelData, dvars, leaveout: bool = False, add_intercept: bool = True,
                            center: str = "grand") -> MomentSystem:
    """Exactly identified system in ``(beta, alpha)``."""
    D, _, names, cp, R0, X = _va_outcome_arrays(panel, dvars, leaveout, add_intercept, center)
    d = longrun_data(panel, "stationary", False, center)
    K, KD = panel.K, D.shape[1]
    J = cp.n_teachers
    teacher = cp.teacher

    def contributions(theta):
        beta, alpha = theta[:K], theta[K:]
        e = R0 - X @ beta - D @ alpha
        ma = np.zeros((J, KD))
        np.add.at(ma, teacher, D * e[:, None])
        return np.hstack([d.m1(beta), ma])

    def jacobian(theta):
        G = np.zeros((K + KD, K + KD))
        G[:K, :K] = -d.sxx.mean(axis=0)
        G[K:, :K] = -D.T @ X / J
        G[K:, K:] = -D.T @ D / J
        return G

    params = [("beta", K), ("alpha", KD)]
    moments = [("m1", K), ("malpha", KD)]
    keep = [i for i, (_, dd) in enumerate(params) if dd > 0]
    return MomentSystem(
        param_blocks=[params[i] for i in keep], moment_blocks=[moments[i] for i in keep],
        contributions=contributions, jacobian=jacobian,
        solve_order=[[("beta", "m1"), ("alpha", "malpha")][i] for i in keep],
        cluster_labels=panel.teacher_labels, name="va_outcome",
    )


def va_outcome_fit(panel: PanelData, dvars, leaveout: bool = False, add_intercept: bool = True,
                   center: str = "grand") -> VaOutcomeFit:
    """OLS of preliminary VA (or its leave-year-out mean) on teacher-year variables.

    Parameters
    ----------
    panel : PanelData
    dvars : TeacherYearVars or array_like, shape (n_cells, K_D)
        Rows in the cell order of ``panel`` when given as an array.
    leaveout : bool
        Use the mean of the other years' preliminary VA as the dependent
        variable.
    add_intercept : bool
        Prepend a constant column to ``D``.

    Returns
    -------
    VaOutcomeFit
    """
    D, Duser, names, cp, R0, X = _va_outcome_arrays(panel, dvars, leaveout, add_intercept, center)
    beta, _ = residualize_scores(panel)
    d = longrun_data(panel, "stationary", False, center)
    J = cp.n_teachers
    V = R0 - X @ beta
    DtD = D.T @ D / J
    DtD_inv = spd_inverse(DtD, names, what="D'D")
    alpha = DtD_inv @ (D.T @ V / J)
    e = V - D @ alpha
    ma = np.zeros((J, D.shape[1]))
    np.add.at(ma, cp.teacher, D * e[:, None])
    naive = DtD_inv @ (ma.T @ ma / J) @ DtD_inv / J
    gamma = ma
    if panel.K:
        EDX = D.T @ X / J
        Minv = spd_inverse(d.sxx.mean(axis=0), panel.covariate_names, what="within design")
        gamma = ma - d.m1(beta) @ (EDX @ Minv).T
    v1 = DtD_inv @ (gamma.T @ gamma / J) @ DtD_inv / J
    test = dx_orthogonality_test(panel, Duser, leaveout=leaveout, center=center)
    return VaOutcomeFit(alpha, (v1 + v1.T) / 2, (naive + naive.T) / 2, test[2], test[:2], names, gamma)


def dx_orthogonality_test(panel: PanelData, dvars, leaveout: bool = False, center: str = "grand"):
    """Wald test that ``E(D_j' X_j) = 0``.

    Per teacher the cross products ``vec(sum_t D_t X_t')`` are formed with the
    covariate cell means centered as in the estimation (and averaged over
    other years when ``leaveout``). The statistic ``J cbar' V^-1 cbar`` uses
    their centered covariance and is chi-squared with ``K_D * K`` degrees of
    freedom.

    Returns
    -------
    statistic : float
    p_value : float
    cross_moments : ndarray, shape (K_D, K)
    """
    D, _, _, cp, _, X = _va_outcome_arrays(panel, dvars, leaveout, False, center)
    J, KD, K = cp.n_teachers, D.shape[1], X.shape[1]
    if K == 0:
        raise ValueError("no covariates to test against")
    c = np.zeros((J, KD * K))
    np.add.at(c, cp.teacher, (D[:, :, None] * X[:, None, :]).reshape(-1, KD * K))
    cbar = c.mean(axis=0)
    dev = c - cbar
    V = dev.T @ dev / J
    w = np.linalg.eigvalsh(V)
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        raise GmmError("covariance of the D'X cross moments is degenerate")
    stat = float(J * cbar @ np.linalg.solve(V, cbar))
    return stat, float(stats.chi2.sf(stat, KD * K)), cbar.reshape(KD, K)
