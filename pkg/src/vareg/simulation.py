"""Synthetic teacher panels and Monte Carlo evaluation of the estimators.

Every random variable of a replication is drawn from its own counter-based
stream keyed by ``(seed, replication, variable)``, in a fixed array layout,
so a replication's data does not depend on which other replications run or
on how many workers run them.
"""
from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .gmm import optimal_gmm, solve_exactly_identified
from .inference import (
    build_longrun_system, build_overid_system, corrected_sigma2, fit_2sls_random_assignment, fit_3sls,
)
from .panel import PanelData
from .pipeline import estimate_va, multistep_ols_kappa

ESTIMATORS = ("ols_naive", "ols_corrected", "gmm", "optimal_gmm", "2sls", "3sls")

_TAGS = {"mu": 1, "omega": 2, "xnoise": 3, "eps": 4, "u_eps": 5, "eta": 6, "u_eta": 7,
         "kappa": 8, "missing": 9}


@dataclass(frozen=True)
class DgpConfig:
    """Simulation design.

    ``X = (rho mu + (1 - rho) nu) / sqrt(rho^2 + (1 - rho)^2)`` with
    ``nu ~ N(0, var_xnoise)`` per student, ``R = X + mu + eps * U``,
    ``Y = a + b X + kappa_i mu + eta * U`` with independent ``U ~ U[0, 2]``
    multipliers (set ``heteroskedastic=False`` for ``U = 1``).

    ``mu_model`` is ``"constant"`` (one VA per teacher), ``"iid_per_year"``
    or ``"persistent"`` (``mu_j + omega_jt`` with ``Var(omega) = sigma_omega^2``
    and total variance ``var_mu``). ``kappa_sd > 0`` draws student effects
    ``kappa_i`` with mean ``kappa0``; ``het_dependence`` in ``[-1, 1]`` ties them
    to ``|mu|``. ``eta_leak`` adds ``eta_leak * omega_{j,t+1}`` to outcomes,
    breaking the exclusion of next-year VA. ``covariates=False`` drops ``X``
    from both equations and from the panel (``K = 0``).
    """

    J: int = 3000
    n_per_class: int = 30
    T: int = 10
    kappa0: float = 100.0
    rho: float = 0.5
    var_mu: float = 0.01
    var_eps: float = 0.81
    var_eta: float = 100.0
    var_xnoise: float = 0.01
    intercept: float = 5.0
    x_coef: float = 10.0
    mu_model: str = "constant"
    sigma_omega: float = 0.0
    heteroskedastic: bool = True
    kappa_sd: float = 0.0
    het_dependence: float = 0.0
    eta_leak: float = 0.0
    outcome_missing: float = 0.0
    covariates: bool = True
    seed: int = 20240601

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        for name in ("var_mu", "var_eps", "var_eta", "var_xnoise"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mu_model not in ("constant", "iid_per_year", "persistent"):
            raise ValueError(f"unknown mu_model {self.mu_model!r}")
        if self.mu_model == "persistent" and not 0 < self.sigma_omega ** 2 < self.var_mu:
            raise ValueError("persistent model needs 0 < sigma_omega^2 < var_mu")
        if self.J < 2 or self.T < 2 or self.n_per_class < 1:
            raise ValueError("need J >= 2, T >= 2 and n_per_class >= 1")
        if not -1 <= self.het_dependence <= 1:
            raise ValueError("het_dependence must lie in [-1, 1]")
        if not 0 <= self.outcome_missing < 1:
            raise ValueError("outcome_missing must lie in [0, 1)")

    @property
    def var_epsbar(self) -> float:
        """Variance of a class-mean score shock."""
        eu2 = 4.0 / 3.0 if self.heteroskedastic else 1.0
        return self.var_eps * eu2 / self.n_per_class


def _rng(seed, rep, tag):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep), _TAGS[tag]])))


def simulate_truth(config: DgpConfig, rep: int):
    """Draw the panel and return ``(panel, mu_cells)`` with true VA per teacher-year."""
    c = config
    J, T, n = c.J, c.T, c.n_per_class
    N = J * T * n
    if c.mu_model == "constant":
        mu = np.repeat(_rng(c.seed, rep, "mu").normal(0, math.sqrt(c.var_mu), J)[:, None], T, axis=1)
        omega = np.zeros((J, T))
    elif c.mu_model == "iid_per_year":
        mu = _rng(c.seed, rep, "mu").normal(0, math.sqrt(c.var_mu), (J, T))
        omega = mu
    else:
        base = _rng(c.seed, rep, "mu").normal(0, math.sqrt(c.var_mu - c.sigma_omega ** 2), J)
        omega = _rng(c.seed, rep, "omega").normal(0, c.sigma_omega, (J, T))
        mu = base[:, None] + omega
    mu_s = np.repeat(mu.ravel(), n)
    nu = _rng(c.seed, rep, "xnoise").normal(0, math.sqrt(c.var_xnoise), N)
    X = (c.rho * mu_s + (1 - c.rho) * nu) / math.sqrt(c.rho ** 2 + (1 - c.rho) ** 2)
    eps = _rng(c.seed, rep, "eps").normal(0, math.sqrt(c.var_eps), N)
    eta = _rng(c.seed, rep, "eta").normal(0, math.sqrt(c.var_eta), N)
    if c.heteroskedastic:
        eps *= _rng(c.seed, rep, "u_eps").uniform(0, 2, N)
        eta *= _rng(c.seed, rep, "u_eta").uniform(0, 2, N)
    if not c.covariates:
        X = np.zeros(N)
    score = X + mu_s + eps
    if c.kappa_sd > 0:
        zeta = _rng(c.seed, rep, "kappa").normal(size=N)
        h = (np.abs(mu_s / math.sqrt(c.var_mu)) - math.sqrt(2 / math.pi)) / math.sqrt(1 - 2 / math.pi)
        kappa_i = c.kappa0 + c.kappa_sd * (c.het_dependence * h + math.sqrt(1 - c.het_dependence ** 2) * zeta)
    else:
        kappa_i = c.kappa0
    outcome = c.intercept + c.x_coef * X + kappa_i * mu_s + eta
    if c.eta_leak:
        nxt = np.zeros((J, T))
        nxt[:, :-1] = omega[:, 1:]
        outcome += c.eta_leak * np.repeat(nxt.ravel(), n)
    if c.outcome_missing > 0:
        outcome[_rng(c.seed, rep, "missing").uniform(size=N) < c.outcome_missing] = np.nan
    teacher = np.repeat(np.arange(J), T * n)
    year = np.tile(np.repeat(np.arange(1, T + 1), n), J)
    panel = PanelData(
        student_id=np.arange(N), teacher=teacher, year=year, score=score, outcome=outcome,
        X=X[:, None] if c.covariates else np.zeros((N, 0)), teacher_labels=np.arange(J),
        covariate_names=("x1",) if c.covariates else (),
    )
    return panel, mu.ravel()


def simulate_panel(config: DgpConfig, replication_index: int = 0) -> PanelData:
    """Draw one synthetic panel; deterministic in ``(config, replication_index)``."""
    return simulate_truth(config, replication_index)[0]


# ---------------------------------------------------------------- replications


def _run_one(config: DgpConfig, rep: int, estimators) -> dict:
    panel = simulate_panel(config, rep)
    out = {"rep": rep, "results": {}, "errors": {}, "extras": {}}
    est = None
    kfit = None

    def multistep():
        nonlocal est, kfit
        if est is None:
            est = estimate_va(panel)
            kfit = multistep_ols_kappa(est.prelim, est.mu_star)
            out["extras"].update(phi=est.phi.coefficients.copy(), beta=est.beta_hat.copy(),
                                 beta_y=est.beta_y_hat.copy())
        return est, kfit

    for name in estimators:
        try:
            if name == "ols_naive":
                _, k = multistep()
                out["results"][name] = (k.kappa_hat, k.naive_se, None)
            elif name == "ols_corrected":
                e, k = multistep()
                ck = corrected_sigma2(panel, e, k)
                out["results"][name] = (k.kappa_hat, ck.se, None)
                out["extras"]["variance_gap"] = ck.sigma2_hat - ck.naive_s2
            elif name == "gmm":
                fit = solve_exactly_identified(build_longrun_system(panel))
                out["results"][name] = (float(fit.param("kappa")[0]), float(fit.se("kappa")[0]), None)
            elif name == "optimal_gmm":
                fit = optimal_gmm(build_overid_system(panel))
                out["results"][name] = (float(fit.param("kappa")[0]), float(fit.se("kappa")[0]), fit.j_stat)
                out["extras"]["j_dof"] = fit.dof
            elif name == "2sls":
                k = fit_2sls_random_assignment(panel, random_assignment=True)
                out["results"][name] = (k.kappa_hat, k.naive_se, None)
            elif name == "3sls":
                fit = fit_3sls(panel, random_assignment=True)
                out["results"][name] = (float(fit.param("kappa")[0]), float(fit.se("kappa")[0]), None)
            else:
                raise ValueError(f"unknown estimator {name!r}")
        except ValueError as exc:
            if str(exc).startswith("unknown estimator"):
                raise
            out["errors"][name] = f"{type(exc).__name__}: {exc}"
        except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            out["errors"][name] = f"{type(exc).__name__}: {exc}"
    return out


def _run_chunk(args):
    config, reps, estimators = args
    return [_run_one(config, r, estimators) for r in reps]


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("VAREG_JOBS", "1")))
    except ValueError:
        return 1


@dataclass(eq=False)
class EstimatorDraws:
    """Per-replication draws for one estimator (``nan`` where it failed)."""

    kappa: np.ndarray
    se: np.ndarray
    j_stat: np.ndarray
    kappa0: float
    errors: dict = field(default_factory=dict)

    @property
    def ok(self) -> np.ndarray:
        return np.isfinite(self.kappa) & np.isfinite(self.se)

    @property
    def n_failed(self) -> int:
        return int((~self.ok).sum())

    @property
    def hit(self) -> np.ndarray:
        k, s = self.kappa[self.ok], self.se[self.ok]
        return np.abs(k - self.kappa0) <= 1.96 * s

    @property
    def bias(self) -> float:
        return float(np.mean(self.kappa[self.ok]) - self.kappa0)

    @property
    def mean_variance(self) -> float:
        return float(np.mean(self.se[self.ok] ** 2))

    @property
    def mc_variance(self) -> float:
        return float(np.var(self.kappa[self.ok], ddof=1))

    @property
    def mc_sd(self) -> float:
        return math.sqrt(self.mc_variance)

    @property
    def mean_se(self) -> float:
        return float(np.mean(self.se[self.ok]))

    @property
    def coverage(self) -> float:
        return float(np.mean(self.hit))

    @property
    def mc_se_of_mean(self) -> float:
        return self.mc_sd / math.sqrt(self.ok.sum())


@dataclass(eq=False)
class McSummary:
    """Monte Carlo draws and aggregates for several estimators."""

    config: DgpConfig
    reps: np.ndarray
    draws: dict
    extras: dict
    runtime: float

    def __getitem__(self, name) -> EstimatorDraws:
        return self.draws[name]

    @property
    def R(self) -> int:
        return self.reps.size

    def table(self) -> list[dict]:
        rows = []
        for name, d in self.draws.items():
            rows.append({"estimator": name, "bias": d.bias, "mean_variance": d.mean_variance,
                         "mc_variance": d.mc_variance, "coverage": d.coverage, "mc_sd": d.mc_sd,
                         "mean_se": d.mean_se, "n_failed": d.n_failed})
        return rows

    def subset(self, n: int) -> "McSummary":
        """The first ``n`` replications."""
        d = {k: EstimatorDraws(v.kappa[:n], v.se[:n], v.j_stat[:n], v.kappa0, v.errors) for k, v in self.draws.items()}
        ex = {k: v[:n] for k, v in self.extras.items()}
        return McSummary(self.config, self.reps[:n], d, ex, self.runtime)


def run_replications(config: DgpConfig, estimators=("ols_naive", "optimal_gmm"), R: int = 500,
                     jobs: int | None = None, start: int = 0, progress=None) -> McSummary:
    """Simulate ``R`` panels and apply each estimator.

    Replication ``k`` uses index ``start + k``. Results do not depend on
    ``jobs``. A failed estimator leaves ``nan`` in its draws and the error
    message in ``errors``.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    estimators = tuple(estimators)
    for name in estimators:
        if name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    reps = np.arange(start, start + R)
    t0 = time.perf_counter()
    if jobs == 1:
        results = []
        for r in reps:
            results.append(_run_one(config, int(r), estimators))
            if progress:
                progress(len(results), R)
    else:
        chunks = [(config, [int(r) for r in reps[i::jobs]], estimators) for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = [res for chunk in ex.map(_run_chunk, chunks) for res in chunk]
        results.sort(key=lambda d: d["rep"])
    runtime = time.perf_counter() - t0
    draws = {}
    for name in estimators:
        k = np.full(R, np.nan)
        s = np.full(R, np.nan)
        jst = np.full(R, np.nan)
        errs = {}
        for i, res in enumerate(results):
            if name in res["results"]:
                kk, ss, jj = res["results"][name]
                k[i], s[i] = kk, ss
                if jj is not None:
                    jst[i] = jj
            else:
                errs[res["rep"]] = res["errors"].get(name, "missing")
        draws[name] = EstimatorDraws(k, s, jst, config.kappa0, errs)
    keys = sorted({k for res in results for k in res["extras"]})
    extras = {}
    for key in keys:
        vals = [res["extras"].get(key) for res in results]
        first = next(v for v in vals if v is not None)
        shape = np.shape(first)
        extras[key] = np.array([np.full(shape, np.nan) if v is None else v for v in vals], dtype=float)
    return McSummary(config, reps, draws, extras, runtime)


# ---------------------------------------------------------------- sweeps and profiles


def rho_sweep(base: DgpConfig, rhos=(0.0, 0.25, 0.5, 0.75), R: int = 300,
              estimators=("ols_naive", "optimal_gmm"), jobs: int | None = None, path=None,
              reuse: dict | None = None) -> dict:
    """Run :func:`run_replications` for each ``rho``.

    ``reuse`` maps ``rho`` to an existing summary whose first ``R``
    replications stand in for a fresh run (same seed, same estimators).
    Writes a CSV with columns ``rho, estimator, coverage, mc_sd, mean_se``
    when ``path`` is given.
    """
    out = {}
    for rho in rhos:
        if reuse and rho in reuse and reuse[rho].R >= R:
            out[rho] = reuse[rho].subset(R)
        else:
            out[rho] = run_replications(replace(base, rho=rho), estimators, R, jobs)
    if path is not None:
        write_sweep_csv(out, path)
    return out


def write_sweep_csv(sweep: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rho", "estimator", "coverage", "mc_sd", "mean_se"])
        for rho, summ in sweep.items():
            for name, d in summ.draws.items():
                w.writerow([_fmt(rho), name, _fmt(d.coverage), _fmt(d.mc_sd), _fmt(d.mean_se)])


def het_effects_run(config: DgpConfig, R: int = 300, jobs: int | None = None,
                    estimators=("gmm", "optimal_gmm")) -> McSummary:
    """Monte Carlo under heterogeneous student effects (``config.kappa_sd > 0``)."""
    if config.kappa_sd <= 0:
        raise ValueError("set kappa_sd > 0 for a heterogeneous-effects run")
    return run_replications(config, estimators, R, jobs)


def _fmt(v) -> str:
    return format(float(v), ".17g")


def config_dict(config: DgpConfig) -> dict:
    return asdict(config)
