"""Command-line entry point.

Exit codes: 0 on success, 1 on usage errors (bad flags, unreadable files),
2 when estimation fails. Results go to files (or standard output for JSON
when ``--out`` is omitted); progress goes to standard error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .gmm import GmmError, j_test, optimal_gmm, solve_exactly_identified
from .inference import (
    build_longrun_system, build_overid_system, corrected_sigma2, fit_2sls_random_assignment, fit_3sls,
    va_outcome_fit,
)
from .panel import PanelData, PanelError, load_panel, load_teacher_year_vars, write_panel
from .pipeline import estimate_va, multistep_ols_kappa
from .simulation import DgpConfig, config_dict, default_jobs, rho_sweep, run_replications, simulate_panel

EXIT_OK, EXIT_USAGE, EXIT_ESTIMATION = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- serialization


def _num(v) -> str:
    v = float(v)
    if not math.isfinite(v):
        return "null"
    s = format(v, ".17g")
    return s if any(c in s for c in ".e") else s + ".0"


def to_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits; nan and inf become null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(to_json(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + to_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return json.dumps(str(obj))


def _emit_json(payload: dict, out) -> None:
    text = to_json(payload) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load(path) -> PanelData:
    if not os.path.isfile(path):
        raise UsageError(f"input file not found: {path}")
    panel = load_panel(path)
    if panel.excluded_teachers:
        _log(f"excluded {len(panel.excluded_teachers)} teacher(s) observed in fewer than two years")
    return panel


def _sample(panel: PanelData) -> dict:
    return {"n_students": panel.n_students, "n_teachers": panel.n_teachers, "n_teacher_years": panel.n_cells,
            "n_excluded_teachers": len(panel.excluded_teachers),
            "n_students_with_outcome": int(panel.has_outcome.sum())}


def _named(names, values) -> dict:
    return {str(n): float(v) for n, v in zip(names, values)}


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    cfg = DgpConfig(J=args.teachers, n_per_class=args.class_size, T=args.years, rho=args.rho,
                    kappa0=args.kappa, kappa_sd=args.kappa_sd, mu_model=args.mu_model,
                    sigma_omega=args.sigma_omega, heteroskedastic=not args.homoskedastic,
                    outcome_missing=args.outcome_missing, covariates=not args.no_covariates, seed=args.seed)
    panel = simulate_panel(cfg, args.rep)
    write_panel(panel, args.out)
    _log(f"wrote {panel.n_students} students, {panel.n_teachers} teachers to {args.out}")
    return EXIT_OK


def cmd_fit_longrun(args) -> int:
    panel = _load(args.input)
    res = {"config": {"command": "fit-longrun", "input": str(args.input), "estimator": args.estimator,
                      "phi_mode": args.phi_mode, "residualize_outcome": args.residualize_outcome,
                      "se": args.se, "cluster": args.cluster, "random_assignment": args.random_assignment,
                      "center_s": args.center_s, "ridge": args.ridge, "version": __version__},
           "sample": _sample(panel)}
    names = panel.covariate_names
    naive = corrected = None
    if args.estimator in ("multistep", "gmm"):
        est = estimate_va(panel, args.phi_mode, args.residualize_outcome)
        k = multistep_ols_kappa(est.prelim, est.mu_star)
        kappa, naive = k.kappa_hat, k.naive_se
        res["beta"] = _named(names, est.beta_hat)
        res["beta_y"] = None if est.beta_y_hat is None else _named(names, est.beta_y_hat)
        res["phi"] = {str(g): v for g, v in est.phi.as_dict().items()}
        if args.estimator == "gmm":
            fit = solve_exactly_identified(build_longrun_system(panel, args.phi_mode, args.residualize_outcome))
            kappa = float(fit.param("kappa")[0])
            corrected = float(fit.se("kappa")[0])
        elif args.se in ("corrected", "both"):
            corrected = corrected_sigma2(panel, est, k).se
    elif args.estimator == "optimal-gmm":
        fit = optimal_gmm(build_overid_system(panel, args.phi_mode, args.residualize_outcome),
                          center_s=args.center_s, ridge=args.ridge)
        kappa, corrected = float(fit.param("kappa")[0]), float(fit.se("kappa")[0])
        if panel.K:
            res["beta"] = _named(names, fit.param("beta"))
            if args.residualize_outcome:
                res["beta_y"] = _named(names, fit.param("beta_y"))
        stat, dof, p = j_test(fit)
        res["j_test"] = {"statistic": stat, "dof": dof, "p_value": p}
    elif args.estimator == "2sls":
        k = fit_2sls_random_assignment(panel, args.random_assignment, args.phi_mode)
        kappa, naive = k.kappa_hat, k.naive_se
        corrected = naive
    else:
        fit = fit_3sls(panel, args.random_assignment, phi_mode=args.phi_mode)
        kappa, corrected = float(fit.param("kappa")[0]), float(fit.se("kappa")[0])
        res["kappa_2sls"] = fit.extras["kappa_2sls"]
    se = {}
    if args.se in ("naive", "both"):
        se["naive"] = naive
    if args.se in ("corrected", "both"):
        se["corrected"] = corrected
    res["kappa"] = kappa
    res["se"] = se
    _emit_json(res, args.out)
    return EXIT_OK


def cmd_fit_va_outcome(args) -> int:
    panel = _load(args.input)
    if not os.path.isfile(args.dvars):
        raise UsageError(f"teacher-year variable file not found: {args.dvars}")
    dvars = load_teacher_year_vars(args.dvars)
    fit = va_outcome_fit(panel, dvars, leaveout=args.leaveout, add_intercept=not args.no_intercept)
    stat, p = fit.dx_test
    res = {
        "config": {"command": "fit-va-outcome", "input": str(args.input), "dvars": str(args.dvars),
                   "leaveout": args.leaveout, "intercept": not args.no_intercept, "version": __version__},
        "sample": _sample(panel),
        "alpha": _named(fit.names, fit.alpha_hat),
        "se": {"naive": _named(fit.names, fit.naive_se), "corrected": _named(fit.names, fit.corrected_se)},
        "dx_test": {"statistic": stat, "p_value": p, "dof": int(fit.dx_cross.size),
                    "cross_moments": fit.dx_cross},
    }
    _emit_json(res, args.out)
    return EXIT_OK


def cmd_overid_test(args) -> int:
    panel = _load(args.input)
    system = build_overid_system(panel, args.phi_mode, args.residualize_outcome)
    if system.n_moments == system.n_params:
        raise GmmError("system is exactly identified (0 degrees of freedom); no J-test")
    fit = optimal_gmm(system, center_s=args.center_s, ridge=args.ridge)
    stat, dof, p = j_test(fit)
    res = {"config": {"command": "overid-test", "input": str(args.input), "phi_mode": args.phi_mode,
                      "residualize_outcome": args.residualize_outcome, "center_s": args.center_s,
                      "ridge": args.ridge, "version": __version__},
           "sample": _sample(panel), "kappa": float(fit.param("kappa")[0]),
           "se": float(fit.se("kappa")[0]), "j_test": {"statistic": stat, "dof": dof, "p_value": p}}
    _emit_json(res, args.out)
    return EXIT_OK


_PROFILE_RHOS = (0.0, 0.25, 0.5, 0.75)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_mc(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = DgpConfig(seed=args.seed)
    if args.teachers is not None:
        base = replace(base, J=args.teachers)
    jobs = default_jobs() if args.jobs is None else args.jobs
    files = []

    def progress(done, total):
        if done % max(1, total // 10) == 0 or done == total:
            _log(f"  {done}/{total} replications")

    if args.profile == "table1":
        _log(f"table1: {args.reps} replications, J={base.J}")
        summ = run_replications(base, ("ols_naive", "optimal_gmm"), args.reps, jobs, progress=progress)
        rows = []
        for label, name in (("ols", "ols_naive"), ("optimal_gmm", "optimal_gmm")):
            d = summ[name]
            rows.append([label, d.bias, d.mean_variance, d.mc_variance, d.coverage])
        path = out / "table1.csv"
        _write_csv(path, ["estimator", "bias", "mean_variance", "mc_variance", "coverage"], rows)
        files.append(path)
        failed = {k: v.n_failed for k, v in summ.draws.items()}
        configs = [config_dict(base)]
    elif args.profile in ("fig1", "fig2"):
        _log(f"{args.profile}: {args.reps} replications at each rho in {_PROFILE_RHOS}, J={base.J}")
        sweep = rho_sweep(base, _PROFILE_RHOS, args.reps, ("ols_naive", "optimal_gmm"), jobs)
        fig1 = [[rho, name, d.coverage] for rho, s in sweep.items() for name, d in s.draws.items()]
        fig2 = [[rho, s["ols_naive"].mc_sd, s["ols_naive"].mean_se] for rho, s in sweep.items()]
        _write_csv(out / "fig1.csv", ["rho", "estimator", "coverage"], fig1)
        _write_csv(out / "fig2.csv", ["rho", "mc_sd", "mean_se"], fig2)
        files += [out / "fig1.csv", out / "fig2.csv"]
        failed = {f"{rho}:{k}": v.n_failed for rho, s in sweep.items() for k, v in s.draws.items()}
        configs = [config_dict(s.config) for s in sweep.values()]
    else:
        cfg = replace(base, kappa_sd=args.kappa_sd)
        _log(f"het: {args.reps} replications, kappa_sd={cfg.kappa_sd}, J={cfg.J}")
        summ = run_replications(cfg, ("gmm", "optimal_gmm"), args.reps, jobs, progress=progress)
        rows = [[name, float(np.mean(d.kappa[d.ok])), d.mc_se_of_mean, d.bias, d.coverage]
                for name, d in summ.draws.items()]
        path = out / "het.csv"
        _write_csv(path, ["estimator", "mean_kappa", "mc_se_of_mean", "bias", "coverage"], rows)
        files.append(path)
        failed = {k: v.n_failed for k, v in summ.draws.items()}
        configs = [config_dict(cfg)]
    manifest = {
        "command": "mc", "profile": args.profile, "reps": args.reps, "seed": args.seed, "jobs": jobs,
        "version": __version__, "configs": configs, "failed_replications": failed,
        "replication_scheme": "teacher VA, covariates and all shocks redrawn in every replication",
        "outputs": {p.name: _sha256(p) for p in files},
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "manifest.json").write_text(to_json(manifest) + "\n", encoding="utf-8")
    _log(f"wrote {', '.join(p.name for p in files)} and manifest.json to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vareg", description="Estimation and inference with teacher value-added measures.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic student panel CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--teachers", type=_positive_int, default=3000)
    s.add_argument("--class-size", type=_positive_int, default=30)
    s.add_argument("--years", type=_positive_int, default=10)
    s.add_argument("--rho", type=float, default=0.5)
    s.add_argument("--kappa", type=float, default=100.0)
    s.add_argument("--kappa-sd", type=float, default=0.0)
    s.add_argument("--mu-model", choices=("constant", "iid_per_year", "persistent"), default="constant")
    s.add_argument("--sigma-omega", type=float, default=0.0)
    s.add_argument("--homoskedastic", action="store_true")
    s.add_argument("--outcome-missing", type=float, default=0.0)
    s.add_argument("--no-covariates", action="store_true", help="omit the covariate (K = 0)")
    s.add_argument("--seed", type=int, default=DgpConfig.seed)
    s.add_argument("--rep", type=int, default=0, help="replication index")
    s.set_defaults(func=cmd_simulate)

    def common(q):
        q.add_argument("--input", required=True)
        q.add_argument("--phi-mode", choices=("stationary", "unrestricted"), default="stationary")
        q.add_argument("--residualize-outcome", type=_bool, default=True, metavar="true|false")
        q.add_argument("--out", default=None, help="JSON output path (standard output when omitted)")

    f = sub.add_parser("fit-longrun", help="estimate the effect of VA on a long-run outcome")
    common(f)
    f.add_argument("--estimator", choices=("multistep", "gmm", "optimal-gmm", "2sls", "3sls"), default="multistep")
    f.add_argument("--se", choices=("naive", "corrected", "both"), default="both")
    f.add_argument("--cluster", choices=("teacher",), default="teacher")
    f.add_argument("--random-assignment", action="store_true",
                   help="assert random assignment of students to teachers (required by 2sls and 3sls)")
    f.add_argument("--center-s", action="store_true")
    f.add_argument("--ridge", type=float, default=0.0)
    f.set_defaults(func=cmd_fit_longrun)

    v = sub.add_parser("fit-va-outcome", help="regress VA on teacher-year variables")
    v.add_argument("--input", required=True)
    v.add_argument("--dvars", required=True)
    v.add_argument("--leaveout", type=_bool, default=False, metavar="true|false")
    v.add_argument("--no-intercept", action="store_true")
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_fit_va_outcome)

    o = sub.add_parser("overid-test", help="optimal GMM with the overidentification test")
    common(o)
    o.add_argument("--center-s", action="store_true")
    o.add_argument("--ridge", type=float, default=0.0)
    o.set_defaults(func=cmd_overid_test)

    m = sub.add_parser("mc", help="Monte Carlo profiles")
    m.add_argument("--profile", choices=("table1", "fig1", "fig2", "het"), required=True)
    m.add_argument("--reps", type=_positive_int, default=500)
    m.add_argument("--seed", type=int, default=DgpConfig.seed)
    m.add_argument("--jobs", type=_positive_int, default=None,
                   help="worker processes (default: VAREG_JOBS or 1)")
    m.add_argument("--teachers", type=_positive_int, default=None, help="override the number of teachers")
    m.add_argument("--kappa-sd", type=float, default=5.0, help="sd of student effects for the het profile")
    m.add_argument("--out-dir", default=".")
    m.set_defaults(func=cmd_mc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        _log(f"vareg: error: {exc}")
        return EXIT_USAGE
    except (PanelError, GmmError, np.linalg.LinAlgError, ArithmeticError) as exc:
        _log(f"vareg: estimation failed: {exc}")
        return EXIT_ESTIMATION
    except ValueError as exc:
        _log(f"vareg: estimation failed: {exc}")
        return EXIT_ESTIMATION
    except OSError as exc:
        _log(f"vareg: error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
