"""Command-line interface."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from types import SimpleNamespace

import numpy as np

from .core import EstaugError, build_design
from .density import GaussianNoise, augment, density_report
from .experiments import (
    debiased_configs,
    emit_results,
    load_config,
    run_debiased_experiment,
    run_group_lasso_experiment,
    simulate_dataset,
    signal_class_configs,
)
from .oracles import run_oracle_check
from .sampling import (
    LowESSWarning,
    ProposalMixture,
    TestSpec,
    debias,
    estimate_pvalue,
    importance_sample,
    parametric_bootstrap,
    sample_statistics,
    statistic,
)
from .solver import select_lambda_by_active_groups, solve_block_lasso


def _load_matrix(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))


def _load_vector(path):
    return np.loadtxt(path, delimiter=",", ndmin=1).ravel()


def _parse_groups(text, p):
    """``"10,10,5"`` as group sizes, or ``"0-2;3,4"`` as explicit index lists."""
    if ";" in text or "-" in text:
        groups = []
        for part in text.split(";"):
            idx = []
            for tok in part.split(","):
                tok = tok.strip()
                if "-" in tok:
                    a, b = tok.split("-")
                    idx.extend(range(int(a), int(b) + 1))
                elif tok:
                    idx.append(int(tok))
            groups.append(idx)
        return groups
    sizes = [int(t) for t in text.split(",") if t.strip()]
    if len(sizes) == 1 and sizes[0] != p:
        if p % sizes[0]:
            raise SystemExit(f"group size {sizes[0]} does not divide p = {p}")
        sizes = [sizes[0]] * (p // sizes[0])
    return sizes


def _design(args):
    X = _load_matrix(args.x)
    weights = None
    if args.weights == "unit":
        weights = 1.0
    elif args.weights not in (None, "sqrt"):
        weights = [float(w) for w in args.weights.split(",")]
    return build_design(X, _parse_groups(args.groups, X.shape[1]), alpha=args.alpha, weights=weights)


def _vector_arg(spec, p, name):
    if spec is None or spec == "zero":
        return np.zeros(p)
    v = _load_vector(spec)
    if v.size != p:
        raise SystemExit(f"{name} has length {v.size}, expected {p}")
    return v


def _add_design_args(sp):
    sp.add_argument("--x", required=True, help="design matrix CSV (no header, rows = observations)")
    sp.add_argument("--groups", required=True, help="group sizes '10,10,...', one size for equal groups, or index lists '0-1;2'")
    sp.add_argument("--alpha", type=float, default=2.0)
    sp.add_argument("--weights", default=None, help="'sqrt' (default), 'unit' or comma-separated weights")


def cmd_fit(args):
    d = _design(args)
    y = _load_vector(args.y)
    if args.active_groups is not None:
        lam = select_lambda_by_active_groups(d, y, args.active_groups, rule=args.lambda_rule)
    elif args.lam is not None:
        lam = args.lam
    else:
        raise SystemExit("give --lambda or --active-groups")
    fit = solve_block_lasso(d, y, lam)
    part = d.partition
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("coord,group,beta,S,gamma,active\n")
            for k in range(d.p):
                j = int(part.group_of[k])
                fh.write(
                    f"{k},{j},{fit.beta_hat[k]:.17g},{fit.S[k]:.17g},{fit.gamma_hat[j]:.17g},{int(fit.gamma_hat[j] > 0)}\n"
                )
    print(json.dumps({"lambda": fit.lam, "active": list(fit.active), "kkt_residual": fit.kkt_residual, "objective": fit.objective}))
    return 0


def cmd_density(args):
    d = _design(args)
    pt = _load_matrix(args.point)
    if pt.shape != (d.p, 2):
        raise SystemExit("--point must have p rows with columns beta_hat,S")
    beta, S = pt[:, 0], pt[:, 1]
    point = augment(SimpleNamespace(beta_hat=beta, S=S), d)
    rep = density_report(point, d, _vector_arg(args.beta0, d.p, "--beta0"), args.lam, GaussianNoise(args.sigma2))
    print(
        json.dumps(
            {
                "stratum": list(rep.active),
                "density": rep.value,
                "log_density": rep.log_value,
                "jacobian": rep.jacobian,
                "chart_free": [int(k) for k in rep.chart.free],
            }
        )
    )
    return 0


def _parse_stat(text, estimator):
    if text == "sum_norms":
        return TestSpec("sum_norms", estimator=estimator)
    kind, _, j = text.partition(":")
    if kind not in ("fitted_norm", "block_norm") or not j:
        raise SystemExit("--stat must be sum_norms, fitted_norm:J or block_norm:J")
    return TestSpec(kind, group=int(j), estimator=estimator)


def _mixture_component(spec, d, beta_tilde):
    """``a,BETA,M`` with BETA one of zero, tilde, tilde-half-G or a CSV path."""
    try:
        a, b, m = spec.split(",")
    except ValueError:
        raise SystemExit(f"bad --mixture {spec!r}; expected a,BETA,M") from None
    if b == "zero":
        beta = np.zeros(d.p)
    elif b == "tilde":
        beta = beta_tilde.copy()
    elif b.startswith("tilde-half-"):
        beta = beta_tilde.copy()
        g = d.partition.groups[int(b[len("tilde-half-") :])]
        beta[g] /= 2
    else:
        beta = _vector_arg(b, d.p, "mixture beta")
    return float(a), beta, float(m)


def _sample(args, importance):
    d = _design(args)
    beta_tilde = _vector_arg(args.beta_tilde, d.p, "--beta-tilde")
    noise = GaussianNoise(args.sigma2)
    theta = None
    if args.estimator == "debiased":
        if args.theta is None:
            raise SystemExit("--estimator debiased needs --theta")
        theta = _load_matrix(args.theta)
    test = _parse_stat(args.stat, args.estimator)
    observed = args.observed
    if observed is None and args.y is not None:
        y = _load_vector(args.y)
        fit = solve_block_lasso(d, y, args.lam)
        est = debias(fit, theta, d) if theta is not None else fit.beta_hat
        observed = float(statistic(d, est[None, :], test)[0])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LowESSWarning)
        if importance:
            if not args.mixture:
                raise SystemExit("sample-is needs at least one --mixture component")
            comps = [_mixture_component(s, d, beta_tilde) for s in args.mixture]
            a = np.array([c[0] for c in comps])
            mix = ProposalMixture(a / a.sum(), [c[1] for c in comps], [c[2] for c in comps])
            ws = importance_sample(d, beta_tilde, noise, mix, args.lam, args.n_draws, args.seed)
        else:
            ws = parametric_bootstrap(d, beta_tilde, noise, args.lam, args.n_draws, args.seed)
        if theta is not None:
            ws.with_debiased(theta)
        vals = sample_statistics(ws, test)
        summary = {"N": ws.N, "ess": ws.ess, "observed": observed, "p_hat": None, "std_err": None}
        if observed is not None:
            pv = estimate_pvalue(ws, test, observed)
            summary.update(p_hat=pv.p_hat, std_err=pv.std_err, tail_ess=pv.tail_ess)
    summary["warnings"] = [str(w.message) for w in caught]
    sizes = ws.active_sizes
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("active_size,statistic,log_weight\n")
        for k in range(ws.N):
            out.write(f"{sizes[k]},{vals[k]:.17g},{ws.log_weights[k]:.17g}\n")
        out.write("# " + json.dumps(summary) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if args.out:
        print(json.dumps(summary))
    return 0


def _add_sample_args(sp):
    _add_design_args(sp)
    sp.add_argument("--n-draws", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--beta-tilde", default="zero", help="'zero' or CSV path")
    sp.add_argument("--sigma2", type=float, default=1.0)
    sp.add_argument("--lambda", dest="lam", type=float, required=True)
    sp.add_argument("--stat", default="sum_norms", help="sum_norms, fitted_norm:J or block_norm:J")
    sp.add_argument("--estimator", choices=("beta", "debiased"), default="beta")
    sp.add_argument("--theta", help="p x p CSV used for de-biasing")
    sp.add_argument("--y", help="observed response CSV; the observed statistic is computed from its fit")
    sp.add_argument("--observed", type=float, help="observed statistic (overrides --y)")
    sp.add_argument("--out")


def _configs(args, default):
    if args.config:
        plan = load_config(args.config)
        configs, N, R, rule = plan.configs, plan.N, plan.R, plan.rule
    else:
        configs, N, R, rule = default(args.seed), 10000, 10, "smallest"
        if args.classes:
            keep = set(args.classes.split(","))
            configs = [c for c in configs if c.name in keep]
    N = args.n_draws or N
    R = args.replicates or R
    return configs, N, R, rule


def _add_experiment_args(sp):
    sp.add_argument("--config", help="INI experiment file")
    sp.add_argument("--classes", help="comma-separated class names from the built-in preset")
    sp.add_argument("--seed", type=int, default=2024)
    sp.add_argument("--n-draws", type=int)
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--out", required=True)


def cmd_experiment(args, kind):
    if kind == "group":
        configs, N, R, rule = _configs(args, signal_class_configs)
        res = run_group_lasso_experiment(configs, N, R, rule=rule)
    else:
        configs, N, R, rule = _configs(args, debiased_configs)
        res = run_debiased_experiment(configs, N, R, rule=rule)
    emit_results(res, args.out)
    print(json.dumps(res.summary()))
    return 0


def cmd_simulate(args):
    if args.config:
        configs = load_config(args.config).configs
    else:
        configs = signal_class_configs(args.seed)
    match = [c for c in configs if c.name == args.cls]
    if not match:
        raise SystemExit(f"no class named {args.cls!r}; have {[c.name for c in configs]}")
    X, y, beta0 = simulate_dataset(match[0], args.index)
    prefix = args.out_prefix
    np.savetxt(prefix + "_X.csv", X, delimiter=",", fmt="%.17g")
    np.savetxt(prefix + "_y.csv", y, delimiter=",", fmt="%.17g")
    np.savetxt(prefix + "_beta0.csv", beta0, delimiter=",", fmt="%.17g")
    print(json.dumps({"n": int(X.shape[0]), "p": int(X.shape[1]), "dataset_id": match[0].first_id + args.index}))
    return 0


def cmd_oracle(args):
    rows = run_oracle_check(args.sigma2, args.lam, args.n_draws, args.seed)
    width = max(len(r[0]) for r in rows)
    ok = True
    for name, val, ref, tol, passed in rows:
        ok &= bool(passed)
        print(f"{'PASS' if passed else 'FAIL'}  {name:<{width}}  value={float(val):.10g}  reference={float(ref):.10g}  tol={float(tol):.3g}")
    print("all passed" if ok else "FAILURES present")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="estaug", description="Estimator augmentation for the block Lasso.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("fit", help="solve the block Lasso")
    _add_design_args(sp)
    sp.add_argument("--y", required=True)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--active-groups", type=int)
    sp.add_argument("--lambda-rule", choices=("entry", "smallest"), default="entry")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("density", help="density of the augmented estimator at a point")
    _add_design_args(sp)
    sp.add_argument("--point", required=True, help="CSV with p rows: beta_hat,S")
    sp.add_argument("--beta0", default="zero")
    sp.add_argument("--sigma2", type=float, default=1.0)
    sp.add_argument("--lambda", dest="lam", type=float, required=True)
    sp.set_defaults(func=cmd_density)

    sp = sub.add_parser("sample-pb", help="parametric bootstrap")
    _add_sample_args(sp)
    sp.set_defaults(func=lambda a: _sample(a, False))

    sp = sub.add_parser("sample-is", help="importance sampling with a mixture proposal")
    _add_sample_args(sp)
    sp.add_argument("--mixture", action="append", help="component a,BETA,M; BETA is zero, tilde, tilde-half-G or a CSV path")
    sp.set_defaults(func=lambda a: _sample(a, True))

    sp = sub.add_parser("simulate", help="write one simulated dataset")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=2024)
    sp.add_argument("--class", dest="cls", default="null")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--out-prefix", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("experiment-group", help="complete-null p-values with IS(0, 5)")
    _add_experiment_args(sp)
    sp.set_defaults(func=lambda a: cmd_experiment(a, "group"))

    sp = sub.add_parser("experiment-debias", help="de-biased group test with a two-component mixture")
    _add_experiment_args(sp)
    sp.set_defaults(func=lambda a: cmd_experiment(a, "debiased"))

    sp = sub.add_parser("oracle-check", help="closed form, quadrature and simulation agreement")
    sp.add_argument("--sigma2", type=float, default=1.0)
    sp.add_argument("--lambda", dest="lam", type=float, default=1.0)
    sp.add_argument("--n-draws", type=int, default=100000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (EstaugError, NotImplementedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
