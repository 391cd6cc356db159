"""Simulated-dataset experiments: importance-sampling p-values for the
complete null with the group Lasso and for one group with the de-biased
group Lasso, compared against the bootstrap cv.

Configuration files are INI. An ``[experiment]`` section holds run-level
keys (``seed``, ``N``, ``R``, ``n_active``, ``lambda_rule``); each
``[class.<name>]`` section describes one dataset class with keys ``n``,
``p``, ``group_size``, ``rho1``, ``rho2``, ``sigma2``, ``pattern``
(``null``, ``half-v``, ``full-v``), ``n_datasets``, ``first_id`` and
``weights`` (``unit`` or ``sqrt``).
"""

from __future__ import annotations

import configparser
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import build_design
from .density import GaussianNoise
from .sampling import (
    LowESSWarning,
    ProposalMixture,
    TestSpec,
    cv_report,
    debias,
    estimate_pvalue,
    importance_sample,
)
from .solver import EstaugError, LambdaSelectionError, select_lambda_by_active_groups, solve_block_lasso

SIGNAL = np.array([1, 1, 1, 1, -1, -1, -1, -1, 0, 0], dtype=float)
PATTERNS = {"null": 0.0, "half-v": 0.5, "full-v": 1.0}
CSV_HEADER = "dataset_id,lambda,stat_obs,log10_qbar,cv_is,cv_pb_theory,log10_ratio"
WORKERS_ENV = "ESTAUG_WORKERS"


class ConfigError(EstaugError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    """One class of simulated datasets.

    Rows of X are N(0, Sigma) with unit variances, ``rho1`` within a group
    and ``rho2`` across groups. The first two groups of ``beta0`` equal
    ``scale * v`` with ``v = (1,1,1,1,-1,-1,-1,-1,0,0)``; ``pattern``
    selects the scale.
    """

    name: str = "default"
    n: int = 30
    p: int = 100
    group_size: int = 10
    rho1: float = 0.0
    rho2: float = 0.0
    sigma2: float = 1.0
    pattern: str = "null"
    n_datasets: int = 10
    first_id: int = 1
    seed: int = 2024
    weights: str = "unit"

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern must be one of {sorted(PATTERNS)}")
        if self.p % self.group_size:
            raise ConfigError("p must be a multiple of group_size")
        if self.pattern != "null" and (self.group_size != SIGNAL.size or self.p < 2 * SIGNAL.size):
            raise ConfigError("signal patterns need groups of size 10 and at least two groups")
        if self.weights not in ("unit", "sqrt"):
            raise ConfigError("weights must be 'unit' or 'sqrt'")
        if self.sigma2 <= 0 or self.n < 1 or self.n_datasets < 0:
            raise ConfigError("invalid sizes or variance")

    @property
    def J(self) -> int:
        return self.p // self.group_size

    def covariance(self) -> np.ndarray:
        gs = self.group_size
        same = np.kron(np.eye(self.J), np.ones((gs, gs)))
        Sig = np.where(same > 0, self.rho1, self.rho2)
        np.fill_diagonal(Sig, 1.0)
        return Sig

    def covariance_root(self) -> np.ndarray:
        """Symmetric square root of Sigma.

        Raises
        ------
        ConfigError
            If Sigma is not positive definite.
        """
        vals, vecs = np.linalg.eigh(self.covariance())
        if vals.min() <= 1e-12 * max(1.0, vals.max()):
            raise ConfigError(f"Sigma is not positive definite (smallest eigenvalue {vals.min():.3g})")
        return (vecs * np.sqrt(vals)) @ vecs.T

    def beta0(self) -> np.ndarray:
        b = np.zeros(self.p)
        scale = PATTERNS[self.pattern]
        if scale:
            b[: 2 * SIGNAL.size] = scale * np.tile(SIGNAL, 2)
        return b

    def group_weights(self) -> np.ndarray:
        w = 1.0 if self.weights == "unit" else math.sqrt(self.group_size)
        return np.full(self.J, w)


def signal_class_configs(seed: int = 2024) -> list[SimulationConfig]:
    """The three dataset classes: null, half signal and full signal with
    within-group correlation 0.5."""
    return [
        SimulationConfig("null", pattern="null", first_id=1, seed=seed),
        SimulationConfig("half-v", pattern="half-v", first_id=11, seed=seed),
        SimulationConfig("full-v", pattern="full-v", rho1=0.5, first_id=21, seed=seed),
    ]


def debiased_configs(seed: int = 2025) -> list[SimulationConfig]:
    """Twenty signal datasets drawn afresh under the two signal classes."""
    return [c for c in signal_class_configs(seed) if c.pattern != "null"]


def simulate_dataset(config: SimulationConfig, index: int, root=None):
    """Dataset ``index`` of a class; deterministic in ``(seed, first_id + index)``.

    Returns
    -------
    X : (n, p) array
    y : (n,) array
    beta0 : (p,) array
    """
    if not 0 <= index < config.n_datasets:
        raise IndexError("dataset index out of range")
    root = config.covariance_root() if root is None else root
    ss = np.random.SeedSequence([config.seed, config.first_id + index])
    rng = np.random.Generator(np.random.PCG64(ss))
    X = rng.standard_normal((config.n, config.p)) @ root
    beta0 = config.beta0()
    y = X @ beta0 + math.sqrt(config.sigma2) * rng.standard_normal(config.n)
    return X, y, beta0


@dataclass
class DatasetRecord:
    dataset_id: int
    lam: float = float("nan")
    stat_obs: float = float("nan")
    qbar: float = float("nan")
    cv_is: float = float("nan")
    cv_pb: float = float("nan")
    log10_ratio: float = float("nan")
    p_hats: list = field(default_factory=list)
    skipped: str | None = None

    @property
    def log10_qbar(self) -> float:
        if self.qbar > 0:
            return math.log10(self.qbar)
        return float("-inf") if self.qbar == 0 else float("nan")


@dataclass
class ExperimentResult:
    kind: str
    records: list
    provenance: dict

    def summary(self) -> dict:
        done = [r for r in self.records if r.skipped is None]
        out = {
            "datasets": len(self.records),
            "completed": len(done),
            "skipped": len(self.records) - len(done),
        }
        small = [r.log10_ratio for r in done if r.qbar < 1e-4 and np.isfinite(r.log10_ratio)]
        out["median_log10_ratio_qbar_below_1e-4"] = float(np.median(small)) if small else float("nan")
        out["n_qbar_below_1e-4"] = len(small)
        out["n_cv_is_le_cv_pb"] = sum(1 for r in done if r.cv_is <= r.cv_pb)
        if done:
            stats = [r.stat_obs for r in done]
            out["stat_obs_min"] = float(min(stats))
            out["stat_obs_max"] = float(max(stats))
        return out


def _as_list(configs):
    return [configs] if isinstance(configs, SimulationConfig) else list(configs)


def _group_job(args):
    config, index, N, R, n_active, rule = args
    X, y, _ = simulate_dataset(config, index)
    did = config.first_id + index
    rec = DatasetRecord(did)
    d = build_design(X, [config.group_size] * config.J, weights=config.group_weights())
    try:
        lam = select_lambda_by_active_groups(d, y, n_active, rule=rule)
    except LambdaSelectionError as exc:
        rec.skipped = str(exc)
        return rec
    fit = solve_block_lasso(d, y, lam)
    test = TestSpec("sum_norms", observed=float(np.sum(d.partition.group_norms(fit.beta_hat))))
    noise = GaussianNoise(config.sigma2)
    mix = ProposalMixture.single(np.zeros(d.p), 5.0)
    p_hats = []
    for r in range(R):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LowESSWarning)
            ws = importance_sample(d, np.zeros(d.p), noise, mix, lam, N, config.seed, key=(did, r))
            p_hats.append(estimate_pvalue(ws, test).p_hat)
    _fill(rec, lam, test.observed, p_hats, N)
    return rec


def _debias_job(args):
    config, index, N, R, n_active, rule = args
    X, y, _ = simulate_dataset(config, index)
    did = config.first_id + index
    rec = DatasetRecord(did)
    d = build_design(X, [config.group_size] * config.J, weights=config.group_weights())
    try:
        lam = select_lambda_by_active_groups(d, y, n_active, rule=rule)
    except LambdaSelectionError as exc:
        rec.skipped = str(exc)
        return rec
    fit = solve_block_lasso(d, y, lam)
    theta = np.linalg.inv(config.covariance())
    b = debias(fit, theta, d)
    g = d.partition.groups[0]
    t_obs = float(np.linalg.norm(X[:, g] @ b[g]))
    test = TestSpec("fitted_norm", group=0, estimator="debiased", observed=t_obs)
    bridge = fit.beta_hat.copy()
    bridge[g] /= 2
    mix = ProposalMixture([0.5, 0.5], [fit.beta_hat, bridge], [2.0, 4.0])
    noise = GaussianNoise(config.sigma2)
    p_hats = []
    for r in range(R):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LowESSWarning)
            ws = importance_sample(d, fit.beta_hat, noise, mix, lam, N, config.seed, key=(did, r)).with_debiased(theta)
            p_hats.append(estimate_pvalue(ws, test).p_hat)
    _fill(rec, lam, t_obs, p_hats, N)
    return rec


def _fill(rec, lam, stat, p_hats, N):
    rec.lam, rec.stat_obs, rec.p_hats = float(lam), float(stat), [float(q) for q in p_hats]
    if len(p_hats) >= 2:
        rep = cv_report(p_hats, N)
        rec.qbar, rec.cv_is, rec.cv_pb, rec.log10_ratio = rep.qbar, rep.cv, rep.cv_pb, rep.log10_ratio
    else:
        rec.qbar = float(np.mean(p_hats))


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _run(kind, job, configs, N, R, n_active, rule):
    configs = _as_list(configs)
    for c in configs:
        c.covariance_root()
    jobs = [(c, i, N, R, n_active, rule) for c in configs for i in range(c.n_datasets)]
    nw = _workers()
    if nw > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=nw) as ex:
            records = list(ex.map(job, jobs))
    else:
        records = [job(a) for a in jobs]
    records.sort(key=lambda r: r.dataset_id)
    prov = {
        "kind": kind,
        "N": N,
        "R": R,
        "n_active": n_active,
        "lambda_rule": rule,
        "classes": [asdict(c) for c in configs],
    }
    return ExperimentResult(kind, records, prov)


def run_group_lasso_experiment(configs, N: int = 10000, R: int = 10, *, n_active: int = 2, rule: str = "smallest"):
    """IS(0, 5) p-values of the sum of block norms under the complete null.

    Per dataset lambda is chosen so the fit has ``n_active`` active
    groups; each of the ``R`` replicates draws ``N`` weighted samples.
    Datasets where lambda selection fails are kept as skipped records.
    """
    return _run("group", _group_job, configs, N, R, n_active, rule)


def run_debiased_experiment(configs, N: int = 10000, R: int = 10, *, n_active: int = 2, rule: str = "smallest"):
    """Mixture-IS p-values of ``||X_(1) b_(1)||`` for the de-biased fit.

    Target ``beta_tilde = beta_hat``; proposal components centred at
    ``beta_hat`` (variance x2) and at ``beta_hat`` with the first group
    halved (variance x4), equal weights; ``Theta = Sigma^-1``.
    """
    return _run("debiased", _debias_job, configs, N, R, n_active, rule)


def _fmt(x) -> str:
    return "%.17g" % x


def emit_results(result: ExperimentResult, path) -> None:
    """Write one CSV row per completed dataset and ``#`` summary lines."""
    lines = [CSV_HEADER]
    for r in result.records:
        if r.skipped is not None:
            continue
        vals = [r.lam, r.stat_obs, r.log10_qbar, r.cv_is, r.cv_pb, r.log10_ratio]
        lines.append(",".join([str(r.dataset_id)] + [_fmt(v) for v in vals]))
    if result.records:
        for r in result.records:
            if r.skipped is not None:
                lines.append(f"# skipped dataset {r.dataset_id}: {r.skipped}")
        prov = result.provenance
        lines.append(f"# kind={prov['kind']} N={prov['N']} R={prov['R']} n_active={prov['n_active']} lambda_rule={prov['lambda_rule']}")
        for c in prov["classes"]:
            lines.append("# class " + " ".join(f"{k}={v}" for k, v in c.items()))
        for k, v in result.summary().items():
            lines.append(f"# {k}={_fmt(v) if isinstance(v, float) else v}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_results(path):
    """Parse a results CSV into a list of dicts (comment lines skipped)."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError("unexpected header")
        keys = header.split(",")
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.strip().split(",")
            if len(parts) != len(keys):
                raise ValueError(f"malformed row: {line!r}")
            row = {"dataset_id": int(parts[0])}
            row.update({k: float(v) for k, v in zip(keys[1:], parts[1:])})
            rows.append(row)
    return rows


_INT_KEYS = {"n", "p", "group_size", "n_datasets", "first_id", "seed"}
_FLOAT_KEYS = {"rho1", "rho2", "sigma2"}
_STR_KEYS = {"pattern", "weights"}


@dataclass(frozen=True)
class ExperimentPlan:
    configs: list
    N: int = 10000
    R: int = 10
    n_active: int = 2
    rule: str = "smallest"
    seed: int = 2024


def load_config(path) -> ExperimentPlan:
    """Read an INI experiment file.

    Raises
    ------
    ConfigError
        For unknown keys, malformed values or a missing class section.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read {path}")
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    try:
        seed = int(exp.get("seed", 2024))
        plan_kw = dict(
            N=int(exp.get("n", 10000)),
            R=int(exp.get("r", 10)),
            n_active=int(exp.get("n_active", 2)),
            rule=str(exp.get("lambda_rule", "smallest")),
        )
    except ValueError as exc:
        raise ConfigError(f"bad [experiment] value: {exc}") from None
    configs = []
    for sec in cp.sections():
        if not sec.startswith("class."):
            if sec != "experiment":
                raise ConfigError(f"unknown section [{sec}]")
            continue
        kw = {"name": sec[len("class.") :], "seed": seed}
        for k, v in cp[sec].items():
            try:
                if k in _INT_KEYS:
                    kw[k] = int(v)
                elif k in _FLOAT_KEYS:
                    kw[k] = float(v)
                elif k in _STR_KEYS:
                    kw[k] = v.strip()
                else:
                    raise ConfigError(f"unknown key {k!r} in [{sec}]")
            except ValueError:
                raise ConfigError(f"bad value for {k!r} in [{sec}]: {v!r}") from None
        configs.append(SimulationConfig(**kw))
    if not configs:
        raise ConfigError("no [class.*] section")
    return ExperimentPlan(configs, seed=seed, **plan_kw)
