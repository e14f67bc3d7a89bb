"""Synthetic data generation and replication studies.

Provides data-generating process configurations, single-dataset
simulation, and a replication driver that scores estimators against
the known truth (bias, RMSE, coverage, interval length).
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .design import DesignSet, build_design
from .errors import DomainError, EstimationError, InputError
from .gibbs import GibbsConfig, run_chain, summarize
from .ifgls import IfglsConfig, ifgls_fit
from .mlik import MarglikConfig, log_marginal_likelihood
from .model import AttTable, ModelParams, att_from_delta
from .panel import PanelDataset, split_training
from .priors import default_prior, student_t_prior, training_prior

__all__ = [
    "DgpConfig",
    "EstimatorSpec",
    "SimulationReport",
    "aggregate_metrics",
    "application_dgp",
    "default_estimators",
    "generate_dataset",
    "run_replications",
    "small_n_dgp",
    "benchmark_dgp",
]

_METRICS = ("Bias", "RMSE", "Cov", "IL")


@dataclass(frozen=True)
class DgpConfig:
    """Complete description of a synthetic panel-generating process.

    Parameters
    ----------
    name : str
        Identifier recorded in reports and manifests.
    n : int
        Number of units.
    T : int
        Number of periods.
    treated : tuple of int
        Treated cohorts, each in ``2..T``.
    probs : tuple of float
        Allocation probabilities over the cohorts ``(1,) + treated``,
        in that order. Must sum to one.
    allocation : str
        ``"multinomial"`` draws cohort labels at random (re-drawn until
        every cohort has at least two units); ``"balanced"`` assigns
        deterministic counts by largest remainder.
    w_mean, w_sd : float
        Moments of the scalar unit covariate. Ignored when ``d_w`` is 0.
    d_w : int
        Number of unit covariates (0 or 1).
    beta1 : tuple of float
        Length ``T`` increment coefficients of the untreated path.
    delta : dict
        Cohort ``s`` to a length ``T`` tuple of treatment increments.
        The first coordinate must be zero.
    gamma : dict
        Cohort to a length ``d_w`` tuple of covariate coefficients.
    sigma2 : dict
        Cohort to a length ``T`` tuple of idiosyncratic variances.
    D : dict
        Cohort to the random-intercept variance.
    seed : int
        Default seed used by `generate_dataset` when no override is given.
    """

    name: str
    n: int
    T: int
    treated: tuple[int, ...]
    probs: tuple[float, ...]
    allocation: str
    w_mean: float
    w_sd: float
    d_w: int
    beta1: tuple[float, ...]
    delta: dict[int, tuple[float, ...]]
    gamma: dict[int, tuple[float, ...]]
    sigma2: dict[int, tuple[float, ...]]
    D: dict[int, float]
    seed: int = 0

    def __post_init__(self) -> None:
        cohorts = (1,) + tuple(self.treated)
        if len(self.probs) != len(cohorts):
            raise InputError("probs must align with (1,) + treated")
        if abs(sum(self.probs) - 1.0) > 1e-8:
            raise InputError("allocation probabilities must sum to one")
        if self.allocation not in ("multinomial", "balanced"):
            raise InputError(f"unknown allocation {self.allocation!r}")
        if len(self.beta1) != self.T:
            raise InputError("beta1 must have length T")
        for s in cohorts:
            if len(self.sigma2[s]) != self.T:
                raise InputError(f"sigma2[{s}] must have length T")
            if s > 1 and len(self.delta[s]) != self.T:
                raise InputError(f"delta[{s}] must have length T")
            if s > 1 and self.delta[s][0] != 0.0:
                raise InputError(f"delta[{s}] must start at zero")

    @property
    def cohorts(self) -> tuple[int, ...]:
        return (1,) + tuple(self.treated)

    def params(self) -> ModelParams:
        """Truth as a parameter object."""
        return ModelParams(
            beta1=np.asarray(self.beta1, dtype=float),
            delta={s: np.asarray(self.delta[s], dtype=float) for s in self.treated},
            gamma={s: np.asarray(self.gamma[s], dtype=float) for s in self.cohorts},
            sigma2={s: np.asarray(self.sigma2[s], dtype=float) for s in self.cohorts},
            D={s: float(self.D[s]) for s in self.cohorts},
        )

    def att_truth(self) -> dict[tuple[int, int], float]:
        """True ATT(s, t) for every treated cohort and t >= s."""
        design = build_design(self.T, self.treated)
        out: dict[tuple[int, int], float] = {}
        for s in self.treated:
            path = att_from_delta(np.asarray(self.delta[s], dtype=float), s, design)
            for t in range(s, self.T + 1):
                out[(s, t)] = float(path[t - 1])
        return out

    def att_cells(self) -> tuple[tuple[int, int], ...]:
        return tuple(
            (s, t) for s in self.treated for t in range(s, self.T + 1)
        )


def _largest_remainder(n: int, probs: np.ndarray) -> np.ndarray:
    """Integer counts summing to n, proportional to probs."""
    quota = n * probs
    counts = np.floor(quota).astype(int)
    short = n - counts.sum()
    if short > 0:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def generate_dataset(cfg: DgpConfig, seed: int | None = None) -> PanelDataset:
    """Draw one panel from the process described by ``cfg``.

    The draw order is fixed (cohorts, covariates, intercepts, noise) so
    a given seed always yields the same panel.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    cohorts = np.asarray(cfg.cohorts)
    probs = np.asarray(cfg.probs, dtype=float)

    if cfg.allocation == "balanced":
        counts = _largest_remainder(cfg.n, probs)
        S = np.repeat(cohorts, counts)
    else:
        for _ in range(1000):
            S = rng.choice(cohorts, size=cfg.n, p=probs)
            if all(np.sum(S == s) >= 2 for s in cohorts):
                break
        else:
            raise InputError(
                "could not allocate at least two units per cohort; "
                "increase n or adjust probs"
            )

    if cfg.d_w:
        W = rng.normal(cfg.w_mean, cfg.w_sd, size=(cfg.n, cfg.d_w))
    else:
        W = np.zeros((cfg.n, 0))

    design = build_design(cfg.T, cfg.treated)
    beta1 = np.asarray(cfg.beta1, dtype=float)
    base_path = design.L @ beta1

    Y = np.empty((cfg.n, cfg.T))
    for s in cfg.cohorts:
        mask = S == s
        n_s = int(mask.sum())
        if n_s == 0:
            continue
        mean_alpha = W[mask] @ np.asarray(cfg.gamma[s], dtype=float)
        alpha = rng.normal(mean_alpha, np.sqrt(cfg.D[s]))
        sd = np.sqrt(np.asarray(cfg.sigma2[s], dtype=float))
        eps = rng.normal(0.0, 1.0, size=(n_s, cfg.T)) * sd
        path = base_path.copy()
        if s > 1:
            path = path + design.L @ np.asarray(cfg.delta[s], dtype=float)
        Y[mask] = alpha[:, None] + path[None, :] + eps

    unit_ids = np.array([f"u{i:05d}" for i in range(cfg.n)])
    period_labels = np.array([str(t) for t in range(1, cfg.T + 1)])
    cov_names = np.array([f"w{j}" for j in range(cfg.d_w)])
    return PanelDataset.from_arrays(
        Y, W, S,
        unit_ids=unit_ids,
        period_labels=period_labels,
        cov_names=cov_names,
    )


def benchmark_dgp(
    n: int = 500,
    zero_pre_trends: bool = False,
    seed: int = 2024,
) -> DgpConfig:
    """Five-period staggered design with cohorts entering at 2, 4, and 5.

    Calibrated to resemble a log-employment panel: outcome levels near
    5.3, idiosyncratic variances near 0.02, and treatment effects of a
    few percent. With ``zero_pre_trends`` the anticipation coordinates
    are zeroed so the restricted variant is correctly specified.
    """
    delta = {
        2: (0.0, -0.012, -0.020, -0.021, -0.018),
        4: (0.0, 0.100, -0.095, -0.045, -0.028),
        5: (0.0, -0.098, 0.105, 0.072, -0.050),
    }
    if zero_pre_trends:
        delta = {
            s: tuple(0.0 if 0 < j < s - 1 else v for j, v in enumerate(path))
            for s, path in delta.items()
        }
    return DgpConfig(
        name="benchmark-prept" if zero_pre_trends else "benchmark",
        n=n,
        T=5,
        treated=(2, 4, 5),
        probs=(0.4, 0.2, 0.2, 0.2),
        allocation="multinomial",
        w_mean=3.3,
        w_sd=1.0,
        d_w=1,
        beta1=(5.30, 0.020, 0.012, 0.016, 0.010),
        delta=delta,
        gamma={1: (0.31,), 2: (0.30,), 4: (0.32,), 5: (0.29,)},
        sigma2={
            1: (0.020, 0.018, 0.019, 0.021, 0.020),
            2: (0.019, 0.020, 0.018, 0.020, 0.019),
            4: (0.021, 0.019, 0.020, 0.018, 0.021),
            5: (0.018, 0.021, 0.019, 0.020, 0.018),
        },
        D={1: 0.16, 2: 0.14, 4: 0.15, 5: 0.17},
        seed=seed,
    )


def small_n_dgp(n: int = 24, seed: int = 2025) -> DgpConfig:
    """Small balanced panel for shrinkage-prior comparisons.

    Same treatment paths as `benchmark_dgp` but with six units per cohort
    and idiosyncratic variances scaled up so that the likelihood is
    weak relative to an adaptive shrinkage prior.
    """
    base = benchmark_dgp(seed=seed)
    scale = 15.0
    sigma2 = {
        s: tuple(scale * v for v in base.sigma2[s]) for s in base.cohorts
    }
    return dataclasses.replace(
        base,
        name="small-n",
        n=n,
        probs=(0.25, 0.25, 0.25, 0.25),
        allocation="balanced",
        sigma2=sigma2,
    )


def application_dgp(seed: int = 2026) -> DgpConfig:
    """Minimum-wage-style panel: 309/20/40/131 units across cohorts.

    Shapes match the county employment application (five calendar
    years, a log-population covariate, mostly negative effects), with
    exact cohort counts obtained through balanced allocation.
    """
    return DgpConfig(
        name="application",
        n=500,
        T=5,
        treated=(2, 4, 5),
        probs=(0.618, 0.04, 0.08, 0.262),
        allocation="balanced",
        w_mean=3.3,
        w_sd=1.0,
        d_w=1,
        beta1=(5.70, 0.020, -0.010, 0.015, 0.005),
        delta={
            2: (0.0, -0.019, -0.052, -0.055, 0.024),
            4: (0.0, -0.002, 0.001, -0.006, -0.042),
            5: (0.0, 0.036, -0.001, 0.023, -0.062),
        },
        gamma={1: (0.31,), 2: (0.30,), 4: (0.32,), 5: (0.29,)},
        sigma2={
            1: (0.020, 0.018, 0.019, 0.021, 0.020),
            2: (0.019, 0.020, 0.018, 0.020, 0.019),
            4: (0.021, 0.019, 0.020, 0.018, 0.021),
            5: (0.018, 0.021, 0.019, 0.020, 0.018),
        },
        D={1: 0.16, 2: 0.14, 4: 0.15, 5: 0.17},
        seed=seed,
    )


def application_synthetic(seed: int | None = None) -> PanelDataset:
    """The application-shaped panel with calendar period labels."""
    cfg = application_dgp()
    data = generate_dataset(cfg, seed=seed)
    years = np.array([str(y) for y in range(2003, 2003 + cfg.T)])
    return PanelDataset.from_arrays(
        data.Y,
        data.W,
        data.S,
        unit_ids=np.array([f"c{i:05d}" for i in range(data.n)]),
        period_labels=years,
        cov_names=np.array(["lpop"]),
    )


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator entry in a replication study.

    ``kind`` selects the machinery: ``"gibbs"`` runs a posterior
    sampler under ``variant``; ``"ifgls"`` runs the iterated GLS
    estimator; ``"select"`` runs the sampler under both variants and
    keeps the one with the larger marginal likelihood.
    """

    name: str
    kind: str = "gibbs"
    variant: str = "full"
    prior: str = "default"
    rho: float = 1.0
    xi: float = 1.0
    train_fraction: float = 0.15
    inflation: float = 10.0
    n_draws: int = 1000
    burnin: int = 500
    thin: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("gibbs", "ifgls", "select"):
            raise InputError(f"unknown estimator kind {self.kind!r}")
        if self.prior not in ("default", "student_t", "trained"):
            raise InputError(f"unknown prior regime {self.prior!r}")
        if self.kind == "select" and self.prior == "student_t":
            raise DomainError(
                "marginal likelihood selection is unavailable under the "
                "student-t regime"
            )


def default_estimators() -> tuple[EstimatorSpec, ...]:
    return (
        EstimatorSpec(name="bayes", kind="gibbs", variant="full"),
        EstimatorSpec(name="bayes_prept", kind="gibbs", variant="pre_pt"),
        EstimatorSpec(name="bayes_ml", kind="select"),
        EstimatorSpec(name="ifgls", kind="ifgls", variant="full"),
    )


def _chain_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(parts)).generate_state(1)[0])


def _build_prior(spec: EstimatorSpec, data: PanelDataset, treated, seed: int):
    if spec.prior == "student_t":
        return student_t_prior(data.T, data.d_w, treated, rho=spec.rho, xi=spec.xi)
    base = default_prior(data.T, data.d_w, treated)
    if spec.prior == "trained":
        train, estimate = split_training(data, spec.train_fraction, seed)
        prior = training_prior(
            train,
            base,
            inflation=spec.inflation,
            variant=spec.variant,
        )
        return prior, estimate
    return base


def _fit_estimator(
    spec: EstimatorSpec,
    data: PanelDataset,
    design: DesignSet,
    seed: int,
) -> tuple[AttTable, str | None]:
    """Fit one estimator; returns its table and the selected variant."""
    treated = tuple(data.cohorts)
    if spec.kind == "ifgls":
        fit = ifgls_fit(data, design, variant=spec.variant, cfg=IfglsConfig())
        if not fit.converged:
            raise EstimationError("iterated GLS did not converge")
        return fit.att, None

    if spec.kind == "select":
        prior = default_prior(data.T, data.d_w, treated)
        best = None
        for j, variant in enumerate(("full", "pre_pt")):
            cfg = GibbsConfig(
                n_draws=spec.n_draws,
                burnin=spec.burnin,
                thin=spec.thin,
                seed=_chain_seed(seed, j),
                variant=variant,
            )
            draws = run_chain(data, design, prior, cfg)
            result = log_marginal_likelihood(
                data, design, prior, draws,
                cfg=MarglikConfig(n_reduced=400, burnin=200),
                seed=_chain_seed(seed, j, 7),
            )
            cand = (result.log_marglik, variant, draws)
            if best is None or cand[0] > best[0]:
                best = cand
        _, variant, draws = best
        return summarize(draws, design), variant

    fit_data = data
    built = _build_prior(spec, data, treated, _chain_seed(seed, 11))
    if isinstance(built, tuple):
        prior, fit_data = built
    else:
        prior = built
    cfg = GibbsConfig(
        n_draws=spec.n_draws,
        burnin=spec.burnin,
        thin=spec.thin,
        seed=_chain_seed(seed, 3),
        variant=spec.variant,
    )
    draws = run_chain(fit_data, design, prior, cfg)
    return summarize(draws, design), None


def _replicate(args) -> dict:
    """Run every estimator on one replication; module level so it pickles."""
    cfg, specs, base_seed, r = args
    data = generate_dataset(cfg, seed=base_seed + r)
    design = build_design(cfg.T, cfg.treated)
    cells = cfg.att_cells()
    out: dict = {"r": r, "estimates": {}, "selected": {}, "failed": {}}
    for j, spec in enumerate(specs):
        seed = _chain_seed(base_seed, r, j)
        try:
            table, selected = _fit_estimator(spec, data, design, seed)
        except (EstimationError, np.linalg.LinAlgError) as exc:
            out["failed"][spec.name] = str(exc)
            continue
        rows = np.array(
            [
                [table.lookup(s, t).point, table.lookup(s, t).lo95,
                 table.lookup(s, t).hi95]
                for (s, t) in cells
            ]
        )
        out["estimates"][spec.name] = rows
        if selected is not None:
            out["selected"][spec.name] = selected
    return out


def aggregate_metrics(
    points: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    truth: np.ndarray,
) -> dict[str, np.ndarray]:
    """Score a stack of replications against the truth.

    Parameters
    ----------
    points, lo, hi : ndarray, shape (R, n_cells)
        Point estimates and interval endpoints per replication.
    truth : ndarray, shape (n_cells,)
        True values.

    Returns
    -------
    dict
        Arrays over cells keyed ``"Bias"`` (mean absolute error),
        ``"RMSE"``, ``"Cov"`` (interval coverage), and ``"IL"`` (mean
        interval length).
    """
    err = points - truth[None, :]
    return {
        "Bias": np.mean(np.abs(err), axis=0),
        "RMSE": np.sqrt(np.mean(err**2, axis=0)),
        "Cov": np.mean((lo <= truth[None, :]) & (truth[None, :] <= hi), axis=0),
        "IL": np.mean(hi - lo, axis=0),
    }


@dataclass
class SimulationReport:
    """Aggregated scores from a replication study."""

    dgp_name: str
    n_reps: int
    base_seed: int
    cells: tuple[tuple[int, int], ...]
    truth: dict[tuple[int, int], float]
    estimators: tuple[str, ...]
    metrics: dict[str, dict[str, np.ndarray]]
    n_used: dict[str, int]
    failures: dict[str, int]
    selection_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    pre_trend_pvalue: str = "NA"

    def metric(self, estimator: str, name: str, s: int, t: int) -> float:
        idx = self.cells.index((s, t))
        return float(self.metrics[estimator][name][idx])

    def to_frame(self) -> pd.DataFrame:
        cols: dict[str, list] = {
            "cohort": [s for s, _ in self.cells],
            "period": [t for _, t in self.cells],
            "truth": [self.truth[c] for c in self.cells],
        }
        for name in self.estimators:
            for metric in _METRICS:
                cols[f"{name}:{metric}"] = list(self.metrics[name][metric])
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def sidecar(self) -> dict:
        return {
            "dgp": self.dgp_name,
            "n_reps": self.n_reps,
            "base_seed": self.base_seed,
            "estimators": list(self.estimators),
            "replications_used": dict(self.n_used),
            "failures": dict(self.failures),
            "selection_counts": {
                k: dict(v) for k, v in self.selection_counts.items()
            },
            "pre_trend_pvalue": self.pre_trend_pvalue,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)


def run_replications(
    cfg: DgpConfig,
    estimators: tuple[EstimatorSpec, ...] | None = None,
    n_reps: int = 100,
    base_seed: int = 0,
    jobs: int = 1,
) -> SimulationReport:
    """Repeatedly simulate, fit every estimator, and aggregate scores.

    Replication ``r`` draws its dataset with seed ``base_seed + r``.
    Estimator failures are counted and the affected replications are
    excluded from that estimator's aggregates. With ``jobs > 1``
    replications run in parallel processes; results are merged in
    replication order so the output does not depend on scheduling.
    """
    if estimators is None:
        estimators = default_estimators()
    names = [spec.name for spec in estimators]
    if len(set(names)) != len(names):
        raise InputError("estimator names must be unique")

    tasks = [(cfg, estimators, base_seed, r) for r in range(n_reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replicate, tasks, chunksize=1))
    else:
        results = [_replicate(t) for t in tasks]

    cells = cfg.att_cells()
    truth_map = cfg.att_truth()
    truth = np.array([truth_map[c] for c in cells])

    metrics: dict[str, dict[str, np.ndarray]] = {}
    n_used: dict[str, int] = {}
    failures: dict[str, int] = {}
    selection: dict[str, dict[str, int]] = {}
    for spec in estimators:
        stacks = [res["estimates"][spec.name] for res in results
                  if spec.name in res["estimates"]]
        failures[spec.name] = sum(
            1 for res in results if spec.name in res["failed"]
        )
        n_used[spec.name] = len(stacks)
        if stacks:
            arr = np.stack(stacks)
            metrics[spec.name] = aggregate_metrics(
                arr[:, :, 0], arr[:, :, 1], arr[:, :, 2], truth
            )
        else:
            nan = np.full(len(cells), np.nan)
            metrics[spec.name] = {m: nan.copy() for m in _METRICS}
        if spec.kind == "select":
            counts = {"full": 0, "pre_pt": 0}
            for res in results:
                pick = res["selected"].get(spec.name)
                if pick is not None:
                    counts[pick] += 1
            selection[spec.name] = counts

    return SimulationReport(
        dgp_name=cfg.name,
        n_reps=n_reps,
        base_seed=base_seed,
        cells=cells,
        truth={c: float(truth_map[c]) for c in cells},
        estimators=tuple(names),
        metrics=metrics,
        n_used=n_used,
        failures=failures,
        selection_counts=selection,
    )
