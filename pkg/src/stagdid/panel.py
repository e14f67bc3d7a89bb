"""Balanced-panel ingestion, validation, and stratified splitting.

Input format is long CSV with columns ``unit,period,outcome,first_treat`` plus
optional ``cov_*`` baseline covariates. ``first_treat`` holds the period of
first treatment (0 for never treated) and must be constant within unit;
treatment is absorbing, so a unit that flips back violates the format. Periods
may be calendar years; they are remapped to 1..T by rank, and never-treated
units get cohort label 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import (
    AbsorbingViolationError,
    DomainError,
    IdentificationError,
    SchemaError,
    SplitError,
    UnbalancedPanelError,
)

DEFAULT_SCHEMA = {
    "unit": "unit",
    "period": "period",
    "outcome": "outcome",
    "first_treat": "first_treat",
}


@dataclass(frozen=True)
class PanelDataset:
    """Balanced n x T outcome panel with cohort labels and baseline covariates.

    Attributes
    ----------
    Y : ndarray, shape (n, T)
        Outcomes, units in rows ordered by (cohort, unit id).
    W : ndarray, shape (n, d_w)
        Baseline covariates; no constant column. May have zero columns.
    S : ndarray, shape (n,)
        Cohort label per unit: 1 for never treated, else the first treatment
        period in 2..T.
    cohorts : tuple
        Sorted treated cohort labels present in S.
    unit_ids, period_labels, cov_names
        Original identifiers, kept so written files round-trip.
    """

    n: int
    T: int
    Y: np.ndarray
    W: np.ndarray
    S: np.ndarray
    cohorts: tuple[int, ...]
    unit_ids: np.ndarray
    period_labels: np.ndarray
    cov_names: tuple[str, ...]

    @classmethod
    def from_arrays(
        cls,
        Y,
        W,
        S,
        unit_ids=None,
        period_labels=None,
        cov_names=None,
        validate: bool = True,
    ) -> "PanelDataset":
        """Build a dataset from arrays, checking invariants unless disabled.

        ``validate=False`` is an escape hatch for diagnostic code that needs
        degenerate datasets (for instance an empty panel to exercise prior-only
        sampling); everything user-facing goes through the checked path.
        """
        Y = np.asarray(Y, dtype=float)
        W = np.asarray(W, dtype=float)
        S = np.asarray(S, dtype=int)
        if Y.ndim != 2:
            raise UnbalancedPanelError("Y must be a 2-d units-by-periods array")
        n, T = Y.shape
        if W.ndim != 2 or W.shape[0] != n or S.shape != (n,):
            raise SchemaError("W and S must align with Y's unit dimension")
        if unit_ids is None:
            unit_ids = np.arange(n)
        if period_labels is None:
            period_labels = np.arange(1, T + 1)
        if cov_names is None:
            cov_names = tuple(f"cov_{j}" for j in range(W.shape[1]))
        unit_ids = np.asarray(unit_ids)
        period_labels = np.asarray(period_labels)
        if validate:
            if n == 0:
                raise IdentificationError("empty panel")
            if not np.isfinite(Y).all():
                raise DomainError("nonfinite outcome value")
            if not np.any(S == 1):
                raise IdentificationError("no never-treated units (cohort 1)")
            bad = S[(S != 1) & ((S < 2) | (S > T))]
            if bad.size:
                raise IdentificationError(
                    f"cohort labels outside {{1}} U {{2..{T}}}: {sorted(set(bad))}"
                )
            for j in range(W.shape[1]):
                if np.ptp(W[:, j]) == 0.0:
                    raise IdentificationError(
                        f"covariate column {cov_names[j]!r} is constant; "
                        "constant columns are excluded for identification"
                    )
        cohorts = tuple(sorted(set(int(s) for s in S if s != 1)))
        order = np.lexsort((unit_ids.astype(str), S))
        return cls(
            n=n,
            T=T,
            Y=Y[order],
            W=W[order],
            S=S[order],
            cohorts=cohorts,
            unit_ids=unit_ids[order],
            period_labels=period_labels,
            cov_names=tuple(cov_names),
        )

    @property
    def d_w(self) -> int:
        return self.W.shape[1]

    @property
    def cohort_sizes(self) -> dict[int, int]:
        sizes = {1: int(np.sum(self.S == 1))}
        for s in self.cohorts:
            sizes[s] = int(np.sum(self.S == s))
        return sizes

    def units_of(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.S == s)

    def subset(self, idx: np.ndarray) -> "PanelDataset":
        """Dataset restricted to the given unit positions."""
        return PanelDataset.from_arrays(
            self.Y[idx],
            self.W[idx],
            self.S[idx],
            unit_ids=self.unit_ids[idx],
            period_labels=self.period_labels,
            cov_names=self.cov_names,
        )


@dataclass
class ValidationReport:
    ok: bool
    issues: list[tuple[str, str, str]]
    cohort_sizes: dict[int, int]


def load_panel(path, schema: dict | None = None) -> PanelDataset:
    """Read a long-format CSV into a PanelDataset.

    Parameters
    ----------
    path : str or Path
        CSV file with a header row.
    schema : dict, optional
        Overrides for the role-to-column map; keys "unit", "period",
        "outcome", "first_treat", and optionally "covariates" (explicit list
        of covariate columns; default is every column named ``cov_*``).
    """
    cols = dict(DEFAULT_SCHEMA)
    cov_cols: list[str] | None = None
    if schema:
        cov_cols = schema.get("covariates")
        cols.update({k: v for k, v in schema.items() if k in cols})
    df = pd.read_csv(path)
    missing = [c for c in cols.values() if c not in df.columns]
    if missing:
        raise SchemaError(f"missing required columns: {missing}")
    if cov_cols is None:
        cov_cols = [c for c in df.columns if c.startswith("cov_")]
    else:
        absent = [c for c in cov_cols if c not in df.columns]
        if absent:
            raise SchemaError(f"covariate columns not found: {absent}")

    periods = np.sort(df[cols["period"]].unique())
    T = len(periods)
    period_rank = {p: k + 1 for k, p in enumerate(periods)}
    units = df[cols["unit"]].unique()
    n = len(units)
    if len(df) != n * T:
        raise UnbalancedPanelError(
            f"{len(df)} rows for {n} units x {T} periods; panel must be balanced"
        )

    Y = np.empty((n, T))
    W = np.empty((n, len(cov_cols)))
    S = np.empty(n, dtype=int)
    for k, (uid, g) in enumerate(df.groupby(cols["unit"], sort=False)):
        if len(g) != T or set(g[cols["period"]]) != set(periods):
            raise UnbalancedPanelError(f"unit {uid!r} does not cover every period once")
        ft = g[cols["first_treat"]].unique()
        if len(ft) != 1:
            raise AbsorbingViolationError(
                f"unit {uid!r} changes first_treat within the panel; "
                "treatment must be absorbing"
            )
        ft = ft[0]
        if ft == 0:
            S[k] = 1
        elif ft in period_rank:
            s = period_rank[ft]
            if s == 1:
                raise IdentificationError(
                    f"unit {uid!r} treated in the first period; no pre-period exists"
                )
            S[k] = s
        else:
            raise DomainError(
                f"unit {uid!r} has first_treat={ft!r}, not 0 or an observed period"
            )
        g = g.sort_values(cols["period"])
        Y[k] = g[cols["outcome"]].to_numpy(dtype=float)
        for c in cov_cols:
            vals = g[c].unique()
            if len(vals) != 1:
                raise DomainError(
                    f"covariate {c!r} varies over time for unit {uid!r}; "
                    "only baseline covariates are supported"
                )
        if cov_cols:
            W[k] = g.iloc[0][cov_cols].to_numpy(dtype=float)

    return PanelDataset.from_arrays(
        Y, W, S, unit_ids=units, period_labels=periods, cov_names=tuple(cov_cols)
    )


def write_panel(d: PanelDataset, path) -> None:
    """Write the long-CSV inverse of load_panel (numeric round trip)."""
    rows = []
    for i in range(d.n):
        s = int(d.S[i])
        ft = 0 if s == 1 else d.period_labels[s - 1]
        for t in range(d.T):
            rows.append(
                [d.unit_ids[i], d.period_labels[t], repr(float(d.Y[i, t])), ft]
                + [repr(float(v)) for v in d.W[i]]
            )
    header = ["unit", "period", "outcome", "first_treat"] + list(d.cov_names)
    pd.DataFrame(rows, columns=header).to_csv(path, index=False)


def validate(d: PanelDataset, min_cohort: int = 5) -> ValidationReport:
    """Report data issues; small cohorts warn but never fail."""
    issues: list[tuple[str, str, str]] = []
    sizes = d.cohort_sizes
    for s, n_s in sizes.items():
        if n_s <= min_cohort:
            issues.append(
                (
                    "warning",
                    "small-cohort",
                    f"cohort {s} has {n_s} units (<= {min_cohort}); "
                    "estimates may be fragile",
                )
            )
    ok = not any(sev == "error" for sev, _, _ in issues)
    return ValidationReport(ok=ok, issues=issues, cohort_sizes=sizes)


def split_training(
    d: PanelDataset, fraction: float, seed: int
) -> tuple[PanelDataset, PanelDataset]:
    """Stratified train/estimate partition for the training-prior workflow.

    Within each cohort, ceil(fraction * n_s) units (at least 1, at most
    n_s - 1) are drawn into the training part; the split is deterministic in
    the seed.
    """
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"fraction must be in (0,1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx = []
    est_idx = []
    for s in (1,) + d.cohorts:
        members = d.units_of(s)
        n_s = len(members)
        if n_s < 2:
            raise SplitError(f"cohort {s} has {n_s} unit(s); need at least 2 to split")
        k = min(max(1, math.ceil(fraction * n_s)), n_s - 1)
        perm = rng.permutation(n_s)
        train_idx.append(members[perm[:k]])
        est_idx.append(members[perm[k:]])
    train_idx = np.concatenate(train_idx)
    est_idx = np.concatenate(est_idx)
    return d.subset(train_idx), d.subset(est_idx)
