"""Marginal likelihood pieces and the parameter-to-effect mapping.

After integrating out a unit's random intercept, its outcome vector is
Gaussian with covariance Lambda = diag(sigma^2) + D * ones * ones'. That
rank-one structure gives a closed-form inverse (Sherman-Morrison) and log
determinant (matrix determinant lemma), used everywhere likelihoods or GLS
weights are needed. The treatment-effect mapping is a cumulative sum of the
cohort's increment differences: ATT(s,t) sums them from the treatment period,
the pre-treatment diagnostic sums them from period 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .design import DesignSet
from .errors import DimensionError, DomainError

LOG2PI = math.log(2.0 * math.pi)


def lambda_inverse(sigma2_s: np.ndarray, D_s: float) -> tuple[np.ndarray, float]:
    """Inverse and log-determinant of diag(sigma2) + D * ones*ones'.

    Sherman-Morrison:  Lambda^-1 = Sigma^-1 - (Sigma^-1 1 1' Sigma^-1) / (1/D + 1'Sigma^-1 1)
    Determinant lemma: log det Lambda = sum log sigma2 + log(1 + D * 1'Sigma^-1 1)

    D_s = 0 is permitted and returns the plain diagonal inverse (the GLS path
    hits this at its variance floor).
    """
    sigma2_s = np.asarray(sigma2_s, dtype=float)
    if np.any(sigma2_s <= 0.0) or not np.all(np.isfinite(sigma2_s)):
        raise DomainError("sigma2 entries must be positive and finite")
    if D_s < 0.0 or not np.isfinite(D_s):
        raise DomainError(f"D must be nonnegative and finite, got {D_s}")
    u = 1.0 / sigma2_s
    logdet_sigma = float(np.sum(np.log(sigma2_s)))
    if D_s == 0.0:
        return np.diag(u), logdet_sigma
    usum = float(u.sum())
    inv = np.diag(u) - np.outer(u, u) / (1.0 / D_s + usum)
    logdet = logdet_sigma + math.log1p(D_s * usum)
    return inv, logdet


@dataclass
class ModelParams:
    """Full parameter vector theta, with optional augmented state.

    ``delta`` entries are stored as length-T vectors with structural zeros in
    the non-free coordinates, so the design algebra never needs the layout.
    ``alpha`` (unit intercepts) and ``vdelta`` (Student-t local variances) are
    present only when the producing algorithm carries them.
    """

    beta1: np.ndarray
    delta: dict[int, np.ndarray]
    gamma: dict[int, np.ndarray]
    sigma2: dict[int, np.ndarray]
    D: dict[int, float]
    alpha: np.ndarray | None = None
    vdelta: dict[int, np.ndarray] | None = None

    def validate(self, layout=None) -> None:
        for s, v in self.sigma2.items():
            if np.any(np.asarray(v) <= 0):
                raise DomainError(f"sigma2 for cohort {s} must be positive")
        for s, v in self.D.items():
            if v <= 0:
                raise DomainError(f"D for cohort {s} must be positive")
        if self.vdelta is not None:
            for s, v in self.vdelta.items():
                if np.any(np.asarray(v) <= 0):
                    raise DomainError(f"vdelta for cohort {s} must be positive")
        if layout is not None:
            for s, vec in self.delta.items():
                free = set(layout.free_delta_idx[s])
                fixed = [t for t in range(1, layout.T + 1) if t not in free]
                if any(vec[t - 1] != 0.0 for t in fixed):
                    raise DomainError(
                        f"delta for cohort {s} has nonzero fixed coordinates"
                    )


def marginal_loglik(theta: ModelParams, d, design: DesignSet) -> float:
    """Log-likelihood with unit intercepts integrated out analytically.

    Sums Gaussian log densities N(y_i | 1 w_i'gamma_s + L beta1 + L delta_s,
    Lambda_s) over units, cohort by cohort. Never-treated units carry no delta
    term.
    """
    if theta.beta1.shape != (design.T,):
        raise DimensionError(
            f"beta1 has shape {theta.beta1.shape}, expected ({design.T},)"
        )
    if not np.all(np.isfinite(d.Y)):
        raise DomainError("nonfinite outcome in dataset")
    total = 0.0
    base = design.L @ theta.beta1
    for s in (1,) + d.cohorts:
        rows = d.units_of(s)
        if rows.size == 0:
            continue
        mean = base if s == 1 else base + design.L @ theta.delta[s]
        lam_inv, logdet = lambda_inverse(theta.sigma2[s], theta.D[s])
        R = d.Y[rows] - mean
        if d.d_w:
            R = R - (d.W[rows] @ theta.gamma[s])[:, None]
        quad = float(np.sum((R @ lam_inv) * R))
        total += -0.5 * (rows.size * (design.T * LOG2PI + logdet) + quad)
    return total


def att_from_delta(delta_s: np.ndarray, s: int, design: DesignSet) -> np.ndarray:
    """ATT path for cohort s: entry t is sum_{k=s}^t delta_sk, zero before s."""
    delta_s = np.asarray(delta_s, dtype=float)
    if delta_s.shape != (design.T,):
        raise DimensionError(f"delta has shape {delta_s.shape}, expected ({design.T},)")
    if s == 1:
        return np.zeros(design.T)
    return design.post[s] @ delta_s


def predid_from_delta(delta_s: np.ndarray, s: int) -> np.ndarray:
    """Pre-treatment cumulative differences, for t in 2..s-1 (empty for s=2)."""
    delta_s = np.asarray(delta_s, dtype=float)
    if s <= 2:
        return np.zeros(0)
    return np.cumsum(delta_s[1 : s - 1])


@dataclass(frozen=True)
class AttRow:
    cohort: int
    period: int
    kind: str  # "ATT" or "PreDiD"
    point: float
    spread: float
    lo95: float
    hi95: float


@dataclass
class AttTable:
    """Effect estimates per (cohort, period) with spread and 95% interval.

    The same schema is produced by the Bayesian and GLS paths; ``spread`` is a
    posterior SD or a delta-method SE respectively.
    """

    rows: list[AttRow]
    variant: str = "full"

    COLUMNS = ("cohort", "period", "kind", "point", "spread", "lo95", "hi95")

    def lookup(self, s: int, t: int) -> AttRow:
        for row in self.rows:
            if row.cohort == s and row.period == t:
                return row
        raise KeyError(f"no row for cohort {s}, period {t}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.rows], columns=list(self.COLUMNS))

    def to_csv(self, path) -> None:
        df = self.to_frame()
        df.insert(0, "variant", self.variant)
        df.to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path) -> "AttTable":
        df = pd.read_csv(path, float_precision="round_trip")
        rows = [
            AttRow(
                int(r.cohort),
                int(r.period),
                str(r.kind),
                float(r.point),
                float(r.spread),
                float(r.lo95),
                float(r.hi95),
            )
            for r in df.itertuples()
        ]
        variant = str(df["variant"].iloc[0]) if "variant" in df.columns else "full"
        return cls(rows=rows, variant=variant)
