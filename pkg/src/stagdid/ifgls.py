"""Iterated feasible GLS: joint mean updates, BLUP effects, variance updates.

The mean parameters (beta1, all gamma_s, all free delta coordinates) are
stacked into one vector and solved jointly from the normal equations
A(Lambda^-1) theta = b(Lambda^-1), where each cohort contributes quadratic
forms built from its marginal covariance. Unit effects are then predicted by
BLUP, variance components re-estimated in closed form, and the cycle repeats
until the max-norm change of (theta, sigma2, D) falls below tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .design import DesignSet, ParamLayout, build_layout
from .errors import DomainError, SingularSystemError
from .model import AttRow, AttTable, lambda_inverse

SIGMA2_FLOOR = 1e-8
D_FLOOR = 0.0


@dataclass(frozen=True)
class IfglsConfig:
    max_iter: int = 200
    tol: float = 1e-8
    sigma2_floor: float = SIGMA2_FLOOR
    d_floor: float = D_FLOOR

    def __post_init__(self):
        if self.max_iter < 1:
            raise DomainError("max_iter must be >= 1")
        if self.sigma2_floor <= 0:
            raise DomainError("sigma2 floor must be positive")
        if self.d_floor < 0:
            raise DomainError("D floor must be nonnegative")


@dataclass
class IfglsEstimate:
    """Stacked GLS solution with variance components and ATT inference.

    ``theta`` follows the layout order (beta1, gamma per cohort, free delta
    coordinates per treated cohort); ``cov`` is the final GLS system inverse.
    """

    theta: np.ndarray
    cov: np.ndarray
    layout: ParamLayout
    sigma2: dict[int, np.ndarray]
    D: dict[int, float]
    iterations: int
    converged: bool
    trace: tuple[float, ...] = ()
    att: AttTable | None = None

    @property
    def beta1(self) -> np.ndarray:
        return self.theta[self.layout.beta1_sl]

    def gamma(self, s: int) -> np.ndarray:
        return self.theta[self.layout.gamma_sl[s]]

    def delta(self, s: int) -> np.ndarray:
        """Length-T increment differences with structural zeros restored."""
        out = np.zeros(self.layout.T)
        free0 = np.array(self.layout.free_delta_idx[s]) - 1
        out[free0] = self.theta[self.layout.delta_sl[s]]
        return out

    def to_json_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "layout": {
                "T": self.layout.T,
                "treated": list(self.layout.treated),
                "d_w": self.layout.d_w,
                "variant": self.layout.variant,
            },
            "sigma2": {str(s): v.tolist() for s, v in self.sigma2.items()},
            "D": {str(s): float(v) for s, v in self.D.items()},
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": list(self.trace),
        }


def _block_name(layout: ParamLayout, index: int) -> str:
    if layout.beta1_sl.start <= index < layout.beta1_sl.stop:
        return "beta1"
    for s, sl in layout.gamma_sl.items():
        if sl.start <= index < sl.stop:
            return f"gamma[s={s}]"
    for s, sl in layout.delta_sl.items():
        if sl.start <= index < sl.stop:
            return f"delta[s={s}]"
    return f"coordinate {index}"


def gls_update(data, design: DesignSet, lam_inv: dict[int, np.ndarray],
               layout: ParamLayout) -> tuple[np.ndarray, np.ndarray]:
    """One joint GLS solve given per-cohort inverse marginal covariances.

    Returns (theta_hat, cov) with cov the inverse of the stacked system. A
    singular system raises with the name of the block that cannot be
    identified.
    """
    p = layout.total_dim
    A = np.zeros((p, p))
    b = np.zeros(p)
    L = design.L
    bsl = layout.beta1_sl
    for s in (1,) + layout.treated:
        rows = data.units_of(s)
        n_s = rows.size
        if n_s == 0:
            continue
        li = lam_inv[s]
        Y_s = data.Y[rows]
        sum_y = Y_s.sum(axis=0)
        LtLi = L.T @ li
        A[bsl, bsl] += n_s * (LtLi @ L)
        b[bsl] += LtLi @ sum_y
        if layout.d_w:
            gsl = layout.gamma_sl[s]
            W_s = data.W[rows]
            sum_w = W_s.sum(axis=0)
            one_li = li.sum(axis=0)          # 1' Lambda^-1
            c = float(one_li.sum())          # 1' Lambda^-1 1
            A[bsl, gsl] += np.outer(LtLi.sum(axis=1), sum_w)
            A[gsl, bsl] += np.outer(sum_w, L.T @ one_li)
            A[gsl, gsl] += c * (W_s.T @ W_s)
            b[gsl] += W_s.T @ (Y_s @ one_li)
        if s != 1:
            dsl = layout.delta_sl[s]
            free0 = np.array(layout.free_delta_idx[s]) - 1
            Lf = L[:, free0]
            LtLiF = LtLi @ Lf
            A[bsl, dsl] += n_s * LtLiF
            A[dsl, bsl] += n_s * LtLiF.T
            A[dsl, dsl] += n_s * (Lf.T @ li @ Lf)
            b[dsl] += Lf.T @ li @ sum_y
            if layout.d_w:
                gsl = layout.gamma_sl[s]
                one_li_Lf = Lf.T @ li.sum(axis=0)
                A[gsl, dsl] += np.outer(sum_w, one_li_Lf)
                A[dsl, gsl] += np.outer(one_li_Lf, sum_w)
    eigval, eigvec = np.linalg.eigh(A)
    threshold = p * np.finfo(float).eps * max(float(eigval.max()), 1.0)
    if float(eigval.min()) <= threshold:
        null = eigvec[:, int(np.argmin(eigval))]
        worst = int(np.argmax(np.abs(null)))
        raise SingularSystemError(
            f"GLS system is singular; {_block_name(layout, worst)} is not "
            "identified by the data",
            block=_block_name(layout, worst),
        )
    cov = np.linalg.inv(A)
    theta = cov @ b
    cov = 0.5 * (cov + cov.T)
    return theta, cov


def blup_alpha(e_si: np.ndarray, sigma2_s: np.ndarray, D_s: float) -> float:
    """Best linear unbiased predictor of one unit's random intercept."""
    u = 1.0 / np.asarray(sigma2_s, dtype=float)
    num = D_s * float(u @ np.asarray(e_si, dtype=float))
    den = 1.0 + D_s * float(u.sum())
    return num / den


def variance_update(resid: np.ndarray, alpha_hat: np.ndarray,
                    cfg: IfglsConfig) -> tuple[np.ndarray, float]:
    """Closed-form variance components for one cohort, floors applied.

    ``resid`` is the n_s x T matrix of mean residuals; divides by n_s exactly
    as printed, with no degrees-of-freedom correction.
    """
    n_s = resid.shape[0]
    if n_s < 1:
        raise DomainError("variance update needs at least one unit")
    dev = resid - alpha_hat[:, None]
    sigma2 = np.maximum((dev * dev).sum(axis=0) / n_s, cfg.sigma2_floor)
    D = max(float(alpha_hat @ alpha_hat) / n_s, cfg.d_floor)
    return sigma2, D


def _mean_residuals(data, design: DesignSet, layout: ParamLayout,
                    theta: np.ndarray, s: int, rows: np.ndarray) -> np.ndarray:
    path = design.L @ theta[layout.beta1_sl]
    if s != 1:
        free0 = np.array(layout.free_delta_idx[s]) - 1
        path = path + design.L[:, free0] @ theta[layout.delta_sl[s]]
    R = data.Y[rows] - path[None, :]
    if layout.d_w:
        R = R - (data.W[rows] @ theta[layout.gamma_sl[s]])[:, None]
    return R


def ifgls_fit(data, design: DesignSet, variant: str = "full",
              cfg: IfglsConfig | None = None) -> IfglsEstimate:
    """Iterate GLS mean updates and variance updates to a joint fixed point.

    Initialization uses the pooled per-period sample variances for sigma2 and
    a moment estimate for D (the mean off-diagonal entry of the within-cohort
    outcome covariance, floored at a small positive multiple of the outcome
    scale). The floor matters: the random-effect predictor is proportional to
    the current D, so an exact zero would reproduce itself on every pass and
    the iteration could never detect intercept heterogeneity. Non-convergence
    within ``max_iter`` returns converged=False with the per-iteration change
    trace rather than raising.
    """
    if cfg is None:
        cfg = IfglsConfig()
    layout = build_layout(design.T, data.cohorts, data.d_w, variant)
    cohorts = (1,) + layout.treated

    base_var = data.Y.var(axis=0, ddof=1) if data.n > 1 else np.ones(design.T)
    sigma2 = {s: np.maximum(base_var.copy(), cfg.sigma2_floor) for s in cohorts}
    d_start_floor = max(1e-3 * float(base_var.mean()), cfg.sigma2_floor)
    D = {}
    for s in cohorts:
        rows = data.units_of(s)
        off_mean = 0.0
        if rows.size >= 2 and design.T >= 2:
            C = np.cov(data.Y[rows], rowvar=False)
            off_mean = float(C.sum() - np.trace(C)) / (design.T * (design.T - 1))
        D[s] = max(off_mean, d_start_floor, cfg.d_floor)

    theta = np.zeros(layout.total_dim)
    cov = np.eye(layout.total_dim)
    trace: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        lam_inv = {s: lambda_inverse(sigma2[s], D[s])[0] for s in cohorts}
        new_theta, cov = gls_update(data, design, lam_inv, layout)
        change = float(np.max(np.abs(new_theta - theta))) if theta.size else 0.0
        theta = new_theta
        new_sigma2 = {}
        new_D = {}
        for s in cohorts:
            rows = data.units_of(s)
            R = _mean_residuals(data, design, layout, theta, s, rows)
            u = 1.0 / sigma2[s]
            den = 1.0 + D[s] * float(u.sum())
            alpha_hat = D[s] * (R @ u) / den
            new_sigma2[s], new_D[s] = variance_update(R, alpha_hat, cfg)
            change = max(change,
                         float(np.max(np.abs(new_sigma2[s] - sigma2[s]))),
                         abs(new_D[s] - D[s]))
        sigma2, D = new_sigma2, new_D
        trace.append(change)
        if change < cfg.tol:
            converged = True
            break

    est = IfglsEstimate(theta=theta, cov=cov, layout=layout, sigma2=sigma2, D=D,
                        iterations=iterations, converged=converged,
                        trace=tuple(trace))
    est.att = delta_method_att(est, design)
    return est


def delta_method_att(fit: IfglsEstimate, design: DesignSet) -> AttTable:
    """ATT and pre-trend rows with delta-method SEs and Wald 95% intervals.

    Each effect is a 0/1 cumulative-sum selector g applied to the stacked
    coefficients, so SE = sqrt(g' cov g) exactly; intervals are point +/- 1.96
    SE.
    """
    layout = fit.layout
    rows = []
    for s in layout.treated:
        free = layout.free_delta_idx[s]
        sl = layout.delta_sl[s]
        for t in range(s, layout.T + 1):
            g = np.zeros(layout.total_dim)
            for j, tt in enumerate(free):
                if s <= tt <= t:
                    g[sl.start + j] = 1.0
            rows.append(_wald_row(s, t, "ATT", fit, g))
        for t in range(2, s):
            g = np.zeros(layout.total_dim)
            for j, tt in enumerate(free):
                if 2 <= tt <= t:
                    g[sl.start + j] = 1.0
            rows.append(_wald_row(s, t, "PreDiD", fit, g))
    return AttTable(rows=tuple(rows), variant=layout.variant)


def _wald_row(s: int, t: int, kind: str, fit: IfglsEstimate, g: np.ndarray) -> AttRow:
    point = float(g @ fit.theta)
    se = float(np.sqrt(max(g @ fit.cov @ g, 0.0)))
    return AttRow(cohort=s, period=t, kind=kind, point=point, spread=se,
                  lo95=point - 1.96 * se, hi95=point + 1.96 * se)
