"""Block Gibbs sampler for the staggered-adoption outcome model.

The chain alternates exact conjugate draws; there is no Metropolis correction
anywhere. The mean blocks (``beta1``, ``delta``) are updated against the
marginal covariance Lambda_s (unit effects integrated out), while the variance
and unit-effect blocks condition on the sampled effects. One sweep updates, in
order: beta1, delta, alpha, sigma2, gamma, D, and (student_t regime) the local
variances of delta. Within that order every draw conditions on the current
value of every other block, so the sweep is a valid partially collapsed
sampler; see the conditional-moment helpers on :class:`ChainDriver` for the
exact formulas.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .design import DesignSet, ParamLayout, build_layout
from .errors import DimensionError, DomainError, EstimationError, SingularSystemError
from .model import AttRow, AttTable, ModelParams, att_from_delta, lambda_inverse, predid_from_delta

_BLOCKS = ("init", "beta1", "delta", "alpha", "sigma2", "gamma", "D", "vdelta")


@dataclass(frozen=True)
class GibbsConfig:
    """Chain settings.

    Parameters
    ----------
    n_draws : int
        Retained draws after burn-in and thinning.
    burnin : int
        Discarded initial sweeps.
    thin : int
        Keep every thin-th sweep, at least 1.
    seed : int
        Root seed; every block consumes its own substream, so draws are
        bitwise reproducible and insensitive to how other blocks consume
        randomness.
    variant : str
        "full" (free delta indices 2..T) or "pre_pt" (free indices s..T).
    """

    n_draws: int = 1000
    burnin: int = 500
    thin: int = 1
    seed: int = 0
    variant: str = "full"

    def __post_init__(self):
        if self.n_draws < 1:
            raise DomainError("n_draws must be >= 1")
        if self.burnin < 0:
            raise DomainError("burnin must be >= 0")
        if self.thin < 1:
            raise DomainError("thin must be >= 1")
        if self.variant not in ("full", "pre_pt"):
            raise DomainError(f"unknown variant {self.variant!r}")


def _substreams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_BLOCKS))
    return {name: np.random.default_rng(ss) for name, ss in zip(_BLOCKS, children)}


def _draw_mvn_precision(prec: np.ndarray, h: np.ndarray, rng: np.random.Generator, block: str):
    """Draw from N(prec^-1 h, prec^-1); returns (draw, mean)."""
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise SingularSystemError(
            f"non-positive-definite precision in {block} update", block=block
        )
    mean = np.linalg.solve(prec, h)
    z = rng.standard_normal(h.shape[0])
    return mean + np.linalg.solve(chol.T, z), mean


def _invgamma_draw(shape, rate, rng: np.random.Generator):
    g = rng.gamma(np.asarray(shape, dtype=float), 1.0 / np.asarray(rate, dtype=float))
    return 1.0 / g


class ChainDriver:
    """Stepwise engine binding one dataset, prior, and chain state.

    Exposes one ``step_*`` method per parameter block and matching
    ``*_conditional`` helpers that return the closed-form conditional moments
    without drawing, which is what the conjugacy oracles and the marginal
    likelihood ordinates consume.
    """

    def __init__(self, data, design: DesignSet, prior, cfg: GibbsConfig,
                 init: ModelParams | None = None, fixed=()):
        self.data = data
        self.design = design
        self.prior = prior
        self.cfg = cfg
        self.fixed = frozenset(fixed)
        unknown = self.fixed - set(_BLOCKS)
        if unknown:
            raise DomainError(f"unknown fixed blocks {sorted(unknown)}")

        self.T = design.T
        if data.T != design.T:
            raise DimensionError(f"data has T={data.T}, design has T={design.T}")
        self.treated = prior.treated
        self.cohorts = prior.cohorts
        for s in data.cohorts:
            if s not in self.cohorts:
                raise DomainError(f"data cohort {s} missing from prior")
        gamma_blocks = getattr(prior, "gamma", {})
        self.d_w = data.d_w if data.n > 0 else (
            len(next(iter(gamma_blocks.values())).mean) if gamma_blocks else 0
        )
        if gamma_blocks and data.n > 0 and data.d_w != len(prior.gamma[self.cohorts[0]].mean):
            raise DimensionError("prior gamma dimension does not match data covariates")
        self.layout = build_layout(self.T, self.treated, self.d_w, cfg.variant)
        self.L = design.L

        # per-cohort data summaries
        self.idx: dict[int, np.ndarray] = {}
        self.Y: dict[int, np.ndarray] = {}
        self.W: dict[int, np.ndarray] = {}
        self.n_s: dict[int, int] = {}
        self.sum_y: dict[int, np.ndarray] = {}
        self.sum_w: dict[int, np.ndarray] = {}
        self.WtW: dict[int, np.ndarray] = {}
        for s in self.cohorts:
            idx = data.units_of(s) if data.n > 0 else np.array([], dtype=int)
            self.idx[s] = idx
            self.n_s[s] = idx.size
            self.Y[s] = data.Y[idx]
            if self.d_w and data.n > 0:
                self.W[s] = data.W[idx]
            else:
                self.W[s] = np.zeros((idx.size, self.d_w))
            self._refresh_cohort_sums(s)

        self.rng = _substreams(cfg.seed)
        self._init_state(init)
        self._lam_cache_stale = True

    # -- setup ------------------------------------------------------------

    def _refresh_cohort_sums(self, s: int) -> None:
        self.sum_y[s] = self.Y[s].sum(axis=0) if self.n_s[s] else np.zeros(self.T)
        self.sum_w[s] = self.W[s].sum(axis=0) if self.d_w else np.zeros(0)
        self.WtW[s] = self.W[s].T @ self.W[s] if self.d_w else np.zeros((0, 0))

    def _init_state(self, init: ModelParams | None) -> None:
        prior = self.prior
        if init is None:
            self.beta1 = prior.beta1.mean.copy()
            self.delta = {}
            for s in self.treated:
                d = np.zeros(self.T)
                free = np.array(self.layout.free_delta_idx[s]) - 1
                mean = prior.delta[s].mean
                d[free] = 0.0 if mean is None else mean[free]
                self.delta[s] = d
            self.gamma = {s: prior.gamma[s].mean.copy() for s in prior.gamma}
            self.sigma2 = {s: prior.sigma2[s].mode() * np.ones(self.T) for s in self.cohorts}
            self.D = {s: float(prior.D[s].mode()) for s in self.cohorts}
            self.alpha = np.zeros(self.data.n)
            if prior.regime == "student_t":
                self.vdelta = {s: np.full(self.T, prior.initial_vdelta()) for s in self.treated}
            else:
                self.vdelta = None
        else:
            self.beta1 = np.asarray(init.beta1, dtype=float).copy()
            self.delta = {s: np.asarray(init.delta[s], dtype=float).copy() for s in self.treated}
            self.gamma = {s: np.asarray(init.gamma[s], dtype=float).copy() for s in init.gamma}
            self.sigma2 = {s: np.asarray(init.sigma2[s], dtype=float).copy() for s in self.cohorts}
            self.D = {s: float(init.D[s]) for s in self.cohorts}
            self.alpha = (np.zeros(self.data.n) if init.alpha is None
                          else np.asarray(init.alpha, dtype=float).copy())
            if prior.regime == "student_t":
                if init.vdelta is not None:
                    self.vdelta = {s: np.asarray(init.vdelta[s], dtype=float).copy()
                                   for s in self.treated}
                else:
                    self.vdelta = {s: np.full(self.T, prior.initial_vdelta())
                                   for s in self.treated}
            else:
                self.vdelta = None
        if self.alpha.shape[0] != self.data.n:
            raise DimensionError("alpha length does not match unit count")

    def load_params(self, params: ModelParams) -> None:
        """Replace the chain state wholesale (used by ordinate replays)."""
        self._init_state(params)
        self._lam_cache_stale = True

    def set_outcomes(self, Y: np.ndarray) -> None:
        """Swap in new outcome data of the same shape (Geweke resimulation)."""
        Y = np.asarray(Y, dtype=float)
        if Y.shape != (self.data.n, self.T):
            raise DimensionError(f"outcome array must be {(self.data.n, self.T)}")
        for s in self.cohorts:
            self.Y[s] = Y[self.idx[s]]
            self._refresh_cohort_sums(s)

    # -- workspace --------------------------------------------------------

    def _refresh_lambda(self) -> None:
        self.u = {}
        self.lam_inv = {}
        self.LtLamL = {}
        self.LtLam = {}
        for s in self.cohorts:
            u = 1.0 / self.sigma2[s]
            lam_inv, _ = lambda_inverse(self.sigma2[s], self.D[s])
            self.u[s] = u
            self.lam_inv[s] = lam_inv
            self.LtLam[s] = self.L.T @ lam_inv
            self.LtLamL[s] = self.LtLam[s] @ self.L
        self._lam_cache_stale = False

    def _ensure_lambda(self) -> None:
        if self._lam_cache_stale:
            self._refresh_lambda()

    def _mean_residual_sum(self, s: int, drop: str) -> np.ndarray:
        """Sum over cohort-s units of y_i minus the mean parts not being updated.

        ``drop`` names the block being updated; its contribution is left out,
        matching the residual convention of setting that block to zero.
        """
        r = self.sum_y[s].copy()
        if self.d_w and s in self.gamma:
            r -= float(self.sum_w[s] @ self.gamma[s])
        if drop != "beta1":
            r -= self.n_s[s] * (self.L @ self.beta1)
        if s != 1 and drop != "delta":
            r -= self.n_s[s] * (self.L @ self.delta[s])
        return r

    # -- conditional moments ----------------------------------------------

    def beta1_conditional(self):
        """Precision and linear term (prec, h) of beta1 given all else."""
        self._ensure_lambda()
        prec = np.diag(1.0 / self.prior.beta1.var)
        h = self.prior.beta1.mean / self.prior.beta1.var
        for s in self.cohorts:
            if self.n_s[s] == 0:
                continue
            prec = prec + self.n_s[s] * self.LtLamL[s]
            h = h + self.LtLam[s] @ self._mean_residual_sum(s, drop="beta1")
        return prec, h

    def delta_conditional(self, s: int):
        """(prec, h, free0) for the free coordinates of delta_s; free0 is 0-based."""
        self._ensure_lambda()
        free0 = np.array(self.layout.free_delta_idx[s]) - 1
        if self.prior.regime == "student_t":
            var = self.vdelta[s][free0]
            mean = np.zeros(free0.size)
        else:
            var = self.prior.delta[s].var[free0]
            mean = self.prior.delta[s].mean[free0]
        prec = np.diag(1.0 / var)
        h = mean / var
        if self.n_s[s] > 0:
            prec = prec + self.n_s[s] * self.LtLamL[s][np.ix_(free0, free0)]
            h = h + (self.LtLam[s] @ self._mean_residual_sum(s, drop="delta"))[free0]
        return prec, h, free0

    def alpha_conditional(self, s: int):
        """Vector of (mean, var) pairs for cohort-s unit effects."""
        self._ensure_lambda()
        path = self.L @ self.beta1
        if s != 1:
            path = path + self.L @ self.delta[s]
        resid = self.Y[s] - path
        b = 1.0 / self.D[s] + float(self.u[s].sum())
        loc = resid @ self.u[s]
        if self.d_w:
            loc = loc + (self.W[s] @ self.gamma[s]) / self.D[s]
        return loc / b, 1.0 / b

    def sigma2_conditional(self, s: int):
        """(shape, rate) arrays over periods for cohort s."""
        blk = self.prior.sigma2[s]
        if self.n_s[s] == 0:
            return blk.shape * np.ones(self.T), blk.rate * np.ones(self.T)
        path = self.L @ self.beta1
        if s != 1:
            path = path + self.L @ self.delta[s]
        E = self.Y[s] - path - self.alpha[self.idx[s]][:, None]
        return blk.shape + 0.5 * self.n_s[s], blk.rate + 0.5 * (E * E).sum(axis=0)

    def gamma_conditional(self, s: int):
        """(prec, h) for gamma_s given the unit effects."""
        blk = self.prior.gamma[s]
        prec = np.diag(1.0 / blk.var)
        h = blk.mean / blk.var
        if self.n_s[s] > 0:
            prec = prec + self.WtW[s] / self.D[s]
            h = h + self.W[s].T @ self.alpha[self.idx[s]] / self.D[s]
        return prec, h

    def gamma_collapsed_conditional(self, s: int):
        """(prec, h) for gamma_s with the unit effects integrated out.

        In the marginal model gamma_s enters the mean as 1 w'gamma_s with
        covariance Lambda_s, so the likelihood contribution is
        (1'Lambda_s^-1 1) W'W on the precision side. Used by the marginal
        likelihood ordinates, where averaging the alpha-conditioned density
        over a slowly mixing alpha chain would waste draws.
        """
        blk = self.prior.gamma[s]
        prec = np.diag(1.0 / blk.var)
        h = blk.mean / blk.var
        if self.n_s[s] > 0:
            self._ensure_lambda()
            one_li = self.lam_inv[s].sum(axis=0)
            c = float(one_li.sum())
            path = self.L @ self.beta1
            if s != 1:
                path = path + self.L @ self.delta[s]
            resid = self.Y[s] - path[None, :]
            prec = prec + c * self.WtW[s]
            h = h + self.W[s].T @ (resid @ one_li)
        return prec, h

    def mean_blocks_joint_conditional(self):
        """Joint (prec, h, slices) for (beta1, all gamma_s) given delta.

        With the unit effects integrated out and delta held at its current
        value, beta1 and every gamma_s are jointly Gaussian; this builds the
        stacked precision and linear term, including the prior blocks. The
        returned slices map "beta1" and each cohort label to its coordinate
        range in the stacked vector.
        """
        self._ensure_lambda()
        d_w = self.d_w
        gamma_cohorts = tuple(self.cohorts) if d_w else ()
        p = self.T + d_w * len(gamma_cohorts)
        prec = np.zeros((p, p))
        h = np.zeros(p)
        bsl = slice(0, self.T)
        slices: dict = {"beta1": bsl}
        prec[bsl, bsl] += np.diag(1.0 / self.prior.beta1.var)
        h[bsl] += self.prior.beta1.mean / self.prior.beta1.var
        off = self.T
        for s in gamma_cohorts:
            sl = slice(off, off + d_w)
            slices[s] = sl
            blk = self.prior.gamma[s]
            prec[sl, sl] += np.diag(1.0 / blk.var)
            h[sl] += blk.mean / blk.var
            off += d_w
        for s in self.cohorts:
            n_s = self.n_s[s]
            if n_s == 0:
                continue
            li = self.lam_inv[s]
            LtLi = self.LtLam[s]
            resid_sum = self.sum_y[s].copy()
            if s != 1:
                resid_sum -= n_s * (self.L @ self.delta[s])
            prec[bsl, bsl] += n_s * self.LtLamL[s]
            h[bsl] += LtLi @ resid_sum
            if d_w:
                sl = slices[s]
                one_li = li.sum(axis=0)
                c = float(one_li.sum())
                LtLi_one = LtLi.sum(axis=1)
                sum_w = self.sum_w[s]
                prec[bsl, sl] += np.outer(LtLi_one, sum_w)
                prec[sl, bsl] += np.outer(sum_w, LtLi_one)
                prec[sl, sl] += c * self.WtW[s]
                R = self.Y[s]
                if s != 1:
                    R = R - (self.L @ self.delta[s])[None, :]
                h[sl] += self.W[s].T @ (R @ one_li)
        return prec, h, slices

    def D_conditional(self, s: int):
        """(shape, rate) for the cohort-s effect variance."""
        blk = self.prior.D[s]
        if self.n_s[s] == 0:
            return float(blk.shape), float(blk.rate)
        dev = self.alpha[self.idx[s]]
        if self.d_w and s in self.gamma:
            dev = dev - self.W[s] @ self.gamma[s]
        return float(blk.shape) + 0.5 * self.n_s[s], float(blk.rate) + 0.5 * float(dev @ dev)

    def vdelta_conditional(self, s: int):
        """(shape, rate, free0) for the latent local variances of delta_s."""
        free0 = np.array(self.layout.free_delta_idx[s]) - 1
        shape = 0.5 * (self.prior.rho + 1.0)
        rate = 0.5 * (self.prior.xi + self.delta[s][free0] ** 2)
        return shape, rate, free0

    # -- draws ------------------------------------------------------------

    def step_beta1(self) -> None:
        prec, h = self.beta1_conditional()
        self.beta1, _ = _draw_mvn_precision(prec, h, self.rng["beta1"], "beta1")

    def step_delta(self, s: int) -> None:
        prec, h, free0 = self.delta_conditional(s)
        draw, _ = _draw_mvn_precision(prec, h, self.rng["delta"], f"delta[s={s}]")
        self.delta[s] = np.zeros(self.T)
        self.delta[s][free0] = draw

    def step_alpha(self, s: int) -> None:
        if self.n_s[s] == 0:
            return
        mean, var = self.alpha_conditional(s)
        z = self.rng["alpha"].standard_normal(self.n_s[s])
        self.alpha[self.idx[s]] = mean + np.sqrt(var) * z

    def step_sigma2(self, s: int) -> None:
        shape, rate = self.sigma2_conditional(s)
        self.sigma2[s] = _invgamma_draw(shape, rate, self.rng["sigma2"])
        self._lam_cache_stale = True

    def step_gamma(self, s: int) -> None:
        prec, h = self.gamma_conditional(s)
        self.gamma[s], _ = _draw_mvn_precision(prec, h, self.rng["gamma"], f"gamma[s={s}]")

    def step_D(self, s: int) -> None:
        shape, rate = self.D_conditional(s)
        self.D[s] = float(_invgamma_draw(shape, rate, self.rng["D"]))
        self._lam_cache_stale = True

    def step_vdelta(self, s: int) -> None:
        shape, rate, free0 = self.vdelta_conditional(s)
        self.vdelta[s][free0] = _invgamma_draw(shape * np.ones(free0.size), rate,
                                               self.rng["vdelta"])

    def sweep(self, sigma_order_reversed: bool = False) -> None:
        """One full update cycle over every non-fixed block."""
        self._ensure_lambda()
        if "beta1" not in self.fixed:
            self.step_beta1()
        if "delta" not in self.fixed:
            for s in self.treated:
                self.step_delta(s)
        if "alpha" not in self.fixed:
            for s in self.cohorts:
                self.step_alpha(s)
        if "sigma2" not in self.fixed:
            order = reversed(self.cohorts) if sigma_order_reversed else self.cohorts
            for s in order:
                self.step_sigma2(s)
        if "gamma" not in self.fixed:
            for s in self.prior.gamma:
                self.step_gamma(s)
        if "D" not in self.fixed:
            for s in self.cohorts:
                self.step_D(s)
        if self.vdelta is not None and "vdelta" not in self.fixed:
            for s in self.treated:
                self.step_vdelta(s)

    # -- helpers ----------------------------------------------------------

    def params(self) -> ModelParams:
        return ModelParams(
            beta1=self.beta1.copy(),
            delta={s: self.delta[s].copy() for s in self.treated},
            gamma={s: self.gamma[s].copy() for s in self.gamma},
            sigma2={s: self.sigma2[s].copy() for s in self.cohorts},
            D=dict(self.D),
            alpha=self.alpha.copy(),
            vdelta=None if self.vdelta is None else {s: self.vdelta[s].copy()
                                                     for s in self.treated},
        )

    def simulate_outcomes(self, rng: np.random.Generator) -> np.ndarray:
        """Outcome resimulation at the current state (unit effects included)."""
        Y = np.empty((self.data.n, self.T))
        for s in self.cohorts:
            if self.n_s[s] == 0:
                continue
            path = self.L @ self.beta1
            if s != 1:
                path = path + self.L @ self.delta[s]
            mean = self.alpha[self.idx[s]][:, None] + path[None, :]
            noise = rng.standard_normal((self.n_s[s], self.T)) * np.sqrt(self.sigma2[s])
            Y[self.idx[s]] = mean + noise
        return Y


def sample_prior_params(prior, layout: ParamLayout, data, rng: np.random.Generator) -> ModelParams:
    """One exact joint draw from the prior, including unit effects.

    Under the student_t regime the local variances are drawn first and the
    delta coordinates follow their conditional normal.
    """
    T = layout.T
    beta1 = prior.beta1.mean + np.sqrt(prior.beta1.var) * rng.standard_normal(T)
    vdelta = None
    if prior.regime == "student_t":
        vdelta = {}
    delta = {}
    for s in layout.treated:
        free = np.array(layout.free_delta_idx[s]) - 1
        d = np.zeros(T)
        if prior.regime == "student_t":
            v = np.full(T, prior.initial_vdelta())
            v[free] = _invgamma_draw(np.full(free.size, prior.rho / 2.0),
                                     np.full(free.size, prior.xi / 2.0), rng)
            vdelta[s] = v
            d[free] = np.sqrt(v[free]) * rng.standard_normal(free.size)
        else:
            blk = prior.delta[s]
            d[free] = blk.mean[free] + np.sqrt(blk.var[free]) * rng.standard_normal(free.size)
        delta[s] = d
    gamma = {s: blk.mean + np.sqrt(blk.var) * rng.standard_normal(blk.mean.size)
             for s, blk in prior.gamma.items()}
    sigma2 = {s: _invgamma_draw(blk.shape * np.ones(T), blk.rate * np.ones(T), rng)
              for s, blk in prior.sigma2.items()}
    D = {s: float(_invgamma_draw(blk.shape, blk.rate, rng)) for s, blk in prior.D.items()}
    alpha = np.zeros(data.n)
    for s in prior.cohorts:
        idx = data.units_of(s)
        if idx.size == 0:
            continue
        loc = data.W[idx] @ gamma[s] if (data.d_w and s in gamma) else np.zeros(idx.size)
        alpha[idx] = loc + np.sqrt(D[s]) * rng.standard_normal(idx.size)
    return ModelParams(beta1=beta1, delta=delta, gamma=gamma, sigma2=sigma2, D=D,
                       alpha=alpha, vdelta=vdelta)


@dataclass
class PosteriorDraws:
    """Retained draws of every block, stacked draw-major."""

    beta1: np.ndarray                      # (G, T)
    delta: dict[int, np.ndarray]           # s -> (G, T), fixed coords zero
    gamma: dict[int, np.ndarray]           # s -> (G, d_w)
    sigma2: dict[int, np.ndarray]          # s -> (G, T)
    D: dict[int, np.ndarray]               # s -> (G,)
    alpha: np.ndarray                      # (G, n)
    vdelta: dict[int, np.ndarray] | None
    layout: ParamLayout
    config: GibbsConfig
    regime: str
    stream_positions: dict[str, int] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.beta1.shape[0]

    def param_at(self, g: int) -> ModelParams:
        return ModelParams(
            beta1=self.beta1[g],
            delta={s: self.delta[s][g] for s in self.delta},
            gamma={s: self.gamma[s][g] for s in self.gamma},
            sigma2={s: self.sigma2[s][g] for s in self.sigma2},
            D={s: float(self.D[s][g]) for s in self.D},
            alpha=self.alpha[g],
            vdelta=None if self.vdelta is None else {s: self.vdelta[s][g]
                                                     for s in self.vdelta},
        )

    def posterior_mean_params(self) -> ModelParams:
        """Posterior means of the model blocks (unit effects excluded)."""
        return ModelParams(
            beta1=self.beta1.mean(axis=0),
            delta={s: self.delta[s].mean(axis=0) for s in self.delta},
            gamma={s: self.gamma[s].mean(axis=0) for s in self.gamma},
            sigma2={s: self.sigma2[s].mean(axis=0) for s in self.sigma2},
            D={s: float(self.D[s].mean()) for s in self.D},
        )

    def columns(self, include_alpha: bool = False) -> dict[str, np.ndarray]:
        cols: dict[str, np.ndarray] = {}
        T = self.layout.T
        for t in range(1, T + 1):
            cols[f"beta1_{t}"] = self.beta1[:, t - 1]
        for s in self.layout.treated:
            for t in self.layout.free_delta_idx[s]:
                cols[f"delta_{s}_{t}"] = self.delta[s][:, t - 1]
        for s in sorted(self.gamma):
            for j in range(self.gamma[s].shape[1]):
                cols[f"gamma_{s}_{j + 1}"] = self.gamma[s][:, j]
        for s in sorted(self.sigma2):
            for t in range(1, T + 1):
                cols[f"sigma2_{s}_{t}"] = self.sigma2[s][:, t - 1]
        for s in sorted(self.D):
            cols[f"D_{s}"] = self.D[s]
        if self.vdelta is not None:
            for s in self.layout.treated:
                for t in self.layout.free_delta_idx[s]:
                    cols[f"vdelta_{s}_{t}"] = self.vdelta[s][:, t - 1]
        if include_alpha:
            for i in range(self.alpha.shape[1]):
                cols[f"alpha_{i + 1}"] = self.alpha[:, i]
        return cols

    def to_archive(self, csv_path, manifest_path, include_alpha: bool = False) -> None:
        """Write the draw archive: columnar CSV plus a JSON manifest."""
        import pandas as pd

        cols = self.columns(include_alpha=include_alpha)
        frame = pd.DataFrame(cols)
        frame.to_csv(csv_path, index=False)
        digest = hashlib.sha256(open(csv_path, "rb").read()).hexdigest()
        manifest = {
            "format": "stagdid-draws-v1",
            "config": dataclasses.asdict(self.config),
            "seed": self.config.seed,
            "regime": self.regime,
            "layout": {
                "T": self.layout.T,
                "treated": list(self.layout.treated),
                "d_w": self.layout.d_w,
                "variant": self.layout.variant,
            },
            "n_draws": self.n_draws,
            "columns": list(cols),
            "csv_sha256": digest,
        }
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)


def run_chain(data, design: DesignSet, prior, cfg: GibbsConfig,
              init: ModelParams | None = None, fixed=()) -> PosteriorDraws:
    """Run the Gibbs chain and return the retained draws.

    Parameters
    ----------
    init : ModelParams, optional
        Custom starting state; defaults to prior means for location blocks
        and prior modes for variance blocks.
    fixed : iterable of str, optional
        Block names that are held at their initial value and never updated
        (used by the marginal-likelihood reduced runs).

    Identical (data, prior, cfg) give bitwise-identical draws.
    """
    driver = ChainDriver(data, design, prior, cfg, init=init, fixed=fixed)
    G, T, n = cfg.n_draws, driver.T, data.n
    out = PosteriorDraws(
        beta1=np.empty((G, T)),
        delta={s: np.empty((G, T)) for s in driver.treated},
        gamma={s: np.empty((G, driver.d_w)) for s in driver.gamma},
        sigma2={s: np.empty((G, T)) for s in driver.cohorts},
        D={s: np.empty(G) for s in driver.cohorts},
        alpha=np.empty((G, n)),
        vdelta=None if driver.vdelta is None else {s: np.empty((G, T))
                                                   for s in driver.treated},
        layout=driver.layout,
        config=cfg,
        regime=prior.regime,
    )
    total = cfg.burnin + G * cfg.thin
    kept = 0
    for sweep_no in range(total):
        try:
            driver.sweep()
        except EstimationError as err:
            err.args = (f"{err.args[0]} (sweep {sweep_no}, kept {kept} draws)",)
            raise
        if sweep_no >= cfg.burnin and (sweep_no - cfg.burnin) % cfg.thin == cfg.thin - 1:
            out.beta1[kept] = driver.beta1
            for s in driver.treated:
                out.delta[s][kept] = driver.delta[s]
            for s in driver.gamma:
                out.gamma[s][kept] = driver.gamma[s]
            for s in driver.cohorts:
                out.sigma2[s][kept] = driver.sigma2[s]
                out.D[s][kept] = driver.D[s]
            out.alpha[kept] = driver.alpha
            if driver.vdelta is not None:
                for s in driver.treated:
                    out.vdelta[s][kept] = driver.vdelta[s]
            kept += 1
    out.stream_positions = {name: 1 for name in _BLOCKS}
    return out


def summarize(draws: PosteriorDraws, design: DesignSet) -> AttTable:
    """Posterior mean, SD, and equal-tailed 95% interval per effect cell.

    Every retained draw is mapped through the cumulative-sum identities for
    ATT and the pre-treatment diagnostic, so the table summarizes exact
    posterior functionals rather than plug-in transforms.
    """
    if draws.n_draws < 2:
        raise DomainError("summaries need at least 2 draws")
    layout = draws.layout
    rows = []
    for s in layout.treated:
        att_draws = np.stack([att_from_delta(draws.delta[s][g], s, design)
                              for g in range(draws.n_draws)])
        pre_draws = np.stack([predid_from_delta(draws.delta[s][g], s)
                              for g in range(draws.n_draws)]) if s > 2 else None
        for t in range(s, design.T + 1):
            x = att_draws[:, t - 1]
            rows.append(_summary_row(s, t, "ATT", x))
        for t in range(2, s):
            x = pre_draws[:, t - 2]
            rows.append(_summary_row(s, t, "PreDiD", x))
    return AttTable(rows=tuple(rows), variant=layout.variant)


def _summary_row(s: int, t: int, kind: str, x: np.ndarray) -> AttRow:
    lo, hi = np.quantile(x, [0.025, 0.975])
    return AttRow(cohort=s, period=t, kind=kind, point=float(x.mean()),
                  spread=float(x.std(ddof=1)), lo95=float(lo), hi95=float(hi))
