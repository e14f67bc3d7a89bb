"""Prior construction under the three supported regimes.

InvGamma parametrization, used everywhere in this package: density
proportional to x^-(shape+1) * exp(-rate/x). A draw is the reciprocal of a
Gamma(shape, scale=1/rate) draw.

Regimes:

default
    Weakly informative: every normal coordinate is N(0, 10), every variance
    is InvGamma(1/2, 1/2).
trained
    Hyperparameters set from a Gibbs run on a held-out training subsample:
    normal blocks get the training posterior mean and (inflated) variance,
    InvGamma blocks are moment-matched to the training posterior of the
    variance parameters.
student_t
    The treatment-increment coordinates get a scale-mixture prior
    delta | V ~ N(0, V), V ~ InvGamma(rho/2, xi/2), marginally Student-t with
    rho degrees of freedom and scale sqrt(xi/rho). The local variances V are
    latent and sampled inside the Gibbs chain, never read from the block.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

_INVGAMMA_SHAPE_CAP = 50.0


@dataclass
class NormalBlock:
    """Independent normal coordinates: mean vector and diagonal variances."""

    mean: np.ndarray
    var: np.ndarray | None  # None marks latent variances (student_t deltas)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if self.var is not None:
            self.var = np.atleast_1d(np.asarray(self.var, dtype=float))
            if self.var.shape != self.mean.shape:
                raise DomainError("normal block mean/var shape mismatch")
            if np.any(self.var <= 0):
                raise DomainError("normal block variances must be positive")


@dataclass
class InvGammaBlock:
    """InvGamma(shape, rate) hyperparameters, possibly vectorized over periods."""

    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=float)
        self.rate = np.asarray(self.rate, dtype=float)
        if np.any(self.shape <= 0) or np.any(self.rate <= 0):
            raise DomainError("InvGamma shape and rate must be positive")

    def mode(self):
        return self.rate / (self.shape + 1.0)

    def mean(self):
        """Prior mean where defined, otherwise the mode (heavy-tail fallback)."""
        m = self.mode()
        defined = self.shape > 1.0
        return np.where(defined, self.rate / np.maximum(self.shape - 1.0, 1e-12), m)


@dataclass
class PriorSpec:
    """Hyperparameters for every parameter block.

    ``delta`` blocks are stored per period (length T); the sampler restricts
    them to the free coordinates of the active variant, so one PriorSpec
    serves both variants.
    """

    regime: str
    beta1: NormalBlock
    delta: dict[int, NormalBlock]
    gamma: dict[int, NormalBlock]
    sigma2: dict[int, InvGammaBlock]
    D: dict[int, InvGammaBlock]
    rho: float | None = None
    xi: float | None = None
    meta: dict = field(default_factory=dict)

    def delta_var(self, s: int) -> np.ndarray:
        if self.regime == "student_t":
            raise DomainError(
                "student_t regime has latent delta variances; they are sampled, "
                "not fixed in the prior"
            )
        return self.delta[s].var

    def initial_vdelta(self) -> float:
        """Starting value for the latent local variances.

        The implied InvGamma(rho/2, xi/2) mean when it exists (rho > 2),
        otherwise the mode xi/(rho+2).
        """
        if self.regime != "student_t":
            raise DomainError("initial_vdelta only applies to the student_t regime")
        if self.rho > 2.0:
            return self.xi / (self.rho - 2.0)
        return self.xi / (self.rho + 2.0)

    @property
    def cohorts(self) -> tuple[int, ...]:
        return tuple(sorted(self.sigma2))

    @property
    def treated(self) -> tuple[int, ...]:
        return tuple(sorted(self.delta))

    def log_density(self, theta, layout) -> float:
        """Log prior density of (beta1, delta free coords, gamma, sigma2, D).

        Latent blocks (alpha, student-t local variances) are excluded; the
        student_t regime has no fixed delta density and is rejected.
        """
        if self.regime == "student_t":
            raise DomainError("log prior density undefined for latent delta variances")
        total = _log_normal(theta.beta1, self.beta1.mean, self.beta1.var)
        for s in layout.treated:
            idx = np.array(layout.free_delta_idx[s]) - 1
            blk = self.delta[s]
            total += _log_normal(theta.delta[s][idx], blk.mean[idx], blk.var[idx])
        for s, blk in self.gamma.items():
            total += _log_normal(theta.gamma[s], blk.mean, blk.var)
        for s, blk in self.sigma2.items():
            total += float(np.sum(log_invgamma_pdf(theta.sigma2[s], blk.shape, blk.rate)))
        for s, blk in self.D.items():
            total += float(np.sum(log_invgamma_pdf(theta.D[s], blk.shape, blk.rate)))
        return total

    def validate(self) -> None:
        if self.regime not in ("default", "trained", "student_t"):
            raise DomainError(f"unknown prior regime {self.regime!r}")
        if self.regime == "student_t" and not (self.rho > 0 and self.xi > 0):
            raise DomainError("student_t regime needs positive (rho, xi)")

    # -- serialization ----------------------------------------------------

    def to_json_dict(self) -> dict:
        def normal(b: NormalBlock):
            return {
                "mean": b.mean.tolist(),
                "var": None if b.var is None else b.var.tolist(),
            }

        def invgamma(b: InvGammaBlock):
            return {"shape": b.shape.tolist(), "rate": b.rate.tolist()}

        return {
            "regime": self.regime,
            "beta1": normal(self.beta1),
            "delta": {str(s): normal(b) for s, b in self.delta.items()},
            "gamma": {str(s): normal(b) for s, b in self.gamma.items()},
            "sigma2": {str(s): invgamma(b) for s, b in self.sigma2.items()},
            "D": {str(s): invgamma(b) for s, b in self.D.items()},
            "rho": self.rho,
            "xi": self.xi,
            "meta": self.meta,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PriorSpec":
        def normal(d):
            return NormalBlock(
                mean=np.array(d["mean"]),
                var=None if d["var"] is None else np.array(d["var"]),
            )

        def invgamma(d):
            return InvGammaBlock(shape=np.array(d["shape"]), rate=np.array(d["rate"]))

        spec = cls(
            regime=doc["regime"],
            beta1=normal(doc["beta1"]),
            delta={int(s): normal(b) for s, b in doc["delta"].items()},
            gamma={int(s): normal(b) for s, b in doc["gamma"].items()},
            sigma2={int(s): invgamma(b) for s, b in doc["sigma2"].items()},
            D={int(s): invgamma(b) for s, b in doc["D"].items()},
            rho=doc.get("rho"),
            xi=doc.get("xi"),
            meta=doc.get("meta", {}),
        )
        spec.validate()
        return spec

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "PriorSpec":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _log_normal(x, mean, var) -> float:
    x = np.asarray(x, dtype=float)
    return float(
        -0.5 * np.sum(np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)
    )


def log_invgamma_pdf(x, shape, rate):
    """Elementwise log density of InvGamma(shape, rate) at x."""
    x = np.asarray(x, dtype=float)
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    lg = np.vectorize(math.lgamma)(shape)
    return shape * np.log(rate) - lg - (shape + 1.0) * np.log(x) - rate / x


def default_prior(T: int, d_w: int, treated) -> PriorSpec:
    """Weakly informative default prior used unless overridden."""
    treated = tuple(sorted(treated))
    cohorts = (1,) + treated
    ten = lambda k: NormalBlock(mean=np.zeros(k), var=np.full(k, 10.0))
    spec = PriorSpec(
        regime="default",
        beta1=ten(T),
        delta={s: ten(T) for s in treated},
        gamma={s: ten(d_w) for s in cohorts} if d_w > 0 else {},
        sigma2={s: InvGammaBlock(np.full(T, 0.5), np.full(T, 0.5)) for s in cohorts},
        D={s: InvGammaBlock(np.array(0.5), np.array(0.5)) for s in cohorts},
    )
    spec.validate()
    return spec


def student_t_prior(T: int, d_w: int, treated, rho: float = 1.0, xi: float = 1.0) -> PriorSpec:
    """Shrinkage regime: latent local variances on the delta coordinates."""
    if rho <= 0 or xi <= 0:
        raise DomainError(f"rho and xi must be positive, got ({rho}, {xi})")
    spec = default_prior(T, d_w, treated)
    spec.regime = "student_t"
    spec.rho = float(rho)
    spec.xi = float(xi)
    for s in spec.treated:
        spec.delta[s] = NormalBlock(mean=np.zeros(T), var=None)
    spec.validate()
    return spec


def training_prior(
    train,
    base: PriorSpec,
    inflation: float = 10.0,
    cfg=None,
    variant: str = "full",
) -> PriorSpec:
    """Empirical-Bayes prior fitted on a held-out training subsample.

    Runs the Gibbs sampler on ``train`` under ``base`` (which must be the
    default regime), then sets each normal block's mean to the training
    posterior mean and its variance to the training posterior variance times
    ``inflation``; the InvGamma blocks for sigma^2 and D are moment-matched to
    the training posterior mean/variance of those parameters, with the shape
    capped at 50 (rate re-solved to keep the mean) so the tails never become
    dogmatic.

    Parameters
    ----------
    cfg : GibbsConfig, optional
        Sampler settings for the training run; defaults to 1000 retained
        draws after 500 burn-in with seed 0.
    """
    from .design import build_design, build_layout
    from .gibbs import GibbsConfig, run_chain

    if base.regime != "default":
        raise DomainError("training_prior expects a default-regime base prior")
    if inflation < 1.0:
        raise DomainError(f"inflation must be >= 1, got {inflation}")
    if cfg is None:
        cfg = GibbsConfig()
    if cfg.variant != variant:
        cfg = dataclasses.replace(cfg, variant=variant)
    design = build_design(train.T, base.treated)
    draws = run_chain(train, design, base, cfg)

    def fitted_normal(samples: np.ndarray) -> NormalBlock:
        mean = samples.mean(axis=0)
        var = samples.var(axis=0, ddof=1) * inflation
        return NormalBlock(mean=mean, var=np.maximum(var, 1e-12))

    def fitted_invgamma(samples: np.ndarray) -> InvGammaBlock:
        m = samples.mean(axis=0)
        v = samples.var(axis=0, ddof=1)
        with np.errstate(divide="ignore"):
            shape = 2.0 + np.where(v > 0, m * m / np.where(v > 0, v, 1.0), np.inf)
        shape = np.minimum(shape, _INVGAMMA_SHAPE_CAP)
        rate = m * (shape - 1.0)
        return InvGammaBlock(shape=shape, rate=rate)

    trained = PriorSpec(
        regime="trained",
        beta1=fitted_normal(draws.beta1),
        delta={},
        gamma={},
        sigma2={},
        D={},
        meta={"inflation": inflation, "train_n": train.n, "seed": cfg.seed},
    )
    for s in base.treated:
        blk = fitted_normal(draws.delta[s])
        # coordinates the training variant kept fixed stay at the base prior
        free = set(range(2 if variant == "full" else s, train.T + 1))
        for t in range(1, train.T + 1):
            if t not in free:
                blk.mean[t - 1] = base.delta[s].mean[t - 1]
                blk.var[t - 1] = base.delta[s].var[t - 1]
        trained.delta[s] = blk
    for s in base.gamma:
        trained.gamma[s] = fitted_normal(draws.gamma[s])
    for s in base.sigma2:
        trained.sigma2[s] = fitted_invgamma(draws.sigma2[s])
        trained.D[s] = fitted_invgamma(draws.D[s])
    trained.validate()
    return trained
