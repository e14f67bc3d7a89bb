"""Design matrices and parameter layout for the staggered adoption model.

The outcome path of a unit is built from period-over-period increments, so every
mean vector is a cumulative sum. ``lower_triangular_ones`` provides the T x T
accumulation matrix L (row t has ones in columns 1..t); treated cohorts
additionally carry increment differences whose pre- and post-treatment parts are
selected by column-masked copies of L.

Two model variants exist. The full variant lets a treated cohort's increment
differences be free in every period after the first; the reduced ("pre_pt")
variant imposes parallel pre-treatment trends by freeing them only from the
treatment period onward. ``ParamLayout`` records which coordinates are free and
where each block lives in the stacked coefficient vector used by the GLS path.
The first-period difference is never free: initial-level heterogeneity across
cohorts is absorbed by the unit intercepts, whose means are cohort-specific.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

VARIANTS = ("full", "pre_pt")


def lower_triangular_ones(T: int) -> np.ndarray:
    """Return the T x T lower-triangular matrix of ones.

    Parameters
    ----------
    T : int
        Number of periods, at least 2.
    """
    if T < 2:
        raise DimensionError(f"need at least 2 periods, got T={T}")
    return np.tril(np.ones((T, T)))


def pre_post_matrices(T: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Column-masked copies of L for cohort ``s``.

    The pre matrix zeroes columns s..T (keeping the pre-treatment increments),
    the post matrix zeroes columns 1..s-1. They sum to L exactly.
    """
    if not 2 <= s <= T:
        raise DimensionError(f"cohort s={s} outside 2..{T}")
    L = lower_triangular_ones(T)
    pre = L.copy()
    pre[:, s - 1 :] = 0.0
    post = L - pre
    return pre, post


@dataclass(frozen=True)
class DesignSet:
    """L plus per-cohort pre/post masks, keyed by treated cohort label."""

    T: int
    L: np.ndarray
    pre: dict[int, np.ndarray]
    post: dict[int, np.ndarray]


def build_design(T: int, treated: tuple[int, ...] | list[int]) -> DesignSet:
    L = lower_triangular_ones(T)
    pre = {}
    post = {}
    for s in sorted(treated):
        pre[s], post[s] = pre_post_matrices(T, s)
    return DesignSet(T=T, L=L, pre=pre, post=post)


@dataclass(frozen=True)
class ParamLayout:
    """Free-coordinate map and stacked-vector slices for one model variant.

    Attributes
    ----------
    free_delta_idx : dict
        Per treated cohort, the ordered 1-based period indices whose increment
        differences are free: {2..T} under "full", {s..T} under "pre_pt".
    beta1_sl, gamma_sl, delta_sl : slice bookkeeping
        Positions of each block in the stacked coefficient vector
        (beta1, gamma_1..gamma_S, delta_2..delta_S free coordinates), used by
        the GLS estimator. ``gamma_sl`` is empty when d_w is 0.
    """

    T: int
    treated: tuple[int, ...]
    d_w: int
    variant: str
    free_delta_idx: dict[int, tuple[int, ...]] = field(repr=False)
    beta1_sl: slice = field(repr=False)
    gamma_sl: dict[int, slice] = field(repr=False)
    delta_sl: dict[int, slice] = field(repr=False)
    total_dim: int = 0

    @property
    def cohorts(self) -> tuple[int, ...]:
        """All cohort labels, never-treated first."""
        return (1,) + self.treated


def build_layout(T: int, treated, d_w: int, variant: str) -> ParamLayout:
    if variant not in VARIANTS:
        raise DimensionError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    treated = tuple(sorted(int(s) for s in treated))
    for s in treated:
        if not 2 <= s <= T:
            raise DimensionError(f"cohort s={s} outside 2..{T}")
    free = {}
    for s in treated:
        lo = 2 if variant == "full" else s
        free[s] = tuple(range(lo, T + 1))
    pos = 0
    beta1_sl = slice(pos, pos + T)
    pos += T
    gamma_sl = {}
    if d_w > 0:
        for s in (1,) + treated:
            gamma_sl[s] = slice(pos, pos + d_w)
            pos += d_w
    delta_sl = {}
    for s in treated:
        delta_sl[s] = slice(pos, pos + len(free[s]))
        pos += len(free[s])
    return ParamLayout(
        T=T,
        treated=treated,
        d_w=d_w,
        variant=variant,
        free_delta_idx=free,
        beta1_sl=beta1_sl,
        gamma_sl=gamma_sl,
        delta_sl=delta_sl,
        total_dim=pos,
    )


def mean_paths(
    beta1: np.ndarray, delta_s: np.ndarray, design: DesignSet, s: int
) -> tuple[np.ndarray, np.ndarray]:
    """Counterfactual and treated mean paths for cohort ``s``.

    Returns (mu0, mu1) where mu0 accumulates the common increments plus the
    cohort's pre-treatment differences and mu1 accumulates all of them; their
    gap is exactly the post-mask applied to delta. For the never-treated cohort
    both paths equal L beta1.
    """
    beta1 = np.asarray(beta1, dtype=float)
    delta_s = np.asarray(delta_s, dtype=float)
    if beta1.shape != (design.T,) or delta_s.shape != (design.T,):
        raise DimensionError(
            f"expected length-{design.T} vectors, got {beta1.shape} and {delta_s.shape}"
        )
    base = design.L @ beta1
    if s == 1:
        return base, base.copy()
    if s not in design.pre:
        raise DimensionError(f"cohort s={s} not in design")
    mu0 = base + design.pre[s] @ delta_s
    mu1 = base + design.L @ delta_s
    return mu0, mu1
