import numpy as np
import pytest

from stagdid.design import build_design
from stagdid.panel import PanelDataset


def simulate_panel(
    counts,
    T=5,
    beta1=None,
    delta=None,
    gamma=None,
    sigma2=0.04,
    D=0.05,
    d_w=1,
    w_mean=3.3,
    w_sd=1.0,
    seed=0,
):
    """Hand-rolled panel simulator used by tests as an oracle-side generator.

    Deliberately independent of stagdid.sim: tests that exercise the package's
    own DGP compare against this one.

    Parameters
    ----------
    counts : dict
        Cohort label -> unit count; label 1 is never treated.
    sigma2, D : float or dict
        Scalars broadcast to every cohort (sigma2 also across periods).
    delta, gamma : dict or None
        Per-treated-cohort increment differences (length T) and per-cohort
        covariate coefficients (length d_w).
    """
    treated = tuple(s for s in sorted(counts) if s != 1)
    design = build_design(T, treated)
    rng = np.random.default_rng(seed)
    beta1 = np.zeros(T) if beta1 is None else np.asarray(beta1, dtype=float)

    def coh(x, s):
        return x[s] if isinstance(x, dict) else x

    Y_rows, W_rows, S_rows = [], [], []
    for s in sorted(counts):
        n_s = counts[s]
        sig = np.broadcast_to(np.asarray(coh(sigma2, s), dtype=float), (T,))
        Dv = float(coh(D, s))
        W_s = (
            rng.normal(w_mean, w_sd, size=(n_s, d_w))
            if d_w
            else np.zeros((n_s, 0))
        )
        g = (
            np.asarray(gamma[s], dtype=float)
            if (gamma is not None and d_w)
            else np.zeros(d_w)
        )
        alpha = W_s @ g + rng.normal(0.0, np.sqrt(Dv), size=n_s)
        path = design.L @ beta1
        if s != 1:
            d_vec = (
                np.asarray(delta[s], dtype=float)
                if delta is not None
                else np.zeros(T)
            )
            path = path + design.L @ d_vec
        Y_s = alpha[:, None] + path[None, :] + rng.normal(size=(n_s, T)) * np.sqrt(sig)
        Y_rows.append(Y_s)
        W_rows.append(W_s)
        S_rows.append(np.full(n_s, s))
    Y = np.vstack(Y_rows)
    W = np.vstack(W_rows)
    S = np.concatenate(S_rows).astype(int)
    data = PanelDataset.from_arrays(Y, W, S)
    return data, design


def empty_panel(T=3, d_w=0):
    return PanelDataset.from_arrays(
        np.zeros((0, T)), np.zeros((0, d_w)), np.zeros(0, dtype=int), validate=False
    )


def ks_distance(draws, cdf):
    """Kolmogorov-Smirnov distance between a sample and an analytic CDF."""
    x = np.sort(np.asarray(draws, dtype=float))
    n = x.size
    F = cdf(x)
    hi = np.arange(1, n + 1) / n
    lo = np.arange(0, n) / n
    return max(float(np.max(np.abs(F - hi))), float(np.max(np.abs(F - lo))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
