import numpy as np
import pytest

from conftest import simulate_panel

from stagdid.design import build_design, build_layout
from stagdid.errors import SingularSystemError
from stagdid.gibbs import ChainDriver, GibbsConfig
from stagdid.ifgls import (
    IfglsConfig,
    IfglsEstimate,
    blup_alpha,
    gls_update,
    ifgls_fit,
    variance_update,
)
from stagdid.model import ModelParams
from stagdid.panel import PanelDataset
from stagdid.priors import InvGammaBlock, NormalBlock, default_prior


def _flat_prior(T, d_w, treated, var=1e12, ig=1e-8):
    """Default prior pushed to diffuse limits for the duality checks."""
    prior = default_prior(T, d_w, treated)
    prior.beta1 = NormalBlock(np.zeros(T), np.full(T, var))
    for s in treated:
        prior.delta[s] = NormalBlock(np.zeros(T), np.full(T, var))
    for s in list(prior.gamma):
        prior.gamma[s] = NormalBlock(np.zeros(d_w), np.full(d_w, var))
    for s in prior.cohorts:
        prior.sigma2[s] = InvGammaBlock(np.full(T, ig), np.full(T, ig))
        prior.D[s] = InvGammaBlock(np.array(ig), np.array(ig))
    return prior


# ---------------------------------------------------------------------------
# gls_update


def test_gls_update_ols_reduction():
    """Single cohort, identity weights, no covariates: GLS is plain OLS."""
    data, design = simulate_panel(
        {1: 40}, T=4, beta1=(1.0, 0.5, -0.2, 0.3), d_w=0, sigma2=0.2, D=1e-12, seed=8
    )
    layout = build_layout(4, (), 0, "full")
    lam_inv = {1: np.eye(4)}
    theta, cov = gls_update(data, design, lam_inv, layout)

    X = np.vstack([design.L] * data.n)
    y = data.Y.reshape(-1)
    beta_ols, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert np.allclose(theta, beta_ols, atol=1e-10)
    assert np.allclose(cov, np.linalg.inv(data.n * design.L.T @ design.L), atol=1e-12)


def test_gls_update_dense_stack_oracle():
    """Cohort-summed normal equations match a brute-force stacked GLS."""
    T, d_w = 4, 2
    sigma2 = {1: np.array([0.3, 0.5, 0.4, 0.6]), 3: np.array([0.2, 0.7, 0.3, 0.4])}
    D = {1: 0.4, 3: 0.25}
    data, design = simulate_panel(
        {1: 7, 3: 6},
        T=T,
        beta1=(0.5, 0.2, -0.1, 0.4),
        delta={3: (0.0, 0.1, 0.3, -0.2)},
        gamma={1: (0.4, -0.3), 3: (0.2, 0.5)},
        sigma2=sigma2,
        D=D,
        d_w=d_w,
        seed=21,
    )
    layout = build_layout(T, (3,), d_w, "full")
    lam_inv = {
        s: np.linalg.inv(np.diag(sigma2[s]) + D[s] * np.ones((T, T)))
        for s in (1, 3)
    }
    theta, cov = gls_update(data, design, lam_inv, layout)

    free0 = np.array(layout.free_delta_idx[3]) - 1
    Lf = design.L[:, free0]
    p = layout.total_dim
    rows_X, rows_y, blocks = [], [], []
    for i in range(data.n):
        s = int(data.S[i])
        X_i = np.zeros((T, p))
        X_i[:, layout.beta1_sl] = design.L
        X_i[:, layout.gamma_sl[s]] = np.outer(np.ones(T), data.W[i])
        if s == 3:
            X_i[:, layout.delta_sl[3]] = Lf
        rows_X.append(X_i)
        rows_y.append(data.Y[i])
        blocks.append(lam_inv[s])
    X = np.vstack(rows_X)
    y = np.concatenate(rows_y)
    Om_inv = np.zeros((data.n * T, data.n * T))
    for i, blk in enumerate(blocks):
        Om_inv[i * T : (i + 1) * T, i * T : (i + 1) * T] = blk
    A = X.T @ Om_inv @ X
    theta_ref = np.linalg.solve(A, X.T @ Om_inv @ y)
    assert np.allclose(theta, theta_ref, atol=1e-8)
    assert np.allclose(cov, np.linalg.inv(A), atol=1e-8)


def test_gls_update_duplication_halves_covariance():
    data, design = simulate_panel(
        {1: 9, 2: 8},
        T=3,
        delta={2: (0.0, 0.2, 0.1)},
        gamma={1: (0.3,), 2: (0.4,)},
        sigma2=0.3,
        D=0.2,
        seed=5,
    )
    layout = build_layout(3, (2,), 1, "full")
    lam_inv = {
        s: np.linalg.inv(np.diag(np.full(3, 0.3)) + 0.2 * np.ones((3, 3)))
        for s in (1, 2)
    }
    theta1, cov1 = gls_update(data, design, lam_inv, layout)

    Y2 = np.vstack([data.Y, data.Y])
    W2 = np.vstack([data.W, data.W])
    S2 = np.concatenate([data.S, data.S])
    data2 = PanelDataset.from_arrays(Y2, W2, S2)
    theta2, cov2 = gls_update(data2, design, lam_inv, layout)
    assert np.allclose(theta1, theta2, atol=1e-10)
    assert np.allclose(cov2, cov1 / 2.0, atol=1e-12)


def test_gls_update_singular_names_block():
    """A constant covariate collides with the common level and is flagged."""
    rng = np.random.default_rng(3)
    T = 3
    S = np.array([1] * 6 + [2] * 5)
    Y = rng.normal(size=(11, T))
    W = np.ones((11, 1))
    data = PanelDataset.from_arrays(Y, W, S, validate=False)
    design = build_design(T, (2,))
    layout = build_layout(T, (2,), 1, "full")
    lam_inv = {1: np.eye(T), 2: np.eye(T)}
    with pytest.raises(SingularSystemError) as err:
        gls_update(data, design, lam_inv, layout)
    assert err.value.block is not None
    assert ("gamma" in err.value.block) or ("beta1" in err.value.block)


# ---------------------------------------------------------------------------
# blup_alpha and variance_update


def test_blup_alpha_hand_value():
    # u = (1, 1/2), u.e = 2, denom = 1 + 3 * 1.5
    assert blup_alpha(np.array([1.0, 2.0]), np.array([1.0, 2.0]), 3.0) == pytest.approx(
        12.0 / 11.0, rel=1e-12
    )


def test_blup_alpha_zero_d():
    assert blup_alpha(np.array([5.0, -2.0, 3.0]), np.full(3, 0.7), 0.0) == 0.0


def test_blup_alpha_constant_residual_shrinkage():
    c, D, s2, T = 2.0, 0.7, 0.3, 5
    got = blup_alpha(np.full(T, c), np.full(T, s2), D)
    want = c * (D * T / s2) / (1.0 + D * T / s2)
    assert got == pytest.approx(want, rel=1e-12)
    assert abs(got) < abs(c)


def test_variance_update_hand_values():
    cfg = IfglsConfig()
    resid = np.array([[1.0, 2.0], [3.0, 4.0]])
    alpha_hat = np.array([1.0, 2.0])
    sigma2, D = variance_update(resid, alpha_hat, cfg)
    assert np.allclose(sigma2, [0.5, 2.5])
    assert D == pytest.approx(2.5)


def test_variance_update_floors():
    cfg = IfglsConfig()
    sigma2, D = variance_update(np.zeros((4, 3)), np.zeros(4), cfg)
    assert np.all(sigma2 == cfg.sigma2_floor)
    assert D == 0.0


def test_variance_update_scale_equivariance():
    cfg = IfglsConfig()
    rng = np.random.default_rng(11)
    resid = rng.normal(size=(20, 4))
    alpha_hat = rng.normal(size=20)
    s1, d1 = variance_update(resid, alpha_hat, cfg)
    s2, d2 = variance_update(3.0 * resid, 3.0 * alpha_hat, cfg)
    assert np.allclose(s2, 9.0 * s1, rtol=1e-12)
    assert d2 == pytest.approx(9.0 * d1, rel=1e-12)


def test_variance_update_recovery_on_simulated_cohort():
    """Averages over replications stay within 15% of truth.

    Inputs are oracle residuals and predictors computed at the true variance
    parameters. The plug-in moment formulas have O(1/T) downward bias, about
    9% here, so a longer panel (T=10) is used where the band is attainable.
    """
    cfg = IfglsConfig()
    T, n, D_true, s2_true = 10, 500, 0.1, 0.1
    rng = np.random.default_rng(42)
    sig_vec = np.full(T, s2_true)
    sig_means = np.zeros(T)
    d_mean = 0.0
    reps = 50
    for _ in range(reps):
        alpha = rng.normal(0.0, np.sqrt(D_true), size=n)
        resid = alpha[:, None] + rng.normal(0.0, np.sqrt(s2_true), size=(n, T))
        alpha_hat = np.array([blup_alpha(resid[i], sig_vec, D_true) for i in range(n)])
        s_hat, d_hat = variance_update(resid, alpha_hat, cfg)
        sig_means += s_hat / reps
        d_mean += d_hat / reps
    assert abs(d_mean / D_true - 1.0) < 0.15
    assert np.max(np.abs(sig_means / s2_true - 1.0)) < 0.15


# ---------------------------------------------------------------------------
# ifgls_fit


_DELTA = {2: (0.0, 0.3, 0.2, 0.1, 0.1), 4: (0.0, 0.0, 0.0, 0.2, 0.1)}


def test_fixed_point_three_iterations():
    """Homoskedastic, no intercept heterogeneity: the map contracts fast."""
    data, design = simulate_panel(
        {1: 800, 2: 600, 4: 600}, sigma2=0.5, D=1e-6, delta=_DELTA, seed=77
    )
    fit = ifgls_fit(data, design, cfg=IfglsConfig(tol=1e-4))
    assert fit.converged
    assert fit.iterations <= 3

    tight = ifgls_fit(data, design, cfg=IfglsConfig(tol=1e-8))
    assert tight.converged
    assert tight.iterations <= 8
    # at the fixed point one more GLS pass reproduces theta
    lam_inv = {
        s: np.linalg.inv(np.diag(tight.sigma2[s]) + tight.D[s] * np.ones((5, 5)))
        for s in (1, 2, 4)
    }
    theta_again, _ = gls_update(data, design, lam_inv, tight.layout)
    assert np.allclose(theta_again, tight.theta, atol=1e-6)


def test_single_gls_pass_at_infinite_tolerance():
    data, design = simulate_panel({1: 30, 2: 20}, delta={2: np.zeros(5)}, seed=1)
    fit = ifgls_fit(data, design, cfg=IfglsConfig(tol=np.inf))
    assert fit.iterations == 1
    assert fit.converged


def test_recovers_intercept_heterogeneity():
    """Variance components leave their starting values and approach truth."""
    data, design = simulate_panel(
        {1: 250, 2: 120, 4: 130},
        sigma2=0.04,
        D=0.15,
        delta=_DELTA,
        gamma={1: (0.31,), 2: (0.30,), 4: (0.32,)},
        seed=3,
    )
    fit = ifgls_fit(data, design)
    assert fit.converged
    for s in (1, 2, 4):
        assert 0.08 < fit.D[s] < 0.25
        assert np.all(fit.sigma2[s] > 0.01) and np.all(fit.sigma2[s] < 0.06)
    assert np.max(np.abs(fit.delta(2) - np.array(_DELTA[2]) + 0.0)) < 0.35
    assert abs(fit.att.lookup(2, 3).point - 0.5) < 0.25


def test_nonconvergence_returns_flag_and_trace():
    data, design = simulate_panel(
        {1: 40, 2: 30}, sigma2=0.1, D=0.2, delta={2: np.zeros(5)}, seed=9
    )
    fit = ifgls_fit(data, design, cfg=IfglsConfig(max_iter=1, tol=1e-14))
    assert not fit.converged
    assert fit.iterations == 1
    assert len(fit.trace) == 1
    assert fit.att is not None


def test_outcome_scaling_equivariance():
    data, design = simulate_panel(
        {1: 80, 2: 60}, sigma2=0.2, D=0.1, delta={2: (0.0, 0.2, 0.1, 0.1, 0.0)},
        gamma={1: (0.3,), 2: (0.25,)}, seed=14
    )
    c = 3.0
    data_c = PanelDataset.from_arrays(c * data.Y, data.W, data.S)
    cfg = IfglsConfig(tol=1e-10, max_iter=400)
    fit1 = ifgls_fit(data, design, cfg=cfg)
    fit2 = ifgls_fit(data_c, design, cfg=cfg)
    assert fit1.converged and fit2.converged
    assert np.allclose(fit2.theta, c * fit1.theta, rtol=1e-5, atol=1e-8)
    for s in (1, 2):
        assert np.allclose(fit2.sigma2[s], c**2 * fit1.sigma2[s], rtol=1e-5)
        assert fit2.D[s] == pytest.approx(c**2 * fit1.D[s], rel=1e-4)
    for row1, row2 in zip(fit1.att.rows, fit2.att.rows):
        assert row2.point == pytest.approx(c * row1.point, rel=1e-5, abs=1e-10)
        assert row2.spread == pytest.approx(c * row1.spread, rel=1e-5, abs=1e-10)


def test_unit_order_invariance():
    data, design = simulate_panel(
        {1: 25, 2: 20, 4: 15}, sigma2=0.1, D=0.1, delta=_DELTA, seed=6
    )
    rng = np.random.default_rng(0)
    perm = rng.permutation(data.n)
    renamed = np.array([f"z{k:04d}" for k in range(data.n)])
    data2 = PanelDataset.from_arrays(
        data.Y[perm], data.W[perm], data.S[perm], unit_ids=renamed
    )
    fit1 = ifgls_fit(data, design)
    fit2 = ifgls_fit(data2, design)
    assert np.allclose(fit1.theta, fit2.theta, atol=1e-9)
    for s in (1, 2, 4):
        assert np.allclose(fit1.sigma2[s], fit2.sigma2[s], atol=1e-10)
        assert fit1.D[s] == pytest.approx(fit2.D[s], abs=1e-10)


# ---------------------------------------------------------------------------
# delta_method_att


def test_delta_method_counts_coordinates():
    """Independent coordinates with variance v give Var = (t-s+1) v."""
    T, v = 5, 0.04
    layout = build_layout(T, (2, 4), 0, "full")
    theta = np.zeros(layout.total_dim)
    theta[layout.delta_sl[2]] = [0.1, 0.2, 0.3, 0.4]
    theta[layout.delta_sl[4]] = [0.5, 0.6, 0.7, 0.8]
    est = IfglsEstimate(
        theta=theta,
        cov=v * np.eye(layout.total_dim),
        layout=layout,
        sigma2={s: np.full(T, 1.0) for s in (1, 2, 4)},
        D={s: 0.1 for s in (1, 2, 4)},
        iterations=1,
        converged=True,
    )
    from stagdid.ifgls import delta_method_att

    att = delta_method_att(est, build_design(T, (2, 4)))
    for t in range(2, 6):
        row = att.lookup(2, t)
        k = t - 2 + 1
        assert row.spread == pytest.approx(np.sqrt(k * v), rel=1e-12)
        assert row.point == pytest.approx(sum([0.1, 0.2, 0.3, 0.4][: k]), rel=1e-12)
        assert row.lo95 == pytest.approx(row.point - 1.96 * row.spread, rel=1e-12)
        assert row.hi95 == pytest.approx(row.point + 1.96 * row.spread, rel=1e-12)
    for t in (2, 3):
        row = att.lookup(4, t)
        k = t - 2 + 1
        assert row.spread == pytest.approx(np.sqrt(k * v), rel=1e-12)


def test_prept_variant_zeroes_pretrend_rows():
    data, design = simulate_panel(
        {1: 30, 4: 25}, sigma2=0.1, D=0.05, delta={4: (0.0, 0.0, 0.0, 0.2, 0.1)},
        seed=2
    )
    fit = ifgls_fit(data, design, variant="pre_pt")
    for t in (2, 3):
        row = fit.att.lookup(4, t)
        assert row.point == 0.0
        assert row.spread == 0.0


# ---------------------------------------------------------------------------
# duality with the Gibbs conditionals


def test_duality_mean_blocks_and_blup():
    """At the fixed point, flat-prior conditional means reproduce the GLS
    solution blockwise, and the unit-effect conditional mean decomposes as
    covariate fit plus BLUP.

    The variance blocks divide by n_s - 2 in the diffuse conditional mean
    versus n_s in the frequentist update, so those are compared through the
    exact finite-sample factor.
    """
    data, design = simulate_panel(
        {1: 60, 2: 50, 4: 40},
        sigma2=0.3,
        D=0.2,
        delta=_DELTA,
        gamma={1: (0.31,), 2: (0.30,), 4: (0.32,)},
        seed=5,
    )
    fit = ifgls_fit(data, design, cfg=IfglsConfig(tol=1e-12, max_iter=800))
    assert fit.converged

    treated = (2, 4)
    prior = _flat_prior(5, 1, treated)
    # full alpha state: covariate part plus the BLUP deviations
    alpha_full = np.zeros(data.n)
    blups = {}
    for s in (1,) + treated:
        rows = data.units_of(s)
        path = design.L @ fit.beta1
        if s != 1:
            path = path + design.L @ fit.delta(s)
        R = data.Y[rows] - path[None, :] - (data.W[rows] @ fit.gamma(s))[:, None]
        b_vec = np.array(
            [blup_alpha(R[i], fit.sigma2[s], fit.D[s]) for i in range(rows.size)]
        )
        blups[s] = b_vec
        alpha_full[rows] = data.W[rows] @ fit.gamma(s) + b_vec

    params = ModelParams(
        beta1=fit.beta1.copy(),
        delta={s: fit.delta(s) for s in treated},
        gamma={s: fit.gamma(s) for s in (1,) + treated},
        sigma2={s: fit.sigma2[s].copy() for s in (1,) + treated},
        D=dict(fit.D),
        alpha=alpha_full,
    )
    driver = ChainDriver(data, design, prior, GibbsConfig(seed=0), init=params)

    prec, h = driver.beta1_conditional()
    assert np.allclose(np.linalg.solve(prec, h), fit.beta1, atol=1e-7)

    for s in treated:
        prec, h, free0 = driver.delta_conditional(s)
        assert np.allclose(
            np.linalg.solve(prec, h), fit.theta[fit.layout.delta_sl[s]], atol=1e-7
        )

    for s in (1,) + treated:
        mean_vec, var = driver.alpha_conditional(s)
        rows = data.units_of(s)
        covpart = data.W[rows] @ fit.gamma(s)
        assert np.allclose(mean_vec - covpart, blups[s], atol=1e-10)
        assert var > 0

    for s in (1,) + treated:
        n_s = data.units_of(s).size
        shape, rate = driver.sigma2_conditional(s)
        gibbs_mean = rate / (shape - 1.0)
        rows = data.units_of(s)
        path = design.L @ fit.beta1
        if s != 1:
            path = path + design.L @ fit.delta(s)
        R = data.Y[rows] - path[None, :] - (data.W[rows] @ fit.gamma(s))[:, None]
        dev = R - blups[s][:, None]
        sig_plug = (dev * dev).sum(axis=0) / n_s
        assert np.allclose(gibbs_mean, sig_plug * n_s / (n_s - 2.0), rtol=1e-5)

        shape_d, rate_d = driver.D_conditional(s)
        d_plug = float(blups[s] @ blups[s]) / n_s
        assert rate_d / (shape_d - 1.0) == pytest.approx(
            d_plug * n_s / (n_s - 2.0), rel=1e-5
        )


def test_duality_gamma_formula_recovery():
    """With unit effects set exactly on the covariate plane, the flat-prior
    conditional mean of gamma returns the plane's coefficients."""
    data, design = simulate_panel(
        {1: 30, 2: 25}, sigma2=0.2, D=0.3, delta={2: np.zeros(5)}, seed=17
    )
    prior = _flat_prior(5, 1, (2,))
    gamma0 = {1: np.array([0.7]), 2: np.array([-0.4])}
    alpha = np.zeros(data.n)
    for s in (1, 2):
        rows = data.units_of(s)
        alpha[rows] = data.W[rows] @ gamma0[s]
    params = ModelParams(
        beta1=np.zeros(5),
        delta={2: np.zeros(5)},
        gamma={1: np.zeros(1), 2: np.zeros(1)},
        sigma2={s: np.full(5, 0.2) for s in (1, 2)},
        D={s: 0.3 for s in (1, 2)},
        alpha=alpha,
    )
    driver = ChainDriver(data, design, prior, GibbsConfig(seed=0), init=params)
    for s in (1, 2):
        prec, h = driver.gamma_conditional(s)
        assert np.allclose(np.linalg.solve(prec, h), gamma0[s], atol=1e-8)
