import math

import numpy as np
import pytest

from contrastrec.errors import ValidationError
from contrastrec.theory import (
    EnvDataset,
    calibrate_lasso_constant,
    convergence_experiment,
    eills_fit_smallp,
    eills_objective,
    gen_multi_env,
    lasso_fit,
    oracle_ols_fit,
    rate_curves_nonlinear,
    selection_experiment,
    single_env_best_subset,
    spurious_experiment,
)


# ---------------------------------------------------------------------------
# Independent oracle: naive double-loop objective
# ---------------------------------------------------------------------------

def eills_objective_naive(beta, envs, gamma, lam):
    beta = np.asarray(beta, dtype=float)
    total = 0.0
    for env in envs:
        for k in range(len(env.y)):
            r = env.y[k] - float(env.X[k] @ beta)
            total += r * r
    penalty = 0.0
    for j in range(len(beta)):
        if beta[j] == 0.0:
            continue
        for env in envs:
            cov = 0.0
            for k in range(len(env.y)):
                cov += env.X[k, j] * (env.y[k] - float(env.X[k] @ beta))
            penalty += cov * cov
    l0 = sum(1 for b in beta if b != 0.0)
    return total + gamma * penalty + lam * l0


def ols_with_intercept(X, y):
    design = np.column_stack([np.ones(len(y)), X])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef[1:]


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

def test_single_env_no_shift_classical_regression():
    envs = gen_multi_env(100, 10, 3, n_envs=1, shift_strength=0.0, seed=1)
    assert len(envs) == 1
    env = envs[0]
    assert env.X.shape == (100, 10)
    assert np.array_equal(env.support, [0, 1, 2])
    assert (env.beta_star[3:] == 0).all()
    assert (np.abs(env.beta_star[:3]) >= 0.5).all()


def test_noiseless_recovery_by_full_ols():
    env = gen_multi_env(50, 8, 3, n_envs=1, noise_sd=0.0, seed=2)[0]
    beta_hat = np.linalg.lstsq(env.X, env.y, rcond=None)[0]
    assert np.allclose(beta_hat, env.beta_star, atol=1e-8)


def test_environments_share_beta_but_not_distribution():
    envs = gen_multi_env(400, 6, 2, n_envs=3, shift_strength=1.0, seed=3)
    for env in envs[1:]:
        assert np.array_equal(env.beta_star, envs[0].beta_star)
    means = [env.X.mean(axis=0) for env in envs]
    assert not np.allclose(means[0], means[1], atol=0.05)


def test_spurious_coordinate_appended_and_confounded():
    envs = gen_multi_env(500, 6, 2, n_envs=2, seed=4, spurious=True)
    assert envs[0].X.shape[1] == 7
    corr0 = np.corrcoef(envs[0].X[:, 6], envs[0].y)[0, 1]
    corr1 = np.corrcoef(envs[1].X[:, 6], envs[1].y)[0, 1]
    assert abs(corr0) > 0.9
    assert abs(corr1) < 0.2
    assert envs[0].beta_star[6] == 0.0


# ---------------------------------------------------------------------------
# Lasso
# ---------------------------------------------------------------------------

def test_lasso_zero_penalty_matches_ols():
    env = gen_multi_env(120, 6, 3, n_envs=1, shift_strength=0.0, seed=5)[0]
    report = lasso_fit(env.X, env.y, lam=0.0)
    assert np.allclose(report.beta, ols_with_intercept(env.X, env.y), atol=1e-6)


def test_lasso_kill_threshold_zeroes_everything():
    env = gen_multi_env(80, 5, 2, n_envs=1, shift_strength=0.0, seed=6)[0]
    Xc = env.X - env.X.mean(axis=0)
    Xc /= Xc.std(axis=0)
    yc = env.y - env.y.mean()
    lam_max = np.abs(Xc.T @ yc).max() / len(yc)
    report = lasso_fit(env.X, env.y, lam=lam_max * 1.0001)
    assert np.allclose(report.beta, 0.0)
    assert len(report.support) == 0


def test_lasso_orthonormal_design_soft_threshold_closed_form():
    rng = np.random.default_rng(7)
    n, p = 64, 6
    raw = rng.standard_normal((n, p))
    raw -= raw.mean(axis=0)
    q, _ = np.linalg.qr(raw)
    X = q * math.sqrt(n)          # unit-variance orthogonal columns
    beta_true = np.array([2.0, -1.0, 0.5, 0.0, 0.0, 0.0])
    y = X @ beta_true + 0.1 * rng.standard_normal(n)
    lam = 0.3
    report = lasso_fit(X, y, lam=lam)
    yc = y - y.mean()
    beta_ols = X.T @ yc / n
    expected = np.sign(beta_ols) * np.maximum(np.abs(beta_ols) - lam, 0.0)
    assert np.allclose(report.beta, expected, atol=1e-8)


def test_lasso_objective_nonincreasing_over_sweeps():
    env = gen_multi_env(200, 30, 5, n_envs=1, shift_strength=0.0, seed=8)[0]
    report = lasso_fit(env.X, env.y, lam=0.05, track_objective=True)
    trace = report.objective_trace
    assert len(trace) > 1
    assert all(trace[i + 1] <= trace[i] + 1e-12 for i in range(len(trace) - 1))


def test_lasso_rejects_negative_lambda():
    with pytest.raises(ValidationError):
        lasso_fit(np.ones((4, 2)), np.ones(4), lam=-0.1)


# ---------------------------------------------------------------------------
# Oracle OLS
# ---------------------------------------------------------------------------

def test_oracle_full_support_is_plain_ols():
    env = gen_multi_env(100, 5, 5, n_envs=1, shift_strength=0.0, seed=9)[0]
    report = oracle_ols_fit(env.X, env.y, np.arange(5))
    direct = np.linalg.lstsq(env.X, env.y, rcond=None)[0]
    assert np.allclose(report.beta, direct, atol=1e-8)


def test_oracle_noiseless_exact():
    env = gen_multi_env(60, 10, 4, n_envs=1, noise_sd=0.0, seed=10)[0]
    report = oracle_ols_fit(env.X, env.y, env.support, beta_star=env.beta_star)
    assert report.l2_error == pytest.approx(0.0, abs=1e-9)


def test_oracle_scales_to_wide_designs():
    env = gen_multi_env(1000, 2000, 20, n_envs=1, shift_strength=0.0, seed=11)[0]
    report = oracle_ols_fit(env.X, env.y, env.support, beta_star=env.beta_star)
    assert report.l2_error < 0.5
    assert (report.beta[20:] == 0).all()


def test_oracle_residuals_orthogonal_to_support_columns():
    env = gen_multi_env(300, 12, 4, n_envs=1, shift_strength=0.0, seed=12)[0]
    report = oracle_ols_fit(env.X, env.y, env.support)
    residual = env.y - env.X @ report.beta
    for j in env.support:
        assert abs(env.X[:, j] @ residual) < 1e-8 * len(residual)


def test_oracle_rank_deficient_rejected():
    X = np.ones((10, 3))
    X[:, 1] = X[:, 0]
    with pytest.raises(ValidationError, match="rank"):
        oracle_ols_fit(X, np.ones(10), [0, 1])


# ---------------------------------------------------------------------------
# Invariance-regularized subset objective
# ---------------------------------------------------------------------------

def test_objective_true_beta_noiseless():
    envs = gen_multi_env(50, 6, 3, n_envs=2, noise_sd=0.0, seed=13)
    value = eills_objective(envs[0].beta_star, envs, gamma=5.0, lam=2.0)
    assert value == pytest.approx(2.0 * 3, abs=1e-16)


def test_objective_reduces_to_pooled_rss():
    envs = gen_multi_env(40, 5, 2, n_envs=2, seed=14)
    rng = np.random.default_rng(0)
    beta = rng.normal(size=5)
    pooled = sum(float(np.sum((env.y - env.X @ beta) ** 2)) for env in envs)
    assert eills_objective(beta, envs, 0.0, 0.0) == pytest.approx(pooled, rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_objective_matches_naive_double_loop(seed):
    rng = np.random.default_rng(seed)
    envs = gen_multi_env(15, 4, 2, n_envs=2, seed=seed)
    beta = rng.normal(size=4)
    beta[rng.integers(0, 4)] = 0.0
    fast = eills_objective(beta, envs, gamma=2.5, lam=1.5)
    naive = eills_objective_naive(beta, envs, gamma=2.5, lam=1.5)
    assert fast == pytest.approx(naive, rel=1e-10)


def test_enumeration_single_env_reduces_to_best_subset():
    env = gen_multi_env(200, 5, 2, n_envs=1, shift_strength=0.0, noise_sd=0.2,
                        seed=15)[0]
    report = eills_fit_smallp([env], gamma=0.0, lam=1.0)
    # with gamma 0 and a tiny l0 price the enumeration picks the true pair
    assert np.array_equal(report.support, env.support)
    restricted = oracle_ols_fit(env.X, env.y, env.support)
    assert np.allclose(report.beta, restricted.beta, atol=1e-8)


def test_enumeration_refuses_large_p():
    envs = gen_multi_env(10, 20, 2, n_envs=1, seed=16)
    with pytest.raises(ValidationError):
        eills_fit_smallp(envs, 1.0, 1.0)


def test_selection_experiment_recovers_support():
    rate = selection_experiment(trials=8, seed=21)
    assert rate >= 0.75


def test_spurious_experiment_directions():
    single_rate, multi_rate = spurious_experiment(trials=8, seed=22)
    assert single_rate > 0.5
    assert multi_rate < single_rate


# ---------------------------------------------------------------------------
# Rate tables
# ---------------------------------------------------------------------------

def test_nonlinear_rates_coincide_when_p_equals_s():
    rows = rate_curves_nonlinear(10_000, 20, [20])
    values = {r["method"]: r["mean_err"] for r in rows}
    assert values["full_model_rate"] == pytest.approx(values["oracle_model_rate"])


def test_nonlinear_rates_closed_form():
    rows = rate_curves_nonlinear(10_000, 20, [100])
    values = {r["method"]: r["mean_err"] for r in rows}
    assert values["oracle_model_rate"] == pytest.approx(10_000 ** (-2 / 22))
    assert values["full_model_rate"] == pytest.approx(10_000 ** (-2 / 102))
    assert values["oracle_model_rate"] < 1 and values["full_model_rate"] < 1
    assert values["full_model_rate"] > values["oracle_model_rate"]


def test_nonlinear_rates_decrease_in_n():
    lo = rate_curves_nonlinear(1000, 20, [50])[0]["mean_err"]
    hi = rate_curves_nonlinear(4000, 20, [50])[0]["mean_err"]
    assert hi < lo


def test_theoretical_curve_ratio_at_p_e4():
    p = math.e ** 4
    rows_like = math.sqrt(20 * math.log(p) / 1000) / math.sqrt(20 / 1000)
    assert rows_like == pytest.approx(2.0)


def test_convergence_experiment_small_grid_ordering():
    rows = convergence_experiment([400], [40, 120], s_star=5, trials=6, seed=3)
    by_key = {(r["method"], r["n"], r["p"]): r["mean_err"] for r in rows}
    for p in (40, 120):
        assert by_key[("oracle_ols", 400, p)] < by_key[("lasso", 400, p)]
    assert by_key[("lasso_rate", 400, 120)] > by_key[("lasso_rate", 400, 40)]
    assert by_key[("oracle_rate", 400, 120)] == by_key[("oracle_rate", 400, 40)]
    assert set(rows[0]) == {"method", "n", "p", "s", "mean_err", "sd"}
