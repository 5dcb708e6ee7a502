import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from effdiff.forward import (
    marginal_params,
    posterior_coefficients,
    posterior_mean_variance,
    predict_x0,
    q_sample,
    renoise,
)


def _gaussian_condition(mu, cov, idx_known, values):
    # textbook conditioning of a joint Gaussian, written out independently
    idx_unknown = [i for i in range(len(mu)) if i not in idx_known]
    s11 = cov[np.ix_(idx_unknown, idx_unknown)]
    s12 = cov[np.ix_(idx_unknown, idx_known)]
    s22 = cov[np.ix_(idx_known, idx_known)]
    gain = s12 @ np.linalg.inv(s22)
    mean = mu[idx_unknown] + gain @ (values - mu[idx_known])
    return mean, s11 - gain @ s12.T


def test_zero_noise_and_zero_signal(schedule):
    x0 = np.array([[1.0, -2.0]])
    e = np.array([[0.3, 0.4]])
    ab = schedule.alpha_bar[123]
    np.testing.assert_allclose(q_sample(x0, 123, np.zeros_like(x0), schedule), np.sqrt(ab) * x0)
    np.testing.assert_allclose(q_sample(np.zeros_like(e), 123, e, schedule), np.sqrt(1 - ab) * e)


def test_per_row_timesteps(schedule, rng):
    x0 = rng.standard_normal((5, 3))
    eps = rng.standard_normal((5, 3))
    t = np.array([0, 10, 200, 500, 999])
    out = q_sample(x0, t, eps, schedule)
    for i, ti in enumerate(t):
        np.testing.assert_allclose(out[i], q_sample(x0[i], int(ti), eps[i], schedule))


def test_q_sample_errors(schedule):
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 0, np.zeros(3), schedule)
    with pytest.raises(IndexError):
        q_sample(np.zeros(2), 1000, np.zeros(2), schedule)


@pytest.mark.parametrize("t", [0, 250, 999])
def test_standard_normal_marginal_preserved(schedule, t):
    rng = np.random.default_rng(t)
    out = q_sample(rng.standard_normal(100_000), t, rng.standard_normal(100_000), schedule)
    assert abs(out.mean()) < 0.02
    assert abs(out.var() - 1.0) < 0.03


def test_marginal_params_examples(schedule):
    sig, noise = marginal_params(0, schedule)
    assert sig == pytest.approx(0.99995, abs=1e-6)
    assert noise == pytest.approx(0.01, abs=1e-6)
    assert marginal_params(999, schedule)[1] == pytest.approx(1.0, abs=1e-2)


@given(st.integers(0, 999))
def test_marginal_params_unit_power(t):
    from effdiff.schedule import build_linear_schedule

    sig, noise = marginal_params(t, build_linear_schedule())
    assert sig**2 + noise**2 == pytest.approx(1.0, abs=1e-14)


def test_posterior_at_t0_collapses(schedule, rng):
    x0, xt = rng.standard_normal(3), rng.standard_normal(3)
    mean, var = posterior_mean_variance(x0, xt, 0, schedule)
    np.testing.assert_allclose(mean, x0, atol=1e-12)
    assert var == 0.0


def test_posterior_coefficients_equal_levels():
    # with no increment, and x0 == xt, the mean is x0
    c0, ct, var = posterior_coefficients(0.3, 0.3)
    assert var == 0.0
    assert c0 * 1.7 + ct * 1.7 == pytest.approx(1.7)


@pytest.mark.parametrize("t", [1, 500, 999])
def test_posterior_matches_bayes_oracle(schedule, t):
    rng = np.random.default_rng(t)
    x0, xt = rng.standard_normal(), rng.standard_normal()
    ab_prev, ab_t, a_t = schedule.alpha_bar[t - 1], schedule.alpha_bar[t], schedule.alpha[t]
    # joint of (x_prev, x_t) given x0
    mu = np.array([np.sqrt(ab_prev) * x0, np.sqrt(ab_t) * x0])
    v_prev = 1 - ab_prev
    cov = np.array([[v_prev, np.sqrt(a_t) * v_prev], [np.sqrt(a_t) * v_prev, 1 - ab_t]])
    m_ref, v_ref = _gaussian_condition(mu, cov, [1], np.array([xt]))
    mean, var = posterior_mean_variance(x0, xt, t, schedule)
    assert mean == pytest.approx(m_ref[0], rel=1e-10, abs=1e-12)
    assert var == pytest.approx(v_ref[0, 0], rel=1e-8)


def test_gap_posterior_matches_bayes_oracle(schedule):
    t, s = 700, 300
    x0, xt = 0.4, -1.1
    ab_s, ab_t = schedule.alpha_bar[s], schedule.alpha_bar[t]
    mu = np.array([np.sqrt(ab_s) * x0, np.sqrt(ab_t) * x0])
    r = ab_t / ab_s
    cov = np.array([[1 - ab_s, np.sqrt(r) * (1 - ab_s)], [np.sqrt(r) * (1 - ab_s), 1 - ab_t]])
    m_ref, v_ref = _gaussian_condition(mu, cov, [1], np.array([xt]))
    c0, ct, var = posterior_coefficients(ab_t, ab_s)
    assert c0 * x0 + ct * xt == pytest.approx(m_ref[0], rel=1e-10)
    assert var == pytest.approx(v_ref[0, 0], rel=1e-10)


@given(st.integers(0, 999), st.floats(-5, 5), st.floats(-3, 3))
def test_predict_x0_inverts_q_sample(t, x0, e):
    from effdiff.schedule import build_linear_schedule

    s = build_linear_schedule()
    xt = q_sample(np.array([x0]), t, np.array([e]), s)
    assert predict_x0(xt, t, np.array([e]), s)[0] == pytest.approx(x0, abs=1e-6 * (1 + abs(x0)) / np.sqrt(s.alpha_bar[t]))


def test_renoise_composes_marginals(schedule):
    rng = np.random.default_rng(3)
    x0 = np.full(200_000, 1.5)
    x_s = q_sample(x0, 200, rng.standard_normal(x0.shape), schedule)
    x_t = renoise(x_s, 200, 600, schedule, rng)
    ab = schedule.alpha_bar[600]
    assert abs(x_t.mean() - np.sqrt(ab) * 1.5) < 0.01
    assert abs(x_t.var() - (1 - ab)) < 0.01
    with pytest.raises(ValueError):
        renoise(x_s, 600, 200, schedule, rng)
