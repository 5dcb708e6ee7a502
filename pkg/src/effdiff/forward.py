"""Forward noising kernel and the Gaussian reverse posterior.

Timestep ``-1`` stands for clean data (alpha_bar = 1) throughout, which makes
the last reverse step deterministic.
"""

from __future__ import annotations

import numpy as np

from effdiff.schedule import NoiseSchedule


def _check_t(t: int, schedule: NoiseSchedule, allow_clean: bool = False) -> int:
    lo = -1 if allow_clean else 0
    if not lo <= int(t) < schedule.total_steps:
        raise IndexError(f"timestep {t} outside [{lo}, {schedule.total_steps - 1}]")
    return int(t)


def marginal_params(t: int, schedule: NoiseSchedule) -> tuple[float, float]:
    """(signal_scale, noise_std) of q(x_t | x_0)."""
    t = _check_t(t, schedule)
    ab = float(schedule.alpha_bar[t])
    return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Draw x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` may be a scalar or one index per leading row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        _check_t(int(t_arr), schedule)
        ab = schedule.alpha_bar[int(t_arr)]
    else:
        if t_arr.min() < 0 or t_arr.max() >= schedule.total_steps:
            raise IndexError(f"timesteps outside [0, {schedule.total_steps - 1}]")
        ab = schedule.alpha_bar[t_arr].reshape(t_arr.shape + (1,) * (x0.ndim - t_arr.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_coefficients(ab_t: float, ab_prev: float) -> tuple[float, float, float]:
    """Coefficients of q(x_prev | x_t, x0) between two arbitrary levels.

    Returns ``(coef_x0, coef_xt, variance)``. For adjacent steps this is the
    usual DDPM posterior; for a gap it uses the effective increment
    ``1 - ab_t / ab_prev``.
    """
    step_alpha = ab_t / ab_prev
    step_beta = 1.0 - step_alpha
    denom = 1.0 - ab_t
    coef_x0 = np.sqrt(ab_prev) * step_beta / denom
    coef_xt = np.sqrt(step_alpha) * (1.0 - ab_prev) / denom
    variance = (1.0 - ab_prev) / denom * step_beta
    return float(coef_x0), float(coef_xt), float(variance)


def posterior_mean_variance(x0, xt, t: int, schedule: NoiseSchedule) -> tuple[np.ndarray, float]:
    """Mean and (isotropic) variance of q(x_{t-1} | x_t, x0) for adjacent steps."""
    t = _check_t(t, schedule)
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = float(schedule.alpha_bar[t - 1]) if t > 0 else 1.0
    beta_t = float(schedule.beta[t])
    alpha_t = float(schedule.alpha[t])
    denom = 1.0 - ab_t
    mean = (np.sqrt(ab_prev) * beta_t / denom) * x0 + (np.sqrt(alpha_t) * (1.0 - ab_prev) / denom) * xt
    variance = (1.0 - ab_prev) / denom * beta_t
    return mean, float(variance)


def predict_x0(xt, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar_at(t)
    return (np.asarray(xt) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def renoise(x, t_from: int, t_to: int, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Sample q(x_{t_to} | x_{t_from}) for t_to > t_from (forward jump)."""
    ab_from = schedule.alpha_bar_at(t_from)
    ab_to = schedule.alpha_bar_at(t_to)
    if not t_to > t_from:
        raise ValueError(f"forward jump needs t_to > t_from, got {t_from} -> {t_to}")
    ratio = ab_to / ab_from
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(ratio) * x + np.sqrt(1.0 - ratio) * rng.standard_normal(x.shape)
