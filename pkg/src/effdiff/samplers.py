"""Reverse-process samplers over a timestep plan.

A sampler walks the plan from ``T - 1`` down to clean data (level ``-1``),
calling the denoiser once per plan step. Non-adjacent steps reuse the
two-level posterior with alpha_bar taken at the two plan levels.
"""

from __future__ import annotations

import csv
import enum
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from effdiff.denoiser import ConditionInput
from effdiff.forward import posterior_coefficients, predict_x0, renoise
from effdiff.schedule import NoiseSchedule, TimestepPlan

# Adams-Bashforth weights, newest prediction first.
PLMS_COEFFICIENTS: dict[int, tuple[Fraction, ...]] = {
    1: (Fraction(1),),
    2: (Fraction(3, 2), Fraction(-1, 2)),
    3: (Fraction(23, 12), Fraction(-16, 12), Fraction(5, 12)),
    4: (Fraction(55, 24), Fraction(-59, 24), Fraction(37, 24), Fraction(-9, 24)),
}


class SamplerKind(str, enum.Enum):
    ANCESTRAL = "ancestral"
    DDIM = "ddim"
    PLMS = "plms"


@dataclass(frozen=True)
class RepaintParams:
    jump_len: int = 2
    n_resample: int = 3
    stepper: SamplerKind = SamplerKind.ANCESTRAL

    def __post_init__(self):
        object.__setattr__(self, "stepper", SamplerKind(self.stepper))
        if self.jump_len < 1 or self.n_resample < 1:
            raise ValueError("repaint jump_len and n_resample must be >= 1")


@dataclass(frozen=True)
class SamplerConfig:
    kind: SamplerKind
    plan: TimestepPlan
    seed: int = 0
    eta: float = 0.0
    repaint: RepaintParams | None = None
    keep_states: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplerKind(self.kind))
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")


@dataclass
class InpaintMask:
    m: np.ndarray
    known_x0: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        self.known_x0 = np.asarray(self.known_x0, dtype=np.float64)
        if not np.all((self.m == 0) | (self.m == 1)):
            raise ValueError("mask entries must be 0 or 1")


@dataclass
class Trajectory:
    """Sampler output.

    ``states`` holds ``(t, x)`` after every plan step, ending with ``t = -1``
    (the clean sample); ``initial`` is the starting noise at ``T - 1``. With
    ``keep_states=False`` only the final state is retained.
    """

    initial: np.ndarray
    states: list[tuple[int, np.ndarray]]
    wall_time: float
    denoiser_calls: int
    seed: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.states[-1][1]


def _check_order(t: int, t_prev: int) -> None:
    if not t_prev < t:
        raise ValueError(f"reverse step needs t_prev < t, got {t} -> {t_prev}")


def ddpm_step(xt, t: int, t_prev: int, eps_hat, schedule: NoiseSchedule, rng: np.random.Generator | None) -> np.ndarray:
    """Ancestral step: estimate x0, then sample q(x_{t_prev} | x_t, x0_hat)."""
    _check_order(t, t_prev)
    x0_hat = predict_x0(xt, t, eps_hat, schedule)
    if t_prev == -1:
        return x0_hat
    coef_x0, coef_xt, var = posterior_coefficients(schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev))
    mean = coef_x0 * x0_hat + coef_xt * np.asarray(xt)
    return mean + np.sqrt(var) * rng.standard_normal(np.shape(xt))


def ddim_step(xt, t: int, t_prev: int, eps_hat, eta: float, schedule: NoiseSchedule, rng: np.random.Generator | None = None) -> np.ndarray:
    _check_order(t, t_prev)
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t_prev)
    x0_hat = predict_x0(xt, t, eps_hat, schedule)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * np.asarray(eps_hat)
    if sigma > 0:
        out = out + sigma * rng.standard_normal(np.shape(xt))
    return out


def plms_combine(eps_history: Sequence[np.ndarray]) -> np.ndarray:
    """Adams-Bashforth combination of up to four predictions, newest first."""
    if len(eps_history) == 0:
        raise ValueError("PLMS needs at least one noise prediction")
    order = min(len(eps_history), 4)
    coefs = PLMS_COEFFICIENTS[order]
    out = float(coefs[0]) * np.asarray(eps_history[0])
    for c, e in zip(coefs[1:], eps_history[1:order]):
        out = out + float(c) * np.asarray(e)
    return out


def plms_step(xt, t: int, t_prev: int, eps_history: Sequence[np.ndarray], schedule: NoiseSchedule):
    """Deterministic multistep update.

    ``eps_history`` is newest-first and already contains the prediction at
    ``t``. Returns ``(x_prev, history)`` with the history capped at four.
    """
    eps_prime = plms_combine(eps_history)
    return ddim_step(xt, t, t_prev, eps_prime, 0.0, schedule), list(eps_history[:4])


class _Stepper:
    def __init__(self, kind: SamplerKind, eta: float, schedule: NoiseSchedule, rng):
        self.kind = SamplerKind(kind)
        self.eta = eta
        self.schedule = schedule
        self.rng = rng
        self.history: list[np.ndarray] = []

    def reset(self) -> None:
        self.history = []

    def __call__(self, x, t, t_prev, eps):
        if self.kind is SamplerKind.ANCESTRAL:
            return ddpm_step(x, t, t_prev, eps, self.schedule, self.rng)
        if self.kind is SamplerKind.DDIM:
            return ddim_step(x, t, t_prev, eps, self.eta, self.schedule, self.rng)
        x, self.history = plms_step(x, t, t_prev, [eps] + self.history, self.schedule)
        return x


def sample(config: SamplerConfig, denoiser, cond: ConditionInput | None, schedule: NoiseSchedule, d: int, n_samples: int = 1) -> Trajectory:
    """Draw ``n_samples`` points by walking the plan from pure noise."""
    rng = np.random.default_rng(config.seed)
    calls0 = denoiser.calls
    start = time.perf_counter()
    x = rng.standard_normal((n_samples, d))
    initial = x
    stepper = _Stepper(config.kind, config.eta, schedule, rng)
    levels = config.plan.levels()
    states = []
    for t, t_prev in zip(levels[:-1], levels[1:]):
        eps = denoiser.predict(x, t, cond)
        x = stepper(x, t, t_prev, eps)
        if config.keep_states or t_prev == -1:
            states.append((t_prev, x))
    wall = time.perf_counter() - start
    return Trajectory(initial, states, wall, denoiser.calls - calls0, config.seed)


def repaint_schedule(n_steps: int, jump_len: int, n_resample: int) -> list[tuple[str, int]]:
    """Sequence of moves over plan level indices 0..n_steps (0 = T-1, n_steps = clean).

    ``("down", k)`` denoises level k -> k+1; ``("up", k)`` re-noises from
    level k back to level k - jump_len. After every ``jump_len`` completed
    down-steps (except the final one reaching clean data) the last block is
    re-noised and redone ``n_resample`` times.
    """
    moves: list[tuple[str, int]] = []
    for k in range(n_steps):
        moves.append(("down", k))
        done = k + 1
        if done % jump_len == 0 and done < n_steps:
            for _ in range(n_resample):
                moves.append(("up", done))
                moves.extend(("down", j) for j in range(done - jump_len, done))
    return moves


def repaint_sample(config: SamplerConfig, denoiser, cond: ConditionInput | None, mask: InpaintMask, schedule: NoiseSchedule, n_samples: int = 1) -> Trajectory:
    """Inpainting: known coordinates are re-imposed (noised to the current
    level) after every step, with periodic re-noise-and-redo passes."""
    if config.repaint is None:
        raise ValueError("repaint_sample needs SamplerConfig.repaint")
    d = mask.known_x0.shape[-1]
    if mask.m.shape[-1] != d:
        raise ValueError(f"mask has {mask.m.shape[-1]} coordinates, known_x0 has {d}")
    rp = config.repaint
    rng = np.random.default_rng(config.seed)
    calls0 = denoiser.calls
    start = time.perf_counter()
    m = mask.m
    known = np.broadcast_to(mask.known_x0, (n_samples, d))

    levels = config.plan.levels()
    n_steps = len(levels) - 1
    x = rng.standard_normal((n_samples, d))
    initial = x
    stepper = _Stepper(rp.stepper, config.eta, schedule, rng)
    last_visit: dict[int, np.ndarray] = {}
    for move, k in repaint_schedule(n_steps, rp.jump_len, rp.n_resample):
        if move == "up":
            x = renoise(x, levels[k], levels[k - rp.jump_len], schedule, rng)
            stepper.reset()
            continue
        t, t_prev = levels[k], levels[k + 1]
        eps = denoiser.predict(x, t, cond)
        x_step = stepper(x, t, t_prev, eps)
        if t_prev == -1:
            x_known = known
        else:
            ab = schedule.alpha_bar_at(t_prev)
            x_known = np.sqrt(ab) * known + np.sqrt(1.0 - ab) * rng.standard_normal(known.shape)
        x = m * x_known + (1.0 - m) * x_step
        if t_prev == -1:
            # masked coordinates copied verbatim, no arithmetic round-off
            x = np.where(m == 1, known, x)
        if config.keep_states or t_prev == -1:
            last_visit[t_prev] = x
    wall = time.perf_counter() - start
    states = sorted(last_visit.items(), key=lambda kv: -kv[0])
    return Trajectory(initial, states, wall, denoiser.calls - calls0, config.seed)


def expected_repaint_calls(n_steps: int, jump_len: int, n_resample: int) -> int:
    jumps = sum(1 for k in range(1, n_steps) if k % jump_len == 0)
    return n_steps + n_resample * jump_len * jumps


def write_trajectory_csv(traj: Trajectory, path: str | Path, n_points: int = 1) -> None:
    """One row per (step, sample) for the first ``n_points`` samples; the seed
    is recorded in the header row."""
    d = traj.final.shape[-1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step_index", "t", "sample", *[f"x{i}" for i in range(d)], f"seed={traj.seed}"])
        for step, (t, x) in enumerate(traj.states):
            for j in range(min(n_points, len(x))):
                w.writerow([step, t, j, *[repr(float(v)) for v in x[j]]])


def read_trajectory_csv(path: str | Path) -> tuple[int, list[tuple[int, int, int, np.ndarray]]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    seed = int(rows[0][-1].split("=", 1)[1])
    out = [(int(r[0]), int(r[1]), int(r[2]), np.array([float(v) for v in r[3:]])) for r in rows[1:]]
    return seed, out
