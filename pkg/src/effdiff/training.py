"""Loss assembly and the two-stage training loop.

Stage 1 fits the noise-prediction loss alone on augmented inputs. Stage 2
continues from the stage-1 model and adds the attention total-variation
penalty, ``l_total = l_ldm + lambda_atv * l_atv``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from effdiff.attention import atv_grad, atv_loss
from effdiff.denoiser import ConditionInput, MlpDenoiser, mlp_backward, mlp_forward
from effdiff.forward import q_sample
from effdiff.schedule import NoiseSchedule, TimestepPlan


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_atv: float = 1e-3
    stage1_steps: int = 5000
    stage2_steps: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    momentum: float = 0.9
    plan: TimestepPlan | None = None  # None trains on every timestep
    seed: int = 0
    augment: bool = True
    jitter_std: float = 0.05
    atv_target: str = "features"  # or "weights": penalise the attention matrix instead

    def __post_init__(self):
        if self.lambda_atv < 0 or not math.isfinite(self.lambda_atv):
            raise ValueError(f"lambda_atv must be finite and >= 0, got {self.lambda_atv}")
        for name in ("stage1_steps", "stage2_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.atv_target not in ("features", "weights"):
            raise ValueError(f"atv_target must be 'features' or 'weights', got {self.atv_target!r}")


@dataclass(frozen=True)
class LossBreakdown:
    l_ldm: float
    l_atv: float
    l_total: float


def total_loss(l_ldm: float, l_atv: float, lambda_atv: float) -> float:
    return l_ldm + lambda_atv * l_atv


def ldm_loss(denoiser, x0, cond, t, eps, schedule: NoiseSchedule):
    """Mean over the batch of ||eps - eps_hat(q_sample(x0, t, eps), t, cond)||^2.

    Returns ``(loss, grads)``; ``grads`` is ``None`` for predictors without
    trainable parameters.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    xt = q_sample(x0, t, eps, schedule)
    if isinstance(denoiser, MlpDenoiser):
        eps_hat, cache = mlp_forward(denoiser, xt, t, cond)
        resid = eps - eps_hat
        loss = float(np.mean(np.sum(resid**2, axis=1)))
        grads = mlp_backward(denoiser, cache, -2.0 * resid / len(x0))
        return loss, grads
    t_arr = np.broadcast_to(np.asarray(t), (len(x0),))
    resid = np.empty_like(eps)
    for tv in np.unique(t_arr):
        rows = np.flatnonzero(t_arr == tv)
        sub = cond.take(rows) if cond is not None else None
        resid[rows] = eps[rows] - denoiser.predict(xt[rows], int(tv), sub)
    return float(np.mean(np.sum(resid**2, axis=1))), None


def _penalty(amap, target: str):
    source = amap.features if target == "features" else amap.weights
    return atv_loss(source), atv_grad(source)


def objective(model: MlpDenoiser, x0, cond, t, eps, schedule, lambda_atv: float, atv_target: str = "features"):
    """One forward/backward pass of the combined loss. Returns ``(LossBreakdown, grads)``.

    The ATV term is measured whenever the model ran attention; its gradient
    is only propagated when ``lambda_atv > 0``.
    """
    xt = q_sample(x0, t, eps, schedule)
    eps_hat, cache = mlp_forward(model, xt, t, cond)
    n = len(x0)
    resid = eps - eps_hat
    l_ldm = float(np.mean(np.sum(resid**2, axis=1)))
    l_atv = 0.0
    grad_fm = grad_w = None
    if cache.attn is not None:
        per_sample, g = _penalty(cache.attn.amap, atv_target)
        l_atv = float(np.mean(per_sample))
        if lambda_atv > 0:
            if atv_target == "features":
                grad_fm = (lambda_atv / n) * g
            else:
                grad_w = (lambda_atv / n) * g
    grads = mlp_backward(model, cache, -2.0 * resid / n, grad_fm=grad_fm, grad_weights=grad_w)
    return LossBreakdown(l_ldm, l_atv, total_loss(l_ldm, l_atv, lambda_atv)), grads


def sample_timestep_from_plan(plan: TimestepPlan | None, rng: np.random.Generator, size=None, T: int | None = None):
    """Uniform draw over the plan's timesteps, or over 0..T-1 when ``plan`` is None."""
    if plan is None:
        if T is None:
            raise ValueError("T is required when sampling from the full range")
        return rng.integers(0, T, size=size)
    steps = np.asarray(plan.steps)
    return steps[rng.integers(0, len(steps), size=size)]


class MomentumSGD:
    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v -= self.lr * grads[k]
            p += v


@dataclass
class TrainResult:
    model: MlpDenoiser
    curve: list[LossBreakdown] = field(default_factory=list)


def _augment(x0, cond: ConditionInput, task, config: TrainConfig, rng):
    if not config.augment:
        return x0, cond
    cid = np.asarray(cond.class_id)
    if task.sign_symmetric:
        signs = rng.choice(np.array([-1.0, 1.0]), size=(len(x0), 1))
        x0 = x0 * signs
        flipped = signs[:, 0] < 0
        if np.any(flipped) and cid.ndim:
            new_ids = np.where(flipped, task.flip_class(cid), cid)
            if not np.array_equal(new_ids, cid):
                cond = task.condition(new_ids)
    x0 = x0 + config.jitter_std * rng.standard_normal(x0.shape)
    return x0, cond


def _run(model, task, schedule, config: TrainConfig, steps: int, lambda_atv: float, callback=None) -> TrainResult:
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    opt = MomentumSGD(model.params(), config.lr, config.momentum)
    allowed = None if config.plan is None else set(config.plan.steps)
    curve = []
    for _ in range(steps):
        t = sample_timestep_from_plan(config.plan, rng, size=config.batch_size, T=schedule.total_steps)
        if allowed is not None:
            assert allowed.issuperset(t.tolist()), "drew a timestep outside the training plan"
        x0, cond = task.sample(config.batch_size, rng)
        x0, cond = _augment(x0, cond, task, config, rng)
        eps = rng.standard_normal(x0.shape)
        losses, grads = objective(model, x0, cond, t, eps, schedule, lambda_atv, config.atv_target)
        if not math.isfinite(losses.l_total):
            raise TrainingDiverged(f"non-finite loss at step {len(curve)}: {losses}")
        curve.append(losses)
        opt.step(grads)
        if callback is not None and callback(len(curve), model):
            break
    return TrainResult(model, curve)


def train_stage1(config: TrainConfig, model: MlpDenoiser, task, schedule: NoiseSchedule, steps: int | None = None, callback=None) -> TrainResult:
    """Noise-prediction training only. Returns a trained copy of ``model``.

    ``callback(step, model)`` runs after every update; returning True stops
    training early.
    """
    n = config.stage1_steps if steps is None else steps
    return _run(model, task, schedule, config, n, 0.0, callback)


def train_stage2(config: TrainConfig, model: MlpDenoiser, task, schedule: NoiseSchedule, steps: int | None = None) -> TrainResult:
    """Refinement with the attention total-variation penalty added."""
    if model.attention is None:
        raise ValueError("stage 2 needs a model with an attention block")
    return _run(model, task, schedule, config, config.stage2_steps if steps is None else steps, config.lambda_atv)


def train_two_stage(config: TrainConfig, model: MlpDenoiser, task, schedule: NoiseSchedule) -> tuple[TrainResult, TrainResult]:
    first = train_stage1(config, model, task, schedule)
    # stage 2 draws from its own stream so it does not replay stage 1's batches
    second = train_stage2(replace(config, seed=config.seed + 1), first.model, task, schedule)
    return first, second


# --------------------------------------------------------------------------
# Held-out evaluation


@dataclass(frozen=True)
class HeldOut:
    x0: np.ndarray
    cond: ConditionInput
    t: np.ndarray
    eps: np.ndarray


def make_held_out(task, schedule: NoiseSchedule, n: int, seed: int, timesteps: Sequence[int] | None = None) -> HeldOut:
    """A fixed evaluation set; timesteps cycle through ``timesteps`` (default: all)."""
    rng = np.random.default_rng(seed)
    x0, cond = task.sample(n, rng)
    eps = rng.standard_normal(x0.shape)
    if timesteps is None:
        t = rng.integers(0, schedule.total_steps, size=n)
    else:
        t = np.resize(np.asarray(timesteps), n)
    return HeldOut(x0, cond, t, eps)


def evaluate(model: MlpDenoiser, held: HeldOut, schedule: NoiseSchedule, atv_target: str = "features") -> LossBreakdown:
    losses, _ = objective(model, held.x0, held.cond, held.t, held.eps, schedule, 0.0, atv_target)
    return losses


def bayes_loss(task, held: HeldOut, schedule: NoiseSchedule) -> float:
    """Noise-prediction loss of the exact predictor on ``held`` (the irreducible floor)."""
    loss, _ = ldm_loss(task.oracle(schedule), held.x0, held.cond, held.t, held.eps, schedule)
    return loss


def write_loss_curve(curve: Sequence[LossBreakdown], path: str | Path, start_step: int = 0, append: bool = False) -> None:
    path = Path(path)
    with path.open("a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["step", "l_ldm", "l_atv", "l_total"])
        for i, lb in enumerate(curve):
            w.writerow([start_step + i, repr(lb.l_ldm), repr(lb.l_atv), repr(lb.l_total)])
