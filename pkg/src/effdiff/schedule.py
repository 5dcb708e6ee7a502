"""Noise schedules and timestep plans.

A :class:`NoiseSchedule` holds the per-step variance tables of the forward
process. A :class:`TimestepPlan` is an ordered subset of its timesteps; the
samplers (and optionally training) only ever visit the steps of a plan.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    total_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar):
            arr.setflags(write=False)

    @property
    def T(self) -> int:
        return self.total_steps

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal power at ``t``; ``t == -1`` denotes clean data (1.0)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.total_steps:
            raise IndexError(f"timestep {t} outside [-1, {self.total_steps - 1}]")
        return float(self.alpha_bar[t])


def build_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    for name, v in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start!r}, {beta_end!r}"
        )
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar, float(beta_start), float(beta_end))


class Strategy(str, enum.Enum):
    UNIFORM_STRIDE = "uniform_stride"
    QUADRATIC_FRONT = "quadratic_front"
    POWER_TAIL = "power_tail"


@dataclass(frozen=True)
class TimestepPlan:
    """Increasing timestep indices visited by a sampler, ending at ``T - 1``.

    Construction does not validate; use :func:`build_plan` for valid plans and
    :func:`validate_plan` to audit arbitrary ones.
    """

    steps: tuple[int, ...]
    strategy: Strategy
    T: int
    exponent: float | None = None

    @property
    def n(self) -> int:
        return len(self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def levels(self) -> list[int]:
        """Timesteps in sampling order followed by ``-1`` (clean data)."""
        return list(reversed(self.steps)) + [-1]


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _power_tail_offset(T: int, i: int, n: int, p: float) -> int:
    # ceil((T-1) * (1 - (i+1)/n) ** p), exact when p is integral
    if float(p).is_integer() and p >= 0:
        v = Fraction(T - 1) * (Fraction(n - i - 1, n) ** int(p))
        return math.ceil(v)
    v = (T - 1) * (1.0 - (i + 1) / n) ** p
    # snap float noise so that exact integers do not ceil upwards
    nearest = round(v)
    if abs(v - nearest) <= 1e-9 * max(1.0, abs(v)):
        return int(nearest)
    return math.ceil(v)


def _dedup_and_pad(raw: list[int], T: int, n: int) -> tuple[int, ...]:
    kept = sorted(set(raw))
    if len(kept) < n:
        used = set(kept)
        pad = [t for t in range(T - 1, -1, -1) if t not in used][: n - len(kept)]
        kept = sorted(kept + pad)
    return tuple(kept)


def build_plan(
    schedule: NoiseSchedule | int,
    strategy: Strategy | str,
    n: int,
    exponent: float = 2.0,
) -> TimestepPlan:
    """Pick ``n`` of the schedule's timesteps according to ``strategy``.

    ``uniform_stride`` spaces steps evenly, ``quadratic_front`` packs them
    towards t=0 and ``power_tail`` (with ``exponent``) packs them towards
    t=T-1. Collisions from integer rounding are removed and the plan is
    refilled with the largest unused timesteps, so its length is always ``n``.
    """
    T = schedule if isinstance(schedule, (int, np.integer)) else schedule.total_steps
    T = int(T)
    strategy = Strategy(strategy)
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or not 1 <= n <= T:
        raise ValueError(f"plan length n must satisfy 1 <= n <= T={T}, got {n!r}")
    n = int(n)

    if strategy is Strategy.UNIFORM_STRIDE:
        raw = [_ceil_div((i + 1) * T, n) - 1 for i in range(n)]
    elif strategy is Strategy.QUADRATIC_FRONT:
        raw = [_ceil_div(T * (i + 1) ** 2, n * n) - 1 for i in range(n)]
    else:
        if not (math.isfinite(exponent) and exponent > 0):
            raise ValueError(f"power_tail exponent must be positive, got {exponent!r}")
        raw = [T - 1 - _power_tail_offset(T, i, n, exponent) for i in range(n)]

    steps = _dedup_and_pad(raw, T, n)
    return TimestepPlan(
        steps=steps,
        strategy=strategy,
        T=T,
        exponent=float(exponent) if strategy is Strategy.POWER_TAIL else None,
    )


def full_plan(schedule: NoiseSchedule) -> TimestepPlan:
    return build_plan(schedule, Strategy.UNIFORM_STRIDE, schedule.total_steps)


def validate_plan(plan: TimestepPlan, schedule: NoiseSchedule) -> list[str]:
    """Return one message per violated plan invariant (empty when valid)."""
    T = schedule.total_steps
    steps = list(plan.steps)
    problems: list[str] = []
    if not steps:
        return ["empty plan"]
    bad = [t for t in steps if not 0 <= t < T]
    if bad:
        problems.append(f"steps out of range [0, {T - 1}]: {bad}")
    if any(b <= a for a, b in zip(steps, steps[1:])):
        problems.append("not strictly increasing")
    if steps[-1] != T - 1:
        problems.append("no terminal step")
    if plan.T != T:
        problems.append(f"plan built for T={plan.T}, schedule has T={T}")
    return problems


def plan_to_dict(plan: TimestepPlan, schedule: NoiseSchedule) -> dict[str, Any]:
    doc = {
        "T": schedule.total_steps,
        "beta_start": schedule.beta_start,
        "beta_end": schedule.beta_end,
        "strategy": plan.strategy.value,
        "n": plan.n,
        "steps": list(plan.steps),
    }
    if plan.exponent is not None:
        doc["exponent"] = plan.exponent
    return doc


def plan_from_dict(doc: dict[str, Any]) -> tuple[TimestepPlan, NoiseSchedule]:
    schedule = build_linear_schedule(int(doc["T"]), float(doc["beta_start"]), float(doc["beta_end"]))
    plan = TimestepPlan(
        steps=tuple(int(s) for s in doc["steps"]),
        strategy=Strategy(doc["strategy"]),
        T=int(doc["T"]),
        exponent=doc.get("exponent"),
    )
    if len(plan.steps) != int(doc["n"]):
        raise ValueError(f"plan document says n={doc['n']} but lists {len(plan.steps)} steps")
    return plan, schedule


def dumps_plan(plan: TimestepPlan, schedule: NoiseSchedule) -> str:
    return json.dumps(plan_to_dict(plan, schedule), indent=2)


def loads_plan(text: str) -> tuple[TimestepPlan, NoiseSchedule]:
    return plan_from_dict(json.loads(text))
