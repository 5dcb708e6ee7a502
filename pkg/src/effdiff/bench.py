"""Speed/quality measurements of timestep plans.

Inference: for each (strategy, n) cell, time the sampler (median over trials,
first run discarded as warmup), count denoiser calls, and score the samples
with sliced W2 against fresh data.

Training: train a FULL arm and a plan-restricted arm from the same
initialisation and count gradient steps until the held-out loss, measured at
the plan's timesteps, falls below a threshold.
"""

from __future__ import annotations

import csv
import gc
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from effdiff.metrics import sliced_w2
from effdiff.samplers import SamplerConfig, SamplerKind, sample
from effdiff.schedule import NoiseSchedule, Strategy, TimestepPlan, build_plan
from effdiff.training import TrainConfig, evaluate, make_held_out, train_stage1

CSV_COLUMNS = ("sampler", "strategy", "n", "denoiser_calls", "wall_time_s", "sliced_w2", "seed")
DEFAULT_NS = (5, 10, 50, 200, 1000)

# Published before/after costs of the full-size system, kept for comparison:
# inference seconds per image and training hours.
REFERENCE_INFERENCE_S = (58.0, 16.0)
REFERENCE_TRAINING_H = (1570.0, 859.0)


def reduction_pct(before: float, after: float) -> float:
    """Percentage saved going from ``before`` to ``after``."""
    if before <= 0:
        raise ValueError("baseline cost must be positive")
    return 100.0 * (1.0 - after / before)


@dataclass(frozen=True)
class BenchRow:
    sampler: str
    strategy: str
    n: int
    denoiser_calls: int
    wall_time_s: float
    sliced_w2: float
    seed: int


@dataclass
class BenchmarkReport:
    rows: list[BenchRow] = field(default_factory=list)
    environment: dict[str, str] = field(default_factory=dict)

    def select(self, strategy: str | None = None, n: int | None = None) -> list[BenchRow]:
        return [
            r for r in self.rows if (strategy is None or r.strategy == strategy) and (n is None or r.n == n)
        ]


def environment_fingerprint() -> dict[str, str]:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def default_grid(ns: Sequence[int] = DEFAULT_NS) -> list[tuple[Strategy, int]]:
    return [(s, n) for s in Strategy for n in ns]


def run_inference_bench(
    schedule: NoiseSchedule,
    denoiser,
    grid: Sequence[tuple[Strategy | str, int]],
    trials: int,
    seed: int,
    data_sampler: Callable[[int, np.random.Generator], np.ndarray],
    *,
    kind: SamplerKind | str = SamplerKind.PLMS,
    n_points: int = 2048,
    cond=None,
    exponent: float = 2.0,
    n_proj: int = 64,
) -> BenchmarkReport:
    """Time and score the sampler over a grid of plans.

    ``data_sampler(n, rng)`` draws reference data points for the W2 score.
    """
    if not grid:
        raise ValueError("benchmark grid is empty")
    report = BenchmarkReport(environment=environment_fingerprint())
    if trials <= 0:
        return report
    kind = SamplerKind(kind)
    dim = None
    for strategy, n in grid:
        plan = build_plan(schedule, strategy, n, exponent)
        times, calls, final = [], [], None
        for trial in range(trials + 1):
            cfg = SamplerConfig(kind, plan, seed=seed + trial, keep_states=False)
            if dim is None:
                dim = len(data_sampler(1, np.random.default_rng(0))[0])
            gc.collect()
            traj = sample(cfg, denoiser, cond, schedule, dim, n_points)
            if trial == 0:
                continue  # warmup
            times.append(traj.wall_time)
            calls.append(traj.denoiser_calls)
            if final is None:
                final = traj.final
        if len(set(calls)) != 1:
            raise RuntimeError(f"denoiser call count varied across trials: {calls}")
        ref = data_sampler(n_points, np.random.default_rng(seed + 10_000))
        w2 = sliced_w2(final, ref, n_proj=n_proj, seed=seed)
        report.rows.append(
            BenchRow(kind.value, Strategy(strategy).value, plan.n, calls[0], statistics.median(times), w2, seed)
        )
    return report


def noise_floor(data_sampler, n_points: int, seed: int, n_proj: int = 64) -> float:
    """Sliced W2 between two independent data draws of the same size."""
    a = data_sampler(n_points, np.random.default_rng(seed + 20_000))
    b = data_sampler(n_points, np.random.default_rng(seed + 30_000))
    return sliced_w2(a, b, n_proj=n_proj, seed=seed)


# --------------------------------------------------------------------------
# Training efficiency


@dataclass(frozen=True)
class ArmResult:
    name: str
    steps: int
    reached: bool
    wall_time_s: float
    final_loss: float


@dataclass(frozen=True)
class TrainingBenchReport:
    threshold: float
    budget: int
    plan_steps: tuple[int, ...]
    seed: int
    full: ArmResult
    restricted: ArmResult

    @property
    def step_ratio(self) -> float:
        """Restricted-arm steps over FULL-arm steps (unreached arms count the budget)."""
        if self.full.steps == 0:
            return 1.0 if self.restricted.steps == 0 else float("inf")
        return self.restricted.steps / self.full.steps

    @property
    def reduction_pct(self) -> float:
        return 100.0 * (1.0 - self.step_ratio)


def _steps_to_threshold(name, model, task, schedule, config, held, threshold, budget, eval_every) -> ArmResult:
    start = time.perf_counter()
    initial = evaluate(model, held, schedule).l_ldm
    if initial <= threshold:
        return ArmResult(name, 0, True, time.perf_counter() - start, initial)
    hit = {}

    def check(step, m):
        if step % eval_every:
            return False
        loss = evaluate(m, held, schedule).l_ldm
        hit["last"] = loss
        if loss <= threshold:
            hit["step"] = step
            return True
        return False

    train_stage1(config, model, task, schedule, steps=budget, callback=check)
    reached = "step" in hit
    return ArmResult(
        name,
        hit.get("step", budget),
        reached,
        time.perf_counter() - start,
        hit.get("last", initial),
    )


def run_training_bench(
    task,
    schedule: NoiseSchedule,
    model,
    config: TrainConfig,
    plan: TimestepPlan,
    threshold: float,
    seed: int,
    *,
    budget: int = 5000,
    eval_every: int = 50,
    n_eval: int = 4000,
    restricted_plan: TimestepPlan | None | str = "same",
) -> TrainingBenchReport:
    """Steps-to-threshold for a FULL arm and a plan-restricted arm.

    Both arms start from ``model`` with the same seed and are scored on a
    shared held-out set whose timesteps cycle through ``plan``.
    ``restricted_plan`` overrides the second arm's training plan (used to
    check that identical arms tie).
    """
    held = make_held_out(task, schedule, n_eval, seed + 777, timesteps=plan.steps)
    base = replace(config, seed=seed)
    arm_plan = plan if restricted_plan == "same" else restricted_plan
    full = _steps_to_threshold("full", model, task, schedule, replace(base, plan=None), held, threshold, budget, eval_every)
    restricted = _steps_to_threshold(
        "plan", model, task, schedule, replace(base, plan=arm_plan), held, threshold, budget, eval_every
    )
    return TrainingBenchReport(threshold, budget, tuple(plan.steps), seed, full, restricted)


# --------------------------------------------------------------------------
# Output


def emit_csv(report: BenchmarkReport, path: str | Path) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in report.rows:
                w.writerow([r.sampler, r.strategy, r.n, r.denoiser_calls, repr(r.wall_time_s), repr(r.sliced_w2), r.seed])
    except OSError as exc:
        raise OSError(f"could not write benchmark CSV to {path}: {exc}") from exc
    return path


def read_csv(path: str | Path) -> BenchmarkReport:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        rows = [
            BenchRow(s, st, int(n), int(c), float(wt), float(w2), int(sd)) for s, st, n, c, wt, w2, sd in reader
        ]
    return BenchmarkReport(rows)


def emit_plots(report: BenchmarkReport, path: str | Path) -> list[Path]:
    """Write steps-vs-W2 and steps-vs-time SVG plots next to ``path``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    base = Path(path)
    out = []
    for column, ylabel, suffix in (("sliced_w2", "sliced W2 to data", "w2"), ("wall_time_s", "wall time [s]", "time")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for strategy in sorted({r.strategy for r in report.rows}):
            rows = sorted(report.select(strategy), key=lambda r: r.n)
            ax.plot([r.n for r in rows], [getattr(r, column) for r in rows], marker="o", label=strategy)
        ax.set_xscale("log")
        ax.set_xlabel("plan length n")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        target = base.with_name(f"{base.stem}_{suffix}.svg")
        fig.savefig(target, format="svg")
        plt.close(fig)
        out.append(target)
    return out


def report_to_dict(report: BenchmarkReport) -> dict:
    return {"environment": report.environment, "rows": [asdict(r) for r in report.rows]}
