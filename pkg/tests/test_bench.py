import csv
import math

import numpy as np
import pytest

from effdiff.bench import (
    CSV_COLUMNS,
    REFERENCE_INFERENCE_S,
    REFERENCE_TRAINING_H,
    BenchmarkReport,
    BenchRow,
    default_grid,
    emit_csv,
    emit_plots,
    noise_floor,
    read_csv,
    reduction_pct,
    run_inference_bench,
    run_training_bench,
)
from effdiff.denoiser import GmmOracle, MlpDenoiser
from effdiff.schedule import build_plan
from effdiff.tasks import GmmTask, two_mode_gmm
from effdiff.training import TrainConfig


def _data(n, rng):
    return two_mode_gmm(2).sample(n, rng)[0]


def test_reference_reductions():
    assert round(reduction_pct(*REFERENCE_INFERENCE_S), 1) == 72.4
    assert round(reduction_pct(*REFERENCE_TRAINING_H), 1) == 45.3
    with pytest.raises(ValueError):
        reduction_pct(0.0, 1.0)


def test_default_grid_cardinality():
    grid = default_grid()
    assert len(grid) == 15
    assert sorted({n for _, n in grid}) == [5, 10, 50, 200, 1000]


def test_zero_trials_empty(schedule):
    rep = run_inference_bench(schedule, GmmOracle(two_mode_gmm(2), schedule), default_grid(), 0, 0, _data)
    assert rep.rows == []
    assert "python" in rep.environment
    with pytest.raises(ValueError):
        run_inference_bench(schedule, GmmOracle(two_mode_gmm(2), schedule), [], 1, 0, _data)


def test_inference_bench_rows(schedule):
    o = GmmOracle(two_mode_gmm(2), schedule)
    grid = [("quadratic_front", 5), ("uniform_stride", 10)]
    rep = run_inference_bench(schedule, o, grid, 2, 7, _data, n_points=128)
    assert [(r.strategy, r.n, r.denoiser_calls) for r in rep.rows] == [("quadratic_front", 5, 5), ("uniform_stride", 10, 10)]
    assert all(r.sampler == "plms" and r.seed == 7 and r.wall_time_s > 0 for r in rep.rows)
    # quality scores are deterministic given the seed; only times vary
    again = run_inference_bench(schedule, o, grid, 2, 7, _data, n_points=128)
    assert [r.sliced_w2 for r in rep.rows] == [r.sliced_w2 for r in again.rows]
    assert rep.select("uniform_stride")[0].n == 10


def test_noise_floor_positive():
    assert 0 < noise_floor(_data, 512, 0) < 0.5


def test_csv_header_only_and_round_trip(tmp_path):
    empty = emit_csv(BenchmarkReport(), tmp_path / "e.csv")
    assert empty.read_text().splitlines() == [",".join(CSV_COLUMNS)]
    rep = BenchmarkReport([BenchRow("plms", "quadratic_front", 50, 50, 0.1 / 3, math.pi, 2),
                           BenchRow("ddim", "power_tail", 5, 5, 1e-9, 0.0, 0)])
    path = emit_csv(rep, tmp_path / "r.csv")
    assert read_csv(path).rows == rep.rows
    header = next(csv.reader(path.open()))
    assert tuple(header) == CSV_COLUMNS


def test_csv_io_error_names_path(tmp_path):
    with pytest.raises(OSError, match="missing_dir"):
        emit_csv(BenchmarkReport(), tmp_path / "missing_dir" / "x.csv")


def test_plots_written(tmp_path):
    rep = BenchmarkReport([BenchRow("plms", s, n, n, 0.01 * n, 1.0 / n, 0) for s in ("a", "b") for n in (5, 50)])
    paths = emit_plots(rep, tmp_path / "bench.csv")
    assert sorted(p.name for p in paths) == ["bench_time.svg", "bench_w2.svg"]
    assert all(p.read_text().lstrip().startswith("<?xml") for p in paths)


def _training_setup(schedule):
    task = GmmTask(two_mode_gmm(2))
    model = MlpDenoiser.init(2, np.random.default_rng(0), hidden=(32, 32))
    return task, model, build_plan(schedule, "quadratic_front", 10)


def test_training_bench_infinite_threshold(schedule):
    task, model, plan = _training_setup(schedule)
    rep = run_training_bench(task, schedule, model, TrainConfig(), plan, math.inf, 0, budget=10, n_eval=64)
    assert rep.full.steps == rep.restricted.steps == 0
    assert rep.step_ratio == 1.0


def test_training_bench_identical_arms_tie(schedule):
    task, model, plan = _training_setup(schedule)
    cfg = TrainConfig(batch_size=32)
    rep = run_training_bench(task, schedule, model, cfg, plan, 1.3, 0, budget=200, eval_every=10,
                             n_eval=256, restricted_plan=None)
    assert rep.full.steps == rep.restricted.steps
    assert rep.full.final_loss == rep.restricted.final_loss
