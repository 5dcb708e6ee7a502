"""Command-line entry point: ``effdiff {validate,train,sample,repaint,bench}``.

Exit codes: 0 ok, 2 parse error, 3 schema/semantic error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from effdiff import __version__
from effdiff import bench as bench_mod
from effdiff.config import (
    ConfigError,
    ConfigParseError,
    apply_override,
    build_mask,
    build_model,
    build_run_plan,
    build_sampler_config,
    build_schedule,
    build_task,
    build_train_config,
    config_hash,
    load_document,
    validate_document,
)
from effdiff.denoiser import save_checkpoint
from effdiff.metrics import sliced_w2
from effdiff.samplers import repaint_sample, sample, write_trajectory_csv
from effdiff.schedule import build_plan
from effdiff.training import (
    bayes_loss,
    evaluate,
    make_held_out,
    train_stage1,
    train_stage2,
    write_loss_curve,
)

EXIT_OK, EXIT_PARSE, EXIT_SEMANTIC, EXIT_RUNTIME = 0, 2, 3, 4
COMMANDS = ("validate", "train", "sample", "repaint", "bench")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="effdiff", description="Toy diffusion engine and step-plan benchmark.")
    p.add_argument("--version", action="version", version=f"effdiff {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to a JSON run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config key (dotted path); repeatable, last one wins")
        sp.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    return p


def resolve_config(path: str, overrides: list[str], seed: int | None = None, out: str | None = None) -> dict:
    doc = load_document(path)
    for item in overrides:
        apply_override(doc, item)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["output_dir"] = out
    return validate_document(doc)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_manifest(out: Path, command: str, cfg: dict, args, artifacts: list[str], extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seed": cfg["seed"],
        "source_config": str(args.config),
        "overrides": list(args.overrides),
        "artifacts": sorted(artifacts),
        "package_version": __version__,
        "rerun": f"effdiff {command} --config {out / 'config.json'}",
    }
    if extra:
        manifest.update(extra)
    _write_json(out / "config.json", cfg)
    _write_json(out / "manifest.json", manifest)


def _condition(cfg: dict, task, n: int):
    """Conditioning for ``n`` samples: a fixed class, or labels drawn from the mixture weights."""
    cid = cfg["sampler"]["class_id"]
    if cid is None and getattr(task, "conditional", False):
        rng = np.random.default_rng(cfg["seed"] + 5_000)
        return task.condition(rng.choice(task.n_classes, size=n, p=task.gmm.weights))
    return task.condition(np.full(n, cid or 0))


def _write_samples(path: Path, x: np.ndarray) -> None:
    header = ",".join(f"x{i}" for i in range(x.shape[1]))
    np.savetxt(path, x, delimiter=",", header=header, comments="", fmt="%.17g")


def cmd_validate(cfg: dict, out: Path | None, args) -> dict:
    s = build_schedule(cfg)
    plan = build_run_plan(cfg, s)
    return {"valid": True, "plan_length": plan.n, "task_dim": build_task(cfg).dim}


def cmd_train(cfg: dict, out: Path, args) -> dict:
    s = build_schedule(cfg)
    task = build_task(cfg)
    if cfg["model"]["kind"] != "mlp":
        raise ConfigError("model.kind", "train needs model.kind = 'mlp'")
    model = build_model(cfg, task, s)
    plan = build_run_plan(cfg, s)
    tc = build_train_config(cfg, plan)
    first = train_stage1(tc, model, task, s)
    curve_path = out / "loss_curve.csv"
    write_loss_curve(first.curve, curve_path)
    final = first.model
    stage2_done = False
    if final.attention is not None and tc.stage2_steps > 0:
        second = train_stage2(replace(tc, seed=tc.seed + 1), final, task, s)
        write_loss_curve(second.curve, curve_path, start_step=len(first.curve), append=True)
        final = second.model
        stage2_done = True
    save_checkpoint(final, out / "checkpoint.json")
    held = make_held_out(task, s, cfg["train"]["n_eval"], cfg["seed"] + 777)
    ev = evaluate(final, held, s)
    summary = {
        "stage1_steps": len(first.curve),
        "stage2_run": stage2_done,
        "held_out_l_ldm": ev.l_ldm,
        "held_out_l_atv": ev.l_atv,
        "bayes_l_ldm": bayes_loss(task, held, s),
    }
    _write_json(out / "train_summary.json", summary)
    return {"artifacts": ["checkpoint.json", "loss_curve.csv", "train_summary.json"], "summary": summary}


def _sample_outputs(cfg, out: Path, traj, task, s) -> dict:
    write_trajectory_csv(traj, out / "trajectory.csv", cfg["sampler"]["trajectory_points"])
    _write_samples(out / "samples.csv", traj.final)
    _write_json(out / "timing.json", {"wall_time_s": traj.wall_time})
    return {"denoiser_calls": traj.denoiser_calls, "n_states": len(traj.states)}


def cmd_sample(cfg: dict, out: Path, args) -> dict:
    s = build_schedule(cfg)
    task = build_task(cfg)
    model = build_model(cfg, task, s)
    if cfg["model"]["kind"] == "mlp" and not cfg["model"]["checkpoint"]:
        raise ConfigError("model.checkpoint", "sampling with an MLP needs a trained checkpoint")
    plan = build_run_plan(cfg, s)
    n = cfg["sampler"]["n_samples"]
    traj = sample(build_sampler_config(cfg, plan), model, _condition(cfg, task, n), s, task.dim, n)
    summary = _sample_outputs(cfg, out, traj, task, s)
    ref = task.sample_data(n, np.random.default_rng(cfg["seed"] + 10_000))
    summary["sliced_w2_to_data"] = sliced_w2(traj.final, ref, seed=cfg["seed"])
    _write_json(out / "sample_summary.json", summary)
    return {"artifacts": ["trajectory.csv", "samples.csv", "timing.json", "sample_summary.json"], "summary": summary}


def cmd_repaint(cfg: dict, out: Path, args) -> dict:
    s = build_schedule(cfg)
    task = build_task(cfg)
    mask = build_mask(cfg, task.dim)
    model = build_model(cfg, task, s)
    if cfg["model"]["kind"] == "mlp" and not cfg["model"]["checkpoint"]:
        raise ConfigError("model.checkpoint", "repaint with an MLP needs a trained checkpoint")
    plan = build_run_plan(cfg, s)
    n = cfg["sampler"]["n_samples"]
    traj = repaint_sample(build_sampler_config(cfg, plan), model, _condition(cfg, task, n), mask, s, n)
    summary = _sample_outputs(cfg, out, traj, task, s)
    _write_json(out / "sample_summary.json", summary)
    return {"artifacts": ["trajectory.csv", "samples.csv", "timing.json", "sample_summary.json"], "summary": summary}


def cmd_bench(cfg: dict, out: Path, args) -> dict:
    s = build_schedule(cfg)
    task = build_task(cfg)
    model = build_model(cfg, task, s)
    if cfg["model"]["kind"] == "mlp" and not cfg["model"]["checkpoint"]:
        raise ConfigError("model.checkpoint", "benchmarking an MLP needs a trained checkpoint")
    b = cfg["bench"]
    grid = [(st, n) for st in b["strategies"] for n in b["ns"]]
    n_points = b["n_points"]
    report = bench_mod.run_inference_bench(
        s, model, grid, b["trials"], cfg["seed"], task.sample_data,
        kind=cfg["sampler"]["kind"], n_points=n_points, cond=_condition(cfg, task, n_points),
        exponent=cfg["plan"]["exponent"],
    )
    artifacts = ["bench.csv", "bench_report.json"]
    bench_mod.emit_csv(report, out / "bench.csv")
    doc = bench_mod.report_to_dict(report)
    doc["noise_floor"] = bench_mod.noise_floor(task.sample_data, n_points, cfg["seed"])
    if b["plots"] and report.rows:
        artifacts += [p.name for p in bench_mod.emit_plots(report, out / "bench.csv")]
    tr = b["training"]
    if tr["enabled"]:
        if cfg["model"]["kind"] != "mlp":
            raise ConfigError("model.kind", "the training bench needs model.kind = 'mlp'")
        plan = build_plan(s, tr["plan_strategy"], tr["plan_n"], cfg["plan"]["exponent"])
        held = make_held_out(task, s, cfg["train"]["n_eval"], cfg["seed"] + 777, timesteps=plan.steps)
        threshold = tr["threshold_margin"] * bayes_loss(task, held, s)
        runs = []
        for seed in tr["seeds"]:
            init = build_model({**cfg, "seed": seed, "model": {**cfg["model"], "checkpoint": None}}, task, s)
            r = bench_mod.run_training_bench(
                task, s, init, build_train_config(cfg, None), plan, threshold, seed,
                budget=tr["budget"], eval_every=tr["eval_every"], n_eval=cfg["train"]["n_eval"],
            )
            runs.append({
                "seed": seed,
                "full_steps": r.full.steps,
                "plan_steps": r.restricted.steps,
                "full_reached": r.full.reached,
                "plan_reached": r.restricted.reached,
                "step_ratio": r.step_ratio,
                "reduction_pct": r.reduction_pct,
            })
        doc["training"] = {"threshold": threshold, "plan_steps": list(plan.steps), "runs": runs}
    _write_json(out / "bench_report.json", doc)
    return {"artifacts": artifacts, "summary": {"rows": len(report.rows)}}


_HANDLERS = {"validate": cmd_validate, "train": cmd_train, "sample": cmd_sample, "repaint": cmd_repaint, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_PARSE

    try:
        cfg = resolve_config(args.config, args.overrides, args.seed, args.out)
    except ConfigParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC

    out = None
    try:
        if args.command == "validate":
            info = cmd_validate(cfg, None, args)
            print(json.dumps(info))
            return EXIT_OK
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        result = _HANDLERS[args.command](cfg, out, args)
        _write_manifest(out, args.command, cfg, args, result["artifacts"] + ["manifest.json", "config.json"],
                        {"summary": result.get("summary", {})} if args.command != "bench" else None)
        print(f"{args.command}: wrote {len(result['artifacts']) + 2} artifacts to {out} "
              f"in {time.perf_counter() - start:.1f}s")
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC
    except Exception as exc:  # any module failure is a runtime error
        print(f"error: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
