"""Run configuration: JSON schema, defaults, cross-field checks and builders."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from effdiff.denoiser import GaussianData, GaussianMixture, MlpDenoiser, load_checkpoint
from effdiff.samplers import InpaintMask, RepaintParams, SamplerConfig
from effdiff.schedule import Strategy, TimestepPlan, build_linear_schedule, build_plan
from effdiff.tasks import GaussianTask, GmmTask
from effdiff.training import TrainConfig


class ConfigParseError(ValueError):
    """The document could not be read as JSON, or an override was malformed."""


class ConfigError(ValueError):
    """The document parsed but violates the schema or a cross-field rule."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _obj(props: dict, required: tuple[str, ...] = ()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_STRATEGY = {"enum": [s.value for s in Strategy]}
_KIND = {"enum": ["ancestral", "ddim", "plms"]}

SCHEMA = _obj(
    {
        "schedule": _obj({"T": _POS_INT, "beta_start": _NUM, "beta_end": _NUM}),
        "plan": _obj({"strategy": _STRATEGY, "n": _INT, "exponent": _NUM}),
        "task": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": ["gmm", "gaussian"]}},
            "if": {"properties": {"kind": {"const": "gaussian"}}},
            "then": _obj(
                {"kind": {"const": "gaussian"}, "mean": _VEC, "cov": {"type": "array", "items": _VEC, "minItems": 1}},
                ("kind", "mean", "cov"),
            ),
            "else": _obj(
                {
                    "kind": {"const": "gmm"},
                    "weights": _VEC,
                    "means": {"type": "array", "items": _VEC, "minItems": 1},
                    "stds": _VEC,
                    "conditional": {"type": "boolean"},
                    "n_tokens": _POS_INT,
                    "d_model": _POS_INT,
                    "token_seed": _INT,
                }
            ),
        },
        "model": _obj(
            {
                "kind": {"enum": ["oracle", "mlp"]},
                "checkpoint": {"type": ["string", "null"]},
                "hidden": {"type": "array", "items": _POS_INT},
                "d_time": _POS_INT,
                "d_cond": _POS_INT,
                "attention": {"type": "boolean"},
            }
        ),
        "train": _obj(
            {
                "lambda_atv": {"type": "number", "minimum": 0},
                "stage1_steps": _NONNEG_INT,
                "stage2_steps": _NONNEG_INT,
                "batch_size": _POS_INT,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "use_plan": {"type": "boolean"},
                "augment": {"type": "boolean"},
                "jitter_std": {"type": "number", "minimum": 0},
                "atv_target": {"enum": ["features", "weights"]},
                "n_eval": _POS_INT,
            }
        ),
        "sampler": _obj(
            {
                "kind": _KIND,
                "eta": {"type": "number", "minimum": 0, "maximum": 1},
                "n_samples": _POS_INT,
                "trajectory_points": _NONNEG_INT,
                "class_id": {"type": ["integer", "null"], "minimum": 0},
                "repaint": _obj(
                    {
                        "jump_len": _POS_INT,
                        "n_resample": _POS_INT,
                        "stepper": _KIND,
                        "mask": {"anyOf": [{"type": "null"}, {"type": "array", "items": {"enum": [0, 1]}, "minItems": 1}]},
                        "known_x0": {"anyOf": [{"type": "null"}, _VEC]},
                    }
                ),
            }
        ),
        "bench": _obj(
            {
                "strategies": {"type": "array", "items": _STRATEGY, "minItems": 1},
                "ns": {"type": "array", "items": _POS_INT, "minItems": 1},
                "trials": _NONNEG_INT,
                "n_points": _POS_INT,
                "plots": {"type": "boolean"},
                "training": _obj(
                    {
                        "enabled": {"type": "boolean"},
                        "seeds": {"type": "array", "items": _INT},
                        "plan_strategy": _STRATEGY,
                        "plan_n": _POS_INT,
                        "threshold_margin": {"type": "number", "exclusiveMinimum": 0},
                        "budget": _POS_INT,
                        "eval_every": _POS_INT,
                    }
                ),
            }
        ),
        "output_dir": {"type": "string"},
        "seed": _INT,
    }
)

DEFAULTS: dict[str, Any] = {
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "plan": {"strategy": "quadratic_front", "n": 50, "exponent": 2.0},
    "task": {
        "kind": "gmm",
        "weights": [0.5, 0.5],
        "means": [[-2.0, 0.0], [2.0, 0.0]],
        "stds": [0.5, 0.5],
        "conditional": False,
        "n_tokens": 4,
        "d_model": 8,
        "token_seed": 1234,
    },
    "model": {"kind": "oracle", "checkpoint": None, "hidden": [128, 128], "d_time": 16, "d_cond": 8, "attention": False},
    "train": {
        "lambda_atv": 1e-3,
        "stage1_steps": 5000,
        "stage2_steps": 1000,
        "batch_size": 128,
        "lr": 1e-3,
        "momentum": 0.9,
        "use_plan": False,
        "augment": True,
        "jitter_std": 0.05,
        "atv_target": "features",
        "n_eval": 4000,
    },
    "sampler": {
        "kind": "plms",
        "eta": 0.0,
        "n_samples": 2048,
        "trajectory_points": 1,
        "class_id": None,
        "repaint": {"jump_len": 2, "n_resample": 3, "stepper": "ancestral", "mask": None, "known_x0": None},
    },
    "bench": {
        "strategies": [s.value for s in Strategy],
        "ns": [5, 10, 50, 200, 1000],
        "trials": 3,
        "n_points": 2048,
        "plots": True,
        "training": {
            "enabled": False,
            "seeds": [0, 1, 2],
            "plan_strategy": "quadratic_front",
            "plan_n": 10,
            "threshold_margin": 1.2,
            "budget": 4000,
            "eval_every": 50,
        },
    },
    "output_dir": "runs/default",
    "seed": 0,
}

_GAUSSIAN_DEFAULTS = {"kind": "gaussian"}


def load_document(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigParseError(f"{path}: top level must be a JSON object")
    return doc


def apply_override(doc: dict, assignment: str) -> None:
    """Apply ``key.path=value``; value is parsed as JSON, falling back to a string."""
    if "=" not in assignment:
        raise ConfigParseError(f"override {assignment!r} is not of the form key.path=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigParseError(f"override {assignment!r} has an empty key segment")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigParseError(f"override {assignment!r}: {p!r} is not an object")
        node = nxt
    node[parts[-1]] = value


def _merge(defaults: dict, doc: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate_document(doc: dict) -> dict:
    """Schema-check ``doc`` and return it merged with defaults.

    Raises :class:`ConfigError` naming the offending key.
    """
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        if err.validator == "additionalProperties":
            base = _path(err)
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            key = ".".join(p for p in (base if base != "<root>" else "", extra[0] if extra else "") if p)
            raise ConfigError(key or base, f"unknown key ({err.message})")
        raise ConfigError(_path(err), err.message)

    task_defaults = DEFAULTS["task"] if doc.get("task", {}).get("kind", "gmm") == "gmm" else _GAUSSIAN_DEFAULTS
    merged = _merge({**DEFAULTS, "task": task_defaults}, doc)
    _check_semantics(merged)
    return merged


def _check_semantics(cfg: dict) -> None:
    sch = cfg["schedule"]
    if not 0 < sch["beta_start"] <= sch["beta_end"] < 1:
        raise ConfigError("schedule.beta_start", "need 0 < beta_start <= beta_end < 1")
    T = sch["T"]
    if not 1 <= cfg["plan"]["n"] <= T:
        raise ConfigError("plan.n", f"must satisfy 1 <= n <= schedule.T ({T}), got {cfg['plan']['n']}")
    if cfg["plan"]["exponent"] <= 0:
        raise ConfigError("plan.exponent", "must be positive")
    bad_ns = [n for n in cfg["bench"]["ns"] if n > T]
    if bad_ns:
        raise ConfigError("bench.ns", f"plan lengths {bad_ns} exceed schedule.T ({T})")
    if cfg["bench"]["training"]["plan_n"] > T:
        raise ConfigError("bench.training.plan_n", f"exceeds schedule.T ({T})")

    try:
        task = build_task(cfg)
    except ValueError as exc:
        raise ConfigError("task", str(exc)) from exc
    dim = task.dim

    model = cfg["model"]
    if model["kind"] == "mlp" and model["attention"]:
        d_model = cfg["task"].get("d_model", 8)
        if not model["hidden"] or model["hidden"][0] % d_model:
            raise ConfigError("model.hidden", f"first hidden width must be a multiple of task.d_model ({d_model})")
    if model["d_time"] % 2:
        raise ConfigError("model.d_time", "must be even")

    cid = cfg["sampler"]["class_id"]
    if cid is not None and cid >= task.n_classes:
        raise ConfigError("sampler.class_id", f"must be < number of classes ({task.n_classes})")

    rp = cfg["sampler"]["repaint"]
    for key in ("mask", "known_x0"):
        if rp[key] is not None and len(rp[key]) != dim:
            raise ConfigError(f"sampler.repaint.{key}", f"needs {dim} entries (task dimension)")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# --------------------------------------------------------------------------
# Builders


def build_schedule(cfg: dict):
    s = cfg["schedule"]
    return build_linear_schedule(s["T"], s["beta_start"], s["beta_end"])


def build_run_plan(cfg: dict, schedule) -> TimestepPlan:
    p = cfg["plan"]
    return build_plan(schedule, p["strategy"], p["n"], p["exponent"])


def build_task(cfg: dict):
    t = cfg["task"]
    if t["kind"] == "gaussian":
        return GaussianTask(GaussianData(np.array(t["mean"]), np.array(t["cov"])))
    means = np.array(t["means"], dtype=np.float64)
    if means.ndim != 2:
        raise ValueError("means must all have the same dimension")
    gmm = GaussianMixture(np.array(t["weights"]), means, np.array(t["stds"]))
    return GmmTask(gmm, t["conditional"], t["n_tokens"], t["d_model"], t["token_seed"])


def build_model(cfg: dict, task, schedule):
    m = cfg["model"]
    if m["kind"] == "oracle":
        return task.oracle(schedule)
    if m["checkpoint"]:
        return load_checkpoint(m["checkpoint"])
    return MlpDenoiser.init(
        task.dim,
        np.random.default_rng(cfg["seed"]),
        T=schedule.total_steps,
        hidden=tuple(m["hidden"]),
        d_time=m["d_time"],
        d_cond=m["d_cond"],
        n_classes=task.n_classes,
        attention_d_model=cfg["task"].get("d_model", 8) if m["attention"] else None,
    )


def build_train_config(cfg: dict, plan: TimestepPlan | None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lambda_atv=t["lambda_atv"],
        stage1_steps=t["stage1_steps"],
        stage2_steps=t["stage2_steps"],
        batch_size=t["batch_size"],
        lr=t["lr"],
        momentum=t["momentum"],
        plan=plan if t["use_plan"] else None,
        seed=cfg["seed"],
        augment=t["augment"],
        jitter_std=t["jitter_std"],
        atv_target=t["atv_target"],
    )


def build_sampler_config(cfg: dict, plan: TimestepPlan, keep_states: bool = True) -> SamplerConfig:
    s = cfg["sampler"]
    rp = s["repaint"]
    return SamplerConfig(
        s["kind"],
        plan,
        seed=cfg["seed"],
        eta=s["eta"],
        repaint=RepaintParams(rp["jump_len"], rp["n_resample"], rp["stepper"]),
        keep_states=keep_states,
    )


def build_mask(cfg: dict, dim: int) -> InpaintMask:
    rp = cfg["sampler"]["repaint"]
    if rp["mask"] is None or rp["known_x0"] is None:
        raise ConfigError("sampler.repaint.mask", "repaint needs both mask and known_x0")
    return InpaintMask(np.array(rp["mask"], dtype=np.float64), np.array(rp["known_x0"], dtype=np.float64))
