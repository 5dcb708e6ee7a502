"""Two-stage training on a class-conditional 2-D mixture with a zero-initialised
cross-attention block, reporting held-out losses after each stage.

    python3 scripts/train_toy.py --lambda-atv 10 --out runs/toy
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from effdiff.denoiser import MlpDenoiser, save_checkpoint
from effdiff.schedule import build_linear_schedule, build_plan
from effdiff.tasks import GmmTask, two_mode_gmm
from effdiff.training import TrainConfig, bayes_loss, evaluate, make_held_out, train_stage1, train_stage2, write_loss_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--stage1-steps", type=int, default=3000)
    ap.add_argument("--stage2-steps", type=int, default=1000)
    ap.add_argument("--lambda-atv", type=float, default=10.0)
    ap.add_argument("--plan-n", type=int, default=0, help="restrict training to a quadratic_front plan of this length")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = build_linear_schedule()
    task = GmmTask(two_mode_gmm(2), conditional=True)
    plan = build_plan(s, "quadratic_front", args.plan_n) if args.plan_n else None
    cfg = TrainConfig(lambda_atv=args.lambda_atv, stage1_steps=args.stage1_steps, stage2_steps=args.stage2_steps,
                      plan=plan, seed=args.seed)
    model = MlpDenoiser.init(2, np.random.default_rng(args.seed), n_classes=2, attention_d_model=8)

    first = train_stage1(cfg, model, task, s)
    second = train_stage2(replace(cfg, seed=args.seed + 1), first.model, task, s)
    write_loss_curve(first.curve, out / "loss_curve.csv")
    write_loss_curve(second.curve, out / "loss_curve.csv", start_step=len(first.curve), append=True)
    save_checkpoint(second.model, out / "checkpoint.json")

    held = make_held_out(task, s, 4000, args.seed + 999)
    summary = {
        "bayes_l_ldm": bayes_loss(task, held, s),
        "stage1": evaluate(first.model, held, s).__dict__,
        "stage2": evaluate(second.model, held, s).__dict__,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
