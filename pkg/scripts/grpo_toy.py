"""Supervised warm start on single-digit addition, then GRPO with balanced resampling.

Reports mean sampled reward over all 100 questions before and after RL.

    python3 scripts/grpo_toy.py --sft-steps 300 --steps 200
"""

from __future__ import annotations

import argparse
import json
import time

from srm.rlvr import GrpoConfig
from srm.tasks import STOP, AdditionTask, mean_sampled_reward, run_grpo, warm_start


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--sft-steps", type=int, default=300)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--questions", type=int, default=8, help="questions pooled per step")
    args = ap.parse_args()

    task = AdditionTask()
    model = warm_start(task, args.sft_steps, args.seed)
    cfg = GrpoConfig(lr=args.lr, weight_decay=0.0, total_steps=args.steps, seed=args.seed, stop_id=STOP)
    probe = GrpoConfig(group_size=8, stop_id=STOP)
    before = mean_sampled_reward(model, task, probe, seed=10_000 + args.seed)

    def show(info) -> None:
        if info.step % 20 == 0:
            print(f"step {info.step:4d} reward {info.mean_reward:.3f} kl {info.mean_kl:.4f} good {info.resampled_good}")

    t0 = time.perf_counter()
    run_grpo(model, task, cfg, questions_per_step=args.questions, on_step=show)
    after = mean_sampled_reward(model, task, probe, seed=10_000 + args.seed)
    print(json.dumps({"before": before, "after": after, "rl_seconds": round(time.perf_counter() - t0, 1)}))


if __name__ == "__main__":
    main()
