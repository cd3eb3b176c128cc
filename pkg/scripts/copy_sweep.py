"""Copy-task accuracy versus copy length at a fixed training budget.

    python3 scripts/copy_sweep.py --lengths 8 32 128 --steps 600
"""

from __future__ import annotations

import argparse
import json

from srm.training import copy_length_sweep


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--lengths", type=int, nargs="+", default=[8, 32, 128])
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()
    for p in copy_length_sweep(args.lengths, args.steps, seed=args.seed, lr=args.lr):
        print(json.dumps({"copy_len": p.copy_len, "steps": p.steps, "accuracy": round(p.final_accuracy, 4),
                          "first_step_at_0.9": p.first_step_at[0.9], "seconds": round(p.seconds, 1)}))


if __name__ == "__main__":
    main()
