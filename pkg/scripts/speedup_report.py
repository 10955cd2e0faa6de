#!/usr/bin/env python3
"""Print the analytic FLOP comparison for a few sampling schedules."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from msf import CostModelParams, StageCost, flops_cost, speedup_ratio, token_count


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--depth", type=int, default=28)
    parser.add_argument("--width", type=int, default=1152)
    args = parser.parse_args()

    model = CostModelParams(depth=args.depth, hidden_width=args.width)
    full = token_count(512, 8, 2)
    coarse = token_count(192, 8, 2)
    baseline = [StageCost(full, 100, True)]

    print(f"depth {model.depth}, width {model.hidden_width}: "
          f"a = {model.linear_coeff}, b = {model.attention_coeff}")
    print(f"baseline: {full} tokens x 100 steps with guidance "
          f"-> {flops_cost(model, baseline):.3e} FLOPs")
    for refine_steps in (50, 20, 8, 4):
        stages = [
            StageCost(coarse, 100, True),
            StageCost(full, refine_steps, False),
        ]
        ratio = speedup_ratio(model, baseline, stages)
        print(f"coarse 100 + refine {refine_steps:3d}: "
              f"{flops_cost(model, stages):.3e} FLOPs, "
              f"speedup {float(ratio):.3f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
