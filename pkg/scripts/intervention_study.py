#!/usr/bin/env python3
"""Desk-scale intervention study: path independence and halting efficiency.

Part 1 trains two solvers differing only in randomized state
initialization and compares Delta_PI (mean |restart-averaged accuracy -
single-run accuracy|) under breadth scaling.

Part 2 takes a per-step-supervised solver with a learned halting head,
calibrates the halting threshold on held-back training data, and reports
the halting queue's average NFE and accuracy against fixed-depth
evaluation.

Usage: python scripts/intervention_study.py [--steps N]
"""

import argparse
import sys
import time

import numpy as np

from latentloop.presets import (build_desk_sudoku, desk_sudoku_config,
                                desk_train_config, train_desk_model)
from latentloop.rng import StreamSet
from latentloop.scaling import (ScalingBudget, acc_avg, act_queue_eval,
                                calibrate_halt_threshold, path_independence,
                                run_dataset)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--act-steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--breadth", type=int, default=8)
    ap.add_argument("--depth", type=int, default=64)
    args = ap.parse_args()

    t0 = time.time()
    tx, ty, ex, ey = build_desk_sudoku(seed=args.seed)
    print(f"data ready [{time.time() - t0:.0f}s]")

    print("\n-- path independence (randomized vs fixed initialization) --")
    for ri in (True, False):
        model, _, _ = train_desk_model(
            tx, ty, seed=args.seed,
            train_cfg=desk_train_config(total_steps=args.steps,
                                        ri_enabled=ri))
        per = run_dataset(model, ex,
                          ScalingBudget(depth=16, breadth=args.breadth,
                                        window=3),
                          StreamSet(args.seed + 77))
        acc = float(np.mean([acc_avg(rs, t) for rs, t in zip(per, ey)]))
        dpi = path_independence(per, ey)
        label = "randomized init" if ri else "fixed init     "
        print(f"{label}: acc_avg(B={args.breadth})={acc:.3f} "
              f"delta_pi={dpi:.4f} [{time.time() - t0:.0f}s]")

    print("\n-- halting efficiency (learned halting head) --")
    act_model, _, _ = train_desk_model(
        tx, ty, seed=args.seed,
        model_cfg=desk_sudoku_config(outer_steps=1),
        train_cfg=desk_train_config(n_sup=16, total_steps=args.act_steps))
    delta = calibrate_halt_threshold(
        act_model, tx[-512:], ty[-512:],
        ScalingBudget(depth=args.depth, breadth=1, window=3),
        streams_seed=args.seed + 1234)
    print(f"calibrated halting threshold: {delta}")
    off, nfe_off = act_queue_eval(
        ex, act_model, ScalingBudget(depth=args.depth, breadth=1,
                                     act_enabled=False),
        StreamSet(args.seed + 55))
    on, nfe_on = act_queue_eval(
        ex, act_model, ScalingBudget(depth=args.depth, breadth=1,
                                     act_enabled=True, halt_threshold=delta),
        StreamSet(args.seed + 55))
    acc_off = float(np.mean([np.array_equal(r.prediction, t)
                             for r, t in zip(off, ey)]))
    acc_on = float(np.mean([np.array_equal(r.prediction, t)
                            for r, t in zip(on, ey)]))
    print(f"halting off: acc={acc_off:.3f} avg_nfe={nfe_off:.1f}")
    print(f"halting on : acc={acc_on:.3f} avg_nfe={nfe_on:.1f} "
          f"({nfe_off / max(nfe_on, 1e-9):.1f}x fewer evaluations)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
