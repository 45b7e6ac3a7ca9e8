#!/usr/bin/env python3
"""Full angle sweep of a trained checkpoint against FEM references.

Every integer angle in [-60, 60] by default: 121 FEM solves plus model
evaluations, written as one CSV row per angle.
"""

import argparse
from pathlib import Path

import numpy as np

from helmonet import deeponet, evaluation, geometry, physics
from helmonet.training import DEFAULT_TRAINING_ANGLES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("--out-dir", default="out/sweep")
    ap.add_argument("--lo", type=float, default=-60.0)
    ap.add_argument("--hi", type=float, default=60.0)
    ap.add_argument("--step", type=float, default=1.0)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _ = deeponet.load_checkpoint(args.checkpoint)
    angles = np.arange(args.lo, args.hi + args.step / 2, args.step)
    rows = evaluation.angle_sweep(model, physics.WaveParams(), angles,
                                  geometry.PolarBoundary(), evaluation.FemConfig(),
                                  DEFAULT_TRAINING_ANGLES)
    evaluation.sweep_to_csv(rows, DEFAULT_TRAINING_ANGLES, out / "sweep.csv")
    ok = [r for r in rows if r.status == "ok"]
    inside = [r.err_global for r in ok if abs(r.angle_deg) <= 30]
    outside = [r.err_global for r in ok if abs(r.angle_deg) > 30]
    print(f"{len(ok)}/{len(rows)} angles solved -> {out}/sweep.csv")
    if inside and outside:
        print(f"mean err inside training range {np.mean(inside):.4f}, outside {np.mean(outside):.4f}")


if __name__ == "__main__":
    main()
