#!/usr/bin/env python3
"""Desk-scale training run: reduced point budget, width-64 nets, 20k iterations.

Writes model.ckpt, losses.csv and timings.csv under --out-dir.  This is the
configuration used by the long-running acceptance criteria; on a desktop CPU
expect tens of minutes.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from helmonet import deeponet, geometry, physics, sampling, training


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="out/desk")
    ap.add_argument("--iterations", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sampler = sampling.SamplerConfig(n_interior_raw=2000, n_outer=1000,
                                     n_inner_per_geometry=500, seed=args.seed)
    mcfg = deeponet.ModelConfig(hidden_width=64, hidden_layers=4, latent=64)
    tcfg = training.TrainConfig(iterations=args.iterations, log_every=100, seed=args.seed)
    base = geometry.PolarBoundary()
    geoms = [base.rotated(np.deg2rad(a)) for a in tcfg.training_angles_deg]

    model = deeponet.init_model(mcfg, seed=args.seed)
    t0 = time.perf_counter()
    trained, log = training.train(model, geoms, physics.WaveParams(), sampler, tcfg,
                                  checkpoint_path=str(out / "model.ckpt"))
    wall = time.perf_counter() - t0
    training.write_loss_csv(log, out / "losses.csv")
    training.write_timing_csv(log, out / "timings.csv")
    first = log.rows[0]
    last = log.rows[-1]
    print(f"iterations {args.iterations}; wall {wall / 60:.1f} min")
    print(f"total loss {first[4]:.4g} -> {last[4]:.4g}")
    print(f"artifacts in {out}/")


if __name__ == "__main__":
    main()
