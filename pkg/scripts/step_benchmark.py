#!/usr/bin/env python3
"""Time one fused loss+gradient step at the desk-run scale.

Useful when tuning chunk_size / blas_threads / dtype for a new machine.
"""

import argparse
import time

import numpy as np

from helmonet import deeponet, geometry, physics, sampling, training


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    ap.add_argument("--chunk-size", type=int, default=2048)
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()

    wp = physics.WaveParams()
    mcfg = deeponet.ModelConfig(hidden_width=64, hidden_layers=4, latent=64)
    model = deeponet.init_model(mcfg, seed=0)
    base = geometry.PolarBoundary()
    tcfg = training.TrainConfig(iterations=1, dtype=args.dtype,
                                chunk_size=args.chunk_size or None)
    geoms = [base.rotated(np.deg2rad(a)) for a in tcfg.training_angles_deg]
    scfg = sampling.SamplerConfig(n_interior_raw=2000, n_outer=1000,
                                  n_inner_per_geometry=500, seed=0)
    work, _ = training._flat_model(model, np.dtype(args.dtype))
    provider = training.BatchProvider(work, geoms, wp, scfg, tcfg)
    batches = provider.batches(1)
    with training._thread_limits(tcfg):
        for _ in range(3):
            physics.loss_and_grad(work, batches, wp, want_grad=True)
        t0 = time.perf_counter()
        for _ in range(args.reps):
            physics.loss_and_grad(work, batches, wp, want_grad=True)
        dt = (time.perf_counter() - t0) / args.reps
    print(f"dtype={args.dtype} chunk={args.chunk_size}: {dt * 1e3:.1f} ms/step "
          f"-> 20k iterations in {dt * 20000 / 60:.1f} min")


if __name__ == "__main__":
    main()
