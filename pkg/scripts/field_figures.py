#!/usr/bin/env python3
"""Export incident / scattered / total field grids for one geometry.

Produces the side-by-side display pipeline inputs: three CSV + PGM pairs for
the FEM reference and, given a checkpoint, the model's scattered field too.
"""

import argparse
from pathlib import Path

import numpy as np

from helmonet import deeponet, evaluation, geometry, physics


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", default=None)
    ap.add_argument("--angle", type=float, default=0.0)
    ap.add_argument("--resolution", type=int, default=256)
    ap.add_argument("--out-dir", default="out/fields")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wp = physics.WaveParams()
    geom = geometry.PolarBoundary(rotation=float(np.deg2rad(args.angle)))
    for component in ("incident", "scattered", "total"):
        info = evaluation.export_field_grid("fem", geom, wp, args.resolution,
                                            out / f"fem_{component}", component=component)
        print(f"fem {component}: {info['pgm']}")
    if args.checkpoint:
        model, _, _ = deeponet.load_checkpoint(args.checkpoint)
        info = evaluation.export_field_grid("model", geom, wp, args.resolution,
                                            out / "model_scattered", model=model)
        print(f"model scattered: {info['pgm']}")


if __name__ == "__main__":
    main()
