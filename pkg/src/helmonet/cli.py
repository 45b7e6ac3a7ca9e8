"""Command-line entry point.

Subcommands: train, eval, fem, sweep, export-field, check.  All outputs are
CSV / PGM / plain text under --out-dir.  Exit codes: 0 success, 1 check
failure, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import evaluation, fem, geometry, physics, training
from .config import ConfigError, RunConfig, load_run_config
from .deeponet import init_model, load_checkpoint
from .evaluation import angle_sweep, export_field_grid, run_diagnostics, sweep_to_csv
from .fem import FemError
from .training import NonFiniteLossError, TrainingError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ERROR = 3


def _probes(rc: RunConfig):
    return geometry.ring_probes(rc.geometry.center, rc.probe_ring_radius, rc.model.n_probes)


def _training_geoms(rc: RunConfig):
    base = rc.geometry
    return [base.rotated(base.rotation + np.deg2rad(a)) for a in rc.train.training_angles_deg]


def cmd_train(rc: RunConfig, args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(rc.model, seed=rc.train.seed)
    ckpt = out / "model.ckpt"
    probes = _probes(rc)
    geometry.probes_to_csv(probes, out / "probes.csv")
    trained, log = training.train(model, _training_geoms(rc), rc.physics, rc.sampling,
                                  rc.train, probes=probes, checkpoint_path=str(ckpt))
    training.write_loss_csv(log, out / "losses.csv")
    training.write_timing_csv(log, out / "timings.csv")
    last = log.rows[-1]
    print(f"trained {rc.train.iterations} iterations; final total loss {last[4]:.6g}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(rc: RunConfig, args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _ = load_checkpoint(args.checkpoint, expect_spatial_mode=rc.model.spatial_mode)
    angle = args.angle if args.angle is not None else 0.0
    sol = evaluation.fem_reference(rc.geometry, angle, rc.physics, rc.fem)
    geom = rc.geometry.rotated(rc.geometry.rotation + np.deg2rad(angle))
    pred = evaluation.model_at_nodes(model, geom, sol.mesh.nodes, _probes(rc))
    err_c = evaluation.relative_error(pred, sol.values, "complex")
    err_a = evaluation.relative_error(pred, sol.values, "amplitude")
    with open(out / "eval.csv", "w") as f:
        f.write("angle_deg,err_complex,err_amplitude,n_nodes\n")
        f.write(f"{angle!r},{err_c!r},{err_a!r},{sol.mesh.n_nodes}\n")
    with open(out / "model_vs_fem.csv", "w") as f:
        f.write("x,y,model_re,model_im,fem_re,fem_im\n")
        for (x, y), mv, fv in zip(sol.mesh.nodes, pred, sol.values):
            f.write(f"{x!r},{y!r},{mv.real!r},{mv.imag!r},{fv.real!r},{fv.imag!r}\n")
    print(f"angle {angle:+.1f} deg: relative error {err_c:.4f} (complex), {err_a:.4f} (amplitude)")
    return EXIT_OK


def cmd_fem(rc: RunConfig, args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    angle = args.angle if args.angle is not None else 0.0
    geom = rc.geometry.rotated(rc.geometry.rotation + np.deg2rad(angle))
    mesh = fem.build_mesh(geom, rc.fem.n_theta, rc.fem.n_radial, rc.fem.grading)
    sol = fem.FemSolution(mesh=mesh, values=fem.solve(fem.assemble(mesh, rc.physics)))
    fem.mesh_to_csv(mesh, out / "nodes.csv", out / "triangles.csv", out / "edges.csv")
    fem.solution_to_csv(sol, out / "solution.csv")
    print(f"solved {mesh.n_nodes} nodes at angle {angle:+.1f} deg -> {out}/solution.csv")
    return EXIT_OK


def cmd_sweep(rc: RunConfig, args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _ = load_checkpoint(args.checkpoint, expect_spatial_mode=rc.model.spatial_mode)
    rows = angle_sweep(model, rc.physics, rc.sweep.angles(), rc.geometry, rc.fem,
                       rc.train.training_angles_deg, probes=_probes(rc),
                       subdomain_radius=rc.sweep.subdomain_radius)
    sweep_to_csv(rows, rc.train.training_angles_deg, out / "sweep.csv")
    bad = [r for r in rows if r.status != "ok"]
    print(f"swept {len(rows)} angles ({len(bad)} failed) -> {out}/sweep.csv")
    return EXIT_OK if not bad else EXIT_NUMERICAL_ERROR


def cmd_export_field(rc: RunConfig, args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    angle = args.angle if args.angle is not None else 0.0
    geom = rc.geometry.rotated(rc.geometry.rotation + np.deg2rad(angle))
    model = None
    if args.source == "model":
        model, _, _ = load_checkpoint(args.checkpoint, expect_spatial_mode=rc.model.spatial_mode)
    stem = out / f"field_{args.source}_{args.component}"
    info = export_field_grid(args.source, geom, rc.physics, args.resolution, stem,
                             component=args.component, probes=_probes(rc) if model else None,
                             fem_cfg=rc.fem, model=model)
    print(f"wrote {info['csv']} and {info['pgm']} ({info['masked']} masked cells)")
    return EXIT_OK


def cmd_check(rc: RunConfig, args) -> int:
    rep = run_diagnostics(seed=args.seed if args.seed is not None else 0, fem_cfg=rc.fem)
    print(rep.format())
    return EXIT_OK if rep.all_passed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="helmonet",
                                 description="Physics-informed operator learning for 2D "
                                             "Helmholtz scattering with FEM validation.")
    ap.add_argument("--config", default=None, help="TOML-style configuration file")
    ap.add_argument("--seed", type=int, default=None, help="override sampling/training seed")
    ap.add_argument("--out-dir", default="out", help="output directory")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("train", help="train the operator network")
    p_eval = sub.add_parser("eval", help="compare a checkpoint against FEM at one angle")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--angle", type=float, default=None, help="rotation angle in degrees")
    p_fem = sub.add_parser("fem", help="run the reference FEM solver")
    p_fem.add_argument("--angle", type=float, default=None)
    p_sweep = sub.add_parser("sweep", help="angle sweep against FEM references")
    p_sweep.add_argument("--checkpoint", required=True)
    p_exp = sub.add_parser("export-field", help="sample a field on a grid (CSV + PGM)")
    p_exp.add_argument("--source", choices=("model", "fem"), required=True)
    p_exp.add_argument("--checkpoint", default=None)
    p_exp.add_argument("--component", choices=("scattered", "incident", "total"),
                       default="scattered")
    p_exp.add_argument("--angle", type=float, default=None)
    p_exp.add_argument("--resolution", type=int, default=256)
    sub.add_parser("check", help="run the self-diagnostic suite")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = load_run_config(args.config)
        if args.seed is not None:
            rc = dataclasses.replace(
                rc,
                sampling=dataclasses.replace(rc.sampling, seed=args.seed),
                train=dataclasses.replace(rc.train, seed=args.seed),
            )
        if args.command == "export-field" and args.source == "model" and not args.checkpoint:
            raise ConfigError("export-field --source model requires --checkpoint")
    except (ConfigError, OSError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "fem": cmd_fem,
        "sweep": cmd_sweep,
        "export-field": cmd_export_field,
        "check": cmd_check,
    }
    try:
        return handlers[args.command](rc, args)
    except (ConfigError,) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (FemError, NonFiniteLossError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL_ERROR
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
