"""TOML-style configuration files: [section] headers and key = value lines.

Values are Python/TOML literals: numbers, strings, booleans and (nested)
lists.  Unknown sections or keys are configuration errors so typos fail
loudly instead of silently using defaults.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass

import numpy as np

from .deeponet import ModelConfig
from .evaluation import FemConfig
from .geometry import PolarBoundary
from .physics import WaveParams
from .sampling import SamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict:
    out: dict[str, dict] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section name")
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, val = (s.strip() for s in line.split("=", 1))
        lowered = val.lower()
        if lowered in ("true", "false"):
            val = lowered.capitalize()
        try:
            out[section][key] = ast.literal_eval(val)
        except (ValueError, SyntaxError) as e:
            raise ConfigError(f"line {lineno}: cannot parse value {val!r}: {e}") from e
    return out


def load_config_file(path) -> dict:
    with open(path) as f:
        return parse_config_text(f.read())


@dataclass(frozen=True)
class SweepConfig:
    angle_min_deg: float = -60.0
    angle_max_deg: float = 60.0
    angle_step_deg: float = 1.0
    subdomain_radius: float = 0.15

    def angles(self):
        return np.arange(self.angle_min_deg, self.angle_max_deg + self.angle_step_deg / 2,
                         self.angle_step_deg)


@dataclass
class RunConfig:
    geometry: PolarBoundary
    physics: WaveParams
    sampling: SamplerConfig
    model: ModelConfig
    train: TrainConfig
    fem: FemConfig
    sweep: SweepConfig
    probe_ring_radius: float = 0.3


_SECTION_KEYS = {
    "geometry": {"center", "base_radius", "harmonics", "rotation_deg", "probe_ring_radius"},
    "physics": {"mu0", "rho0", "lam0", "omega", "amp", "direction_deg"},
    "sampling": {"n_interior_raw", "band_fraction", "band_width", "n_outer",
                 "n_inner_per_geometry", "inner_weighting", "seed"},
    "model": {"n_probes", "hidden_width", "hidden_layers", "latent", "activation",
              "spatial_mode"},
    "train": {"iterations", "learning_rate", "beta1", "beta2", "eps", "log_every", "seed",
              "training_angles_deg", "loss_weights", "dtype", "chunk_size", "blas_threads",
              "checkpoint_every", "resample_every", "minibatch_fraction"},
    "fem": {"n_theta", "n_radial", "grading"},
    "sweep": {"angle_min_deg", "angle_max_deg", "angle_step_deg", "subdomain_radius"},
}


def _check_keys(section: str, data: dict) -> None:
    unknown = set(data) - _SECTION_KEYS[section]
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")


def build_run_config(raw: dict) -> RunConfig:
    unknown = set(raw) - set(_SECTION_KEYS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    for sec in raw:
        _check_keys(sec, raw[sec])

    g = dict(raw.get("geometry", {}))
    probe_ring_radius = float(g.pop("probe_ring_radius", 0.3))
    rotation = np.deg2rad(g.pop("rotation_deg", 0.0))
    harmonics = tuple((int(k), float(a)) for k, a in g.pop("harmonics", [(2, 0.08), (3, 0.23), (5, 0.11)]))
    center = tuple(g.pop("center", (0.5, 0.5)))
    try:
        geom = PolarBoundary(center=center, base_radius=float(g.pop("base_radius", 0.2)),
                             harmonics=harmonics, rotation=float(rotation))

        p = dict(raw.get("physics", {}))
        direction_deg = p.pop("direction_deg", 0.0)
        wp = WaveParams.from_angle(float(direction_deg), **p)

        sampling = SamplerConfig(**raw.get("sampling", {}))
        model = ModelConfig(**raw.get("model", {}))
        t = dict(raw.get("train", {}))
        for key in ("training_angles_deg", "loss_weights"):
            if key in t:
                t[key] = tuple(t[key])
        train = TrainConfig(**t)
        fem_cfg = FemConfig(**raw.get("fem", {}))
        sweep = SweepConfig(**raw.get("sweep", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(geometry=geom, physics=wp, sampling=sampling, model=model,
                     train=train, fem=fem_cfg, sweep=sweep,
                     probe_ring_radius=probe_ring_radius)


def load_run_config(path=None) -> RunConfig:
    return build_run_config(load_config_file(path) if path else {})
