"""Physics-informed operator learning for 2D Helmholtz scattering.

Learns the map from scatterer geometry (encoded by signed radial distances at
fixed probes) to the complex scattered field, trained purely from PDE and
boundary residuals, with a built-in finite-element reference solver for
validation.
"""

from .geometry import PolarBoundary, ProbeSet, ring_probes, sdf, sdf_jet
from .deeponet import DeepOnetModel, ModelConfig, init_model
from .physics import WaveParams
from .sampling import SamplerConfig
from .training import TrainConfig, train

__all__ = [
    "PolarBoundary",
    "ProbeSet",
    "ring_probes",
    "sdf",
    "sdf_jet",
    "DeepOnetModel",
    "ModelConfig",
    "init_model",
    "WaveParams",
    "SamplerConfig",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
