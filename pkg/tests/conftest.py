import numpy as np
import pytest

from helmonet import deeponet, geometry, physics


@pytest.fixture
def base_geom():
    return geometry.PolarBoundary()


@pytest.fixture
def wave():
    return physics.WaveParams()


@pytest.fixture
def probes():
    return geometry.ring_probes()


def small_model(seed=0, width=8, layers=2, latent=4, spatial_mode="partial", n_probes=10):
    cfg = deeponet.ModelConfig(n_probes=n_probes, hidden_width=width, hidden_layers=layers,
                               latent=latent, spatial_mode=spatial_mode)
    return deeponet.init_model(cfg, seed=seed)


@pytest.fixture
def tiny_model():
    return small_model()


def zeroed(model):
    """Model with all parameters and biases zero: the field is identically 0."""
    m = model.copy()
    m.branch_params[:] = 0.0
    m.trunk_params[:] = 0.0
    m.output_bias[:] = 0.0
    return m
