"""Branch/trunk operator network mapping geometry encodings to complex fields.

The branch net consumes the probe encoding of a geometry, the trunk net the
local features (x, y, phi, phi_x, phi_y) of a query point.  Both end in a
latent vector of width 2p; the first p slots merge into the real part of the
field by a dot product, the last p into the imaginary part, each plus a
trainable scalar bias.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore, geometry
from .diffcore import MlpSpec

CHECKPOINT_MAGIC = "HELMONET-CKPT"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


TRUNK_FEATURES = ("x", "y", "phi", "phi_x", "phi_y")


@dataclass(frozen=True)
class ModelConfig:
    n_probes: int = 10
    hidden_width: int = 100
    hidden_layers: int = 4
    latent: int = 100  # p; final layer width is 2p
    activation: str = "tanh"
    # "total" differentiates through (phi, phi_x, phi_y), so the realized field
    # genuinely satisfies the trained residuals; "partial" freezes the features
    # (cheaper seeds, but the composite then solves a different equation).
    spatial_mode: str = "total"

    def __post_init__(self):
        if self.spatial_mode not in ("partial", "total"):
            raise ModelError(f"spatial_mode must be 'partial' or 'total', got {self.spatial_mode!r}")

    def branch_spec(self) -> MlpSpec:
        widths = (self.n_probes,) + (self.hidden_width,) * self.hidden_layers + (2 * self.latent,)
        return MlpSpec(widths, self.activation)

    def trunk_spec(self) -> MlpSpec:
        widths = (len(TRUNK_FEATURES),) + (self.hidden_width,) * self.hidden_layers + (2 * self.latent,)
        return MlpSpec(widths, self.activation)


@dataclass
class TrunkFeatures:
    """Local query-point features; (phi, phi_x, phi_y) must come from the geometry."""

    x: float
    y: float
    phi: float
    phi_x: float
    phi_y: float

    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi, self.phi_x, self.phi_y])


@dataclass
class ComplexSample:
    value: complex
    grad: np.ndarray | None = None  # (2,) complex
    laplacian: complex | None = None


@dataclass
class DeepOnetModel:
    branch_spec: MlpSpec
    branch_params: np.ndarray
    trunk_spec: MlpSpec
    trunk_params: np.ndarray
    output_bias: np.ndarray  # (2,): real-channel bias, imaginary-channel bias
    latent: int
    spatial_mode: str = "partial"
    init_seed: int | None = None

    def __post_init__(self):
        if self.branch_spec.layer_widths[-1] != 2 * self.latent:
            raise ModelError("branch output width must equal 2*latent")
        if self.trunk_spec.layer_widths[-1] != 2 * self.latent:
            raise ModelError("trunk output width must equal 2*latent")
        if self.trunk_spec.layer_widths[0] != len(TRUNK_FEATURES):
            raise ModelError(f"trunk input width must be {len(TRUNK_FEATURES)}")
        if self.output_bias.shape != (2,):
            raise ModelError("output_bias must have shape (2,)")
        if self.spatial_mode not in ("partial", "total"):
            raise ModelError(f"bad spatial_mode {self.spatial_mode!r}")

    @property
    def n_probes(self) -> int:
        return self.branch_spec.layer_widths[0]

    @property
    def dtype(self):
        return self.branch_params.dtype

    def astype(self, dtype) -> "DeepOnetModel":
        return DeepOnetModel(
            self.branch_spec,
            self.branch_params.astype(dtype),
            self.trunk_spec,
            self.trunk_params.astype(dtype),
            self.output_bias.astype(dtype),
            self.latent,
            self.spatial_mode,
            self.init_seed,
        )

    def copy(self) -> "DeepOnetModel":
        return DeepOnetModel(
            self.branch_spec,
            self.branch_params.copy(),
            self.trunk_spec,
            self.trunk_params.copy(),
            self.output_bias.copy(),
            self.latent,
            self.spatial_mode,
            self.init_seed,
        )


# Output layers start at a tenth of the tanh gain and the trunk's first-layer
# columns for (phi, phi_x, phi_y) start at zero.  The initial field is then
# small and independent of the stiff derivative features, so the boundary
# terms lead the early optimization instead of being drowned by the huge
# residual-curvature gradients those features carry near the inclusion.
HIDDEN_GAIN = 5.0 / 3.0
FINAL_GAIN_FACTOR = 0.1
INIT_SCHEME = "calm-start-v1"


def glorot_limits(spec: MlpSpec, gain: float):
    return [
        gain * np.sqrt(6.0 / (w_in + w_out))
        for w_in, w_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:])
    ]


def init_model(config: ModelConfig, seed: int, dtype=np.float64) -> DeepOnetModel:
    """Variance-scaled symmetric initialization (uniform), zero biases."""
    gain = HIDDEN_GAIN if config.activation == "tanh" else 1.0
    rng = np.random.Generator(np.random.Philox(key=seed))
    params = []
    for which, spec in (("branch", config.branch_spec()), ("trunk", config.trunk_spec())):
        layers = []
        n_layers = spec.n_layers
        for li, ((w_in, w_out), lim) in enumerate(
            zip(zip(spec.layer_widths[:-1], spec.layer_widths[1:]), glorot_limits(spec, gain))
        ):
            if li == n_layers - 1:
                lim *= FINAL_GAIN_FACTOR
            W = rng.uniform(-lim, lim, size=(w_out, w_in))
            if which == "trunk" and li == 0:
                W[:, 2:] = 0.0  # phi, phi_x, phi_y enter only as training asks
            layers.append((W, np.zeros(w_out)))
        params.append(diffcore.pack_params(spec, layers).astype(dtype))
    return DeepOnetModel(
        branch_spec=config.branch_spec(),
        branch_params=params[0],
        trunk_spec=config.trunk_spec(),
        trunk_params=params[1],
        output_bias=np.zeros(2, dtype=dtype),
        latent=config.latent,
        spatial_mode=config.spatial_mode,
        init_seed=seed,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def branch_forward(model: DeepOnetModel, encoding: np.ndarray) -> np.ndarray:
    encoding = np.asarray(encoding)
    if encoding.shape != (model.n_probes,):
        raise ModelError(
            f"encoding must have shape ({model.n_probes},), got {encoding.shape}"
        )
    return diffcore.mlp_forward(model.branch_spec, model.branch_params, encoding)


def merge(model: DeepOnetModel, branch_out: np.ndarray, trunk_out: np.ndarray):
    """Dot-product merge; trunk_out may be (2p,) or (n, 2p).  Returns (re, im)."""
    p = model.latent
    re = trunk_out[..., :p] @ branch_out[:p] + model.output_bias[0]
    im = trunk_out[..., p:] @ branch_out[p:] + model.output_bias[1]
    return re, im


def evaluate(model: DeepOnetModel, encoding: np.ndarray, feats: TrunkFeatures) -> ComplexSample:
    """Field value at one query point."""
    b = branch_forward(model, encoding)
    t = diffcore.mlp_forward(model.trunk_spec, model.trunk_params, feats.vector())
    re, im = merge(model, b, t)
    return ComplexSample(value=complex(re, im))


def trunk_seed_pack(geom: geometry.PolarBoundary, pts: np.ndarray, spatial_mode: str,
                    second: str | None, dtype=np.float64) -> np.ndarray:
    """Packed trunk-input jets for a batch of points.

    In 'partial' mode the (phi, phi_x, phi_y) features are held fixed while
    differentiating w.r.t. (x, y); in 'total' mode they carry their own
    first/second derivative seeds from the geometry jets (order 3 needed so
    the phi_x / phi_y features have Hessian seeds).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = pts.shape[0]
    m = {None: 0, "lap": 1, "full": 3}[second]
    S = 3 + m
    pack = np.zeros((S, n, len(TRUNK_FEATURES)), dtype=dtype)
    order = 3 if (spatial_mode == "total" and second is not None) else (2 if spatial_mode == "total" else 1)
    jet = geometry.sdf_jet(geom, pts, order=order)
    pack[0, :, 0] = pts[:, 0]
    pack[0, :, 1] = pts[:, 1]
    pack[0, :, 2] = jet.value
    pack[0, :, 3] = jet.grad[:, 0]
    pack[0, :, 4] = jet.grad[:, 1]
    # identity seeds on the raw coordinates
    pack[1, :, 0] = 1.0
    pack[2, :, 1] = 1.0
    if spatial_mode == "total":
        pack[1, :, 2] = jet.grad[:, 0]
        pack[2, :, 2] = jet.grad[:, 1]
        h = jet.hess
        pack[1, :, 3] = h[:, 0, 0]
        pack[2, :, 3] = h[:, 0, 1]
        pack[1, :, 4] = h[:, 0, 1]
        pack[2, :, 4] = h[:, 1, 1]
        if second == "full":
            t3 = jet.third
            pack[3, :, 2] = h[:, 0, 0]
            pack[4, :, 2] = h[:, 0, 1]
            pack[5, :, 2] = h[:, 1, 1]
            pack[3, :, 3] = t3[:, 0]
            pack[4, :, 3] = t3[:, 1]
            pack[5, :, 3] = t3[:, 2]
            pack[3, :, 4] = t3[:, 1]
            pack[4, :, 4] = t3[:, 2]
            pack[5, :, 4] = t3[:, 3]
        elif second == "lap":
            pack[3, :, 2] = h[:, 0, 0] + h[:, 1, 1]
            pack[3, :, 3] = jet.third[:, 0] + jet.third[:, 2]
            pack[3, :, 4] = jet.third[:, 1] + jet.third[:, 3]
    return pack


def evaluate_values(model: DeepOnetModel, encoding: np.ndarray, geom: geometry.PolarBoundary,
                    pts: np.ndarray) -> np.ndarray:
    """Complex field values at many points (no derivative slots; fastest path)."""
    b = branch_forward(model, encoding)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    feats = np.empty((pts.shape[0], len(TRUNK_FEATURES)), dtype=model.dtype)
    jet = geometry.sdf_jet(geom, pts, order=1)
    feats[:, 0] = pts[:, 0]
    feats[:, 1] = pts[:, 1]
    feats[:, 2] = jet.value
    feats[:, 3] = jet.grad[:, 0]
    feats[:, 4] = jet.grad[:, 1]
    t = diffcore.mlp_forward(model.trunk_spec, model.trunk_params, feats)
    re, im = merge(model, b, t)
    return re + 1j * im


def evaluate_field(model: DeepOnetModel, encoding: np.ndarray, geom: geometry.PolarBoundary,
                   pts: np.ndarray, second: str | None = None):
    """Batched evaluation at many points.

    Returns (values, grads) or (values, grads, laplacians) as complex arrays
    depending on the requested second-order mode.
    """
    b = branch_forward(model, encoding)
    pack = trunk_seed_pack(geom, pts, model.spatial_mode, second, dtype=model.dtype)
    out = diffcore.jet_forward(model.trunk_spec, model.trunk_params, pack, second)
    re, im = merge(model, b, out[0])
    values = re + 1j * im
    p = model.latent
    gre = out[1:3, :, :p] @ b[:p]
    gim = out[1:3, :, p:] @ b[p:]
    grads = (gre + 1j * gim).T
    if second is None:
        return values, grads
    if second == "lap":
        lap = out[3, :, :p] @ b[:p] + 1j * (out[3, :, p:] @ b[p:])
    else:
        lre = (out[3, :, :p] + out[5, :, :p]) @ b[:p]
        lim = (out[3, :, p:] + out[5, :, p:]) @ b[p:]
        lap = lre + 1j * lim
    return values, grads, lap


def evaluate_with_derivatives(model: DeepOnetModel, geom: geometry.PolarBoundary, point,
                              encoding: np.ndarray | None = None,
                              probes: geometry.ProbeSet | None = None) -> ComplexSample:
    """Value, complex gradient and complex Laplacian at one point.

    The branch encoding is constant w.r.t. the query point; when not supplied
    it is computed from the given probes (default: the standard ring).
    """
    if encoding is None:
        if probes is None:
            probes = geometry.ring_probes(geom.center, n=model.n_probes)
        encoding = geometry.probe_encoding(geom, probes)
    pt = np.asarray(point, dtype=float).reshape(1, 2)
    values, grads, lap = evaluate_field(model, encoding, geom, pt, second="full")
    return ComplexSample(value=complex(values[0]), grad=grads[0], laplacian=complex(lap[0]))


# ---------------------------------------------------------------------------
# checkpoints: text header + little-endian float64 arrays
# ---------------------------------------------------------------------------


def _model_header(model: DeepOnetModel) -> dict:
    return {
        "magic": CHECKPOINT_MAGIC,
        "format_version": CHECKPOINT_VERSION,
        "branch_widths": list(model.branch_spec.layer_widths),
        "trunk_widths": list(model.trunk_spec.layer_widths),
        "activation": model.branch_spec.activation,
        "latent": model.latent,
        "spatial_mode": model.spatial_mode,
        "dtype": str(np.dtype(model.dtype)),
        "init_seed": model.init_seed,
    }


def _write_arrays(f, arrays) -> None:
    for a in arrays:
        f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def save_checkpoint(model: DeepOnetModel, path, extra_arrays: dict | None = None,
                    extra_meta: dict | None = None) -> None:
    """Write the model (and optional named float arrays, e.g. optimizer state)."""
    header = _model_header(model)
    if extra_meta:
        header["extra_meta"] = extra_meta
    sections = [
        ("branch_params", model.branch_params.size),
        ("trunk_params", model.trunk_params.size),
        ("output_bias", 2),
    ]
    arrays = [model.branch_params, model.trunk_params, model.output_bias]
    for name, arr in (extra_arrays or {}).items():
        arr = np.asarray(arr, dtype=float).ravel()
        sections.append((name, arr.size))
        arrays.append(arr)
    header["sections"] = sections
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("ascii"))
        _write_arrays(f, arrays)


def load_checkpoint(path, expect_spatial_mode: str | None = None):
    """Read a checkpoint; returns (model, extra_arrays, header)."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from e
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("not a model checkpoint (bad magic)")
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        blob = f.read()
    sections = header["sections"]
    total = sum(n for _, n in sections)
    if len(blob) != 8 * total:
        raise CheckpointError(
            f"corrupt checkpoint payload: expected {8 * total} bytes, got {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    off = 0
    for name, n in sections:
        arrays[name] = flat[off : off + n].copy()
        off += n
    branch_spec = MlpSpec(tuple(header["branch_widths"]), header["activation"])
    trunk_spec = MlpSpec(tuple(header["trunk_widths"]), header["activation"])
    for key, spec in (("branch_params", branch_spec), ("trunk_params", trunk_spec)):
        if arrays[key].size != spec.n_params:
            raise CheckpointError(
                f"shape mismatch: {key} has {arrays[key].size} entries, spec wants {spec.n_params}"
            )
    if expect_spatial_mode is not None and header["spatial_mode"] != expect_spatial_mode:
        warnings.warn(
            f"checkpoint spatial_mode={header['spatial_mode']!r} differs from "
            f"configured {expect_spatial_mode!r}; using the checkpoint's",
            RuntimeWarning,
        )
    dtype = np.dtype(header.get("dtype", "float64"))
    model = DeepOnetModel(
        branch_spec=branch_spec,
        branch_params=arrays.pop("branch_params").astype(dtype),
        trunk_spec=trunk_spec,
        trunk_params=arrays.pop("trunk_params").astype(dtype),
        output_bias=arrays.pop("output_bias").astype(dtype),
        latent=header["latent"],
        spatial_mode=header["spatial_mode"],
        init_seed=header.get("init_seed"),
    )
    return model, arrays, header
