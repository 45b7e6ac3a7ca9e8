"""Incident wave, residual operators, loss assembly and the flux diagnostic.

Everything is built around the scattered-field decomposition: the network
predicts W_s only, the incident plane wave enters analytically through the
rigid-boundary condition.  Residuals:

* interior:       mu0 * lap(W_s) + rho0 * omega^2 * W_s
* inner boundary: mu0 * (d_n W_s + d_n W_inc)          (zero total flux)
* outer boundary: d_n W_s - i k0 W_s                   (first-order absorbing)

The loss is the mean over points of squared residual modulus, one mean per
condition, combined with configurable weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore, geometry
from .deeponet import DeepOnetModel, evaluate_field, trunk_seed_pack
from .diffcore import Var
from .sampling import CollocationSet

ON_GAMMA_TOL = 1e-8
ON_PERIMETER_TOL = 1e-12


class PhysicsError(ValueError):
    pass


class PointInsideInclusionError(PhysicsError):
    pass


class OffBoundaryError(PhysicsError):
    pass


@dataclass(frozen=True)
class WaveParams:
    """Material and incident-wave constants for the exterior region.

    The inclusion is a void, so no interior material constants exist; lam0 is
    carried for completeness but plays no role in the out-of-plane reduction.
    """

    mu0: float = 1.0
    rho0: float = 1.0
    lam0: float = 0.0
    omega: float = 2.0 * np.pi
    amp: float = 1.0
    direction: tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        if self.mu0 <= 0 or self.rho0 <= 0 or self.omega <= 0:
            raise PhysicsError("mu0, rho0 and omega must all be positive")
        d = np.asarray(self.direction, dtype=float)
        n = float(np.hypot(d[0], d[1]))
        if n == 0.0:
            raise PhysicsError("propagation direction must be nonzero")
        object.__setattr__(self, "direction", (float(d[0] / n), float(d[1] / n)))

    @property
    def k0(self) -> float:
        return self.omega * np.sqrt(self.rho0 / self.mu0)

    @classmethod
    def from_angle(cls, direction_deg: float, **kwargs) -> "WaveParams":
        a = np.deg2rad(direction_deg)
        return cls(direction=(float(np.cos(a)), float(np.sin(a))), **kwargs)


@dataclass
class LossReport:
    pde: float
    gamma: float
    gamma_out: float
    total: float
    weights: tuple[float, float, float]

    def as_tuple(self):
        return (self.pde, self.gamma, self.gamma_out, self.total)


@dataclass
class TrainingGeometry:
    """One geometry with its encoding and point budget."""

    geom: geometry.PolarBoundary
    encoding: np.ndarray
    colloc: CollocationSet


# ---------------------------------------------------------------------------
# incident field and field-level residual formulas
# ---------------------------------------------------------------------------


def incident_field(wp: WaveParams, p):
    """Plane wave amp*exp(i k0 d.x); returns (value, gradient)."""
    pts = np.atleast_2d(np.asarray(p, dtype=float))
    d = np.asarray(wp.direction)
    phase = wp.k0 * (pts @ d)
    val = wp.amp * np.exp(1j * phase)
    grad = 1j * wp.k0 * d[None, :] * val[:, None]
    if np.asarray(p).ndim == 1:
        return val[0], grad[0]
    return val, grad


def helmholtz_residual_field(wp: WaveParams, value, laplacian):
    """mu0*lap(W) + rho0*omega^2*W for any field samples."""
    return wp.mu0 * np.asarray(laplacian) + wp.rho0 * wp.omega**2 * np.asarray(value)


def rigid_residual_field(wp: WaveParams, p, n, grad_s):
    """mu0*(d_n W_s + d_n W_inc) on the inclusion boundary."""
    pts = np.atleast_2d(np.asarray(p, dtype=float))
    nrm = np.atleast_2d(np.asarray(n, dtype=float))
    gs = np.atleast_2d(np.asarray(grad_s))
    w_inc, _ = incident_field(wp, pts)
    d = np.asarray(wp.direction)
    dn_inc = 1j * wp.k0 * (nrm @ d) * w_inc
    out = wp.mu0 * ((gs * nrm).sum(axis=1) + dn_inc)
    return out[0] if np.asarray(p).ndim == 1 else out


def absorbing_residual_field(wp: WaveParams, value_s, grad_s, n):
    """d_n W_s - i k0 W_s on the outer boundary."""
    nrm = np.atleast_2d(np.asarray(n, dtype=float))
    gs = np.atleast_2d(np.asarray(grad_s))
    vs = np.atleast_1d(np.asarray(value_s))
    out = (gs * nrm).sum(axis=1) - 1j * wp.k0 * vs
    return out[0] if np.asarray(value_s).ndim == 0 else out


# ---------------------------------------------------------------------------
# model-level residual operators
# ---------------------------------------------------------------------------


def _encoding_for(model, geom, encoding):
    if encoding is None:
        probes = geometry.ring_probes(geom.center, n=model.n_probes)
        encoding = geometry.probe_encoding(geom, probes)
    return encoding


def pde_residual(model: DeepOnetModel, geom, wp: WaveParams, p, encoding=None):
    """Helmholtz residual of the learned scattered field at interior points."""
    pts = np.atleast_2d(np.asarray(p, dtype=float))
    phi = geometry.sdf(geom, pts)
    if np.any(phi <= 0.0):
        raise PointInsideInclusionError("pde_residual requires phi > 0 at every point")
    enc = _encoding_for(model, geom, encoding)
    values, _grads, lap = evaluate_field(model, enc, geom, pts, second="lap")
    out = helmholtz_residual_field(wp, values, lap)
    return out[0] if np.asarray(p).ndim == 1 else out


def rigid_bc_residual(model: DeepOnetModel, geom, wp: WaveParams, p, n, encoding=None):
    pts = np.atleast_2d(np.asarray(p, dtype=float))
    phi = geometry.sdf(geom, pts)
    if np.any(np.abs(phi) > ON_GAMMA_TOL):
        raise OffBoundaryError(f"point not on the inclusion boundary (|phi| up to {np.max(np.abs(phi)):.2e})")
    enc = _encoding_for(model, geom, encoding)
    _values, grads = evaluate_field(model, enc, geom, pts, second=None)
    out = rigid_residual_field(wp, pts, np.atleast_2d(n), grads)
    return out[0] if np.asarray(p).ndim == 1 else out


def absorbing_bc_residual(model: DeepOnetModel, geom, wp: WaveParams, p, n, encoding=None):
    pts = np.atleast_2d(np.asarray(p, dtype=float))
    edge_dist = np.minimum.reduce([pts[:, 0], pts[:, 1], 1.0 - pts[:, 0], 1.0 - pts[:, 1]])
    if np.any(np.abs(edge_dist) > ON_PERIMETER_TOL):
        raise OffBoundaryError("point not on the square perimeter")
    enc = _encoding_for(model, geom, encoding)
    values, grads = evaluate_field(model, enc, geom, pts, second=None)
    out = absorbing_residual_field(wp, values, grads, np.atleast_2d(n))
    return out[0] if np.asarray(p).ndim == 1 else out


def flux_divergence(field_evaluator, wp: WaveParams, p) -> float:
    """Divergence of the conserved flux J(W) = conj(W) mu grad(W) - W mu grad(conj W).

    For any C^2 field, div J = mu*(conj(W) lap W - W lap conj(W)) -- the cross
    gradient terms cancel identically -- which collapses to 2 mu Im(conj(W) lap W).
    Diagnostic only; identically zero for exact Helmholtz solutions and for
    any real-valued field.
    """
    value, _grad, lap = field_evaluator(p)
    return 2.0 * wp.mu0 * float(np.imag(np.conj(value) * lap))


# ---------------------------------------------------------------------------
# loss assembly (shared by total_loss and the trainer)
# ---------------------------------------------------------------------------


@dataclass
class PreparedBatch:
    """Point batches for repeated loss evaluation, concatenated over geometries.

    Each term's pack is slot-major (S, N, 5); segments list (geometry index,
    lo, hi) row ranges so the merge can pick the right branch latent.
    """

    encodings: np.ndarray  # (G, n_probes)
    pde_pack: np.ndarray
    pde_segments: list[tuple[int, int, int]]
    inner_pack: np.ndarray
    inner_segments: list[tuple[int, int, int]]
    inner_normals: np.ndarray
    inner_inc_re: np.ndarray  # Re/Im of i k0 (d.n) W_inc at inner points
    inner_inc_im: np.ndarray
    outer_pack: np.ndarray
    outer_segments: list[tuple[int, int, int]]
    outer_normals: np.ndarray


def _concat_packs(packs, empty_shape, dtype):
    packs = [p for p in packs if p.shape[1]]
    if not packs:
        return np.zeros(empty_shape, dtype=dtype)
    return np.concatenate(packs, axis=1)


def prepare_batch(training_geometries: list[TrainingGeometry], wp: WaveParams,
                  spatial_mode: str, dtype=np.float64) -> PreparedBatch:
    """Precompute trunk seeds, normals and incident-field constants."""
    d = np.asarray(wp.direction)
    enc = np.stack([np.asarray(tg.encoding, dtype=dtype) for tg in training_geometries])
    pde_packs, inner_packs, outer_packs = [], [], []
    pde_seg, inner_seg, outer_seg = [], [], []
    inner_nrm, outer_nrm, inc = [], [], []
    pde_at = inner_at = outer_at = 0
    for gidx, tg in enumerate(training_geometries):
        pde_pts = np.concatenate([tg.colloc.interior, tg.colloc.band], axis=0)
        if len(pde_pts):
            pde_packs.append(trunk_seed_pack(tg.geom, pde_pts, spatial_mode, "lap", dtype))
            pde_seg.append((gidx, pde_at, pde_at + len(pde_pts)))
            pde_at += len(pde_pts)
        ipts, inrm = tg.colloc.inner
        if len(ipts):
            inner_packs.append(trunk_seed_pack(tg.geom, ipts, spatial_mode, None, dtype))
            inner_seg.append((gidx, inner_at, inner_at + len(ipts)))
            inner_at += len(ipts)
            inner_nrm.append(np.asarray(inrm, dtype=dtype))
            w_inc, _ = incident_field(wp, ipts)
            inc.append(1j * wp.k0 * (inrm @ d) * w_inc)
        opts, onrm = tg.colloc.outer
        if len(opts):
            outer_packs.append(trunk_seed_pack(tg.geom, opts, spatial_mode, None, dtype))
            outer_seg.append((gidx, outer_at, outer_at + len(opts)))
            outer_at += len(opts)
            outer_nrm.append(np.asarray(onrm, dtype=dtype))
    inc_all = np.concatenate(inc) if inc else np.zeros(0, complex)
    return PreparedBatch(
        encodings=enc,
        pde_pack=_concat_packs(pde_packs, (4, 0, 5), dtype),
        pde_segments=pde_seg,
        inner_pack=_concat_packs(inner_packs, (3, 0, 5), dtype),
        inner_segments=inner_seg,
        inner_normals=np.concatenate(inner_nrm) if inner_nrm else np.zeros((0, 2), dtype),
        inner_inc_re=np.ascontiguousarray(inc_all.real, dtype=dtype),
        inner_inc_im=np.ascontiguousarray(inc_all.imag, dtype=dtype),
        outer_pack=_concat_packs(outer_packs, (3, 0, 5), dtype),
        outer_segments=outer_seg,
        outer_normals=np.concatenate(outer_nrm) if outer_nrm else np.zeros((0, 2), dtype),
    )


def loss_and_grad(model: DeepOnetModel, batches: list[PreparedBatch], wp: WaveParams,
                  weights=(1.0, 1.0, 1.0), want_grad: bool = True):
    """Weighted MSE of the three residual families, and optionally its gradient.

    Returns (LossReport, grads) where grads is (g_branch, g_trunk, g_bias)
    or None.  Means pool every geometry's points per term.  The trunk runs
    as a shared hidden stack; its output layer is folded into the merge.
    """
    w1, w2, w3 = (float(w) for w in weights)
    n_pde = sum(b.pde_pack.shape[1] for b in batches)
    n_in = sum(b.inner_pack.shape[1] for b in batches)
    n_out = sum(b.outer_pack.shape[1] for b in batches)
    for name, w, n in (("pde", w1, n_pde), ("gamma", w2, n_in), ("gamma_out", w3, n_out)):
        if w != 0.0 and n == 0:
            raise PhysicsError(f"loss term {name!r} is enabled but has no points")

    p = model.latent
    mu0 = float(wp.mu0)
    k0 = float(wp.k0)
    rw2 = float(wp.rho0 * wp.omega**2)

    bvar = Var(model.branch_params)
    tvar = Var(model.trunk_params)
    bias = Var(model.output_bias)
    branch = diffcore.TapedMlp(model.branch_spec, bvar)
    wl_slice, bl_slice = model.trunk_spec.last_layer_offsets()
    hidden_spec = model.trunk_spec.hidden_stack()
    hidden = diffcore.TapedMlp(hidden_spec, tvar[: wl_slice.start])
    w_last = tvar[wl_slice].reshape((2 * p, hidden_spec.layer_widths[-1]))
    b_last = tvar[bl_slice]
    bias_re, bias_im = bias[0], bias[1]

    pde_sum: Var | float = 0.0
    gam_sum: Var | float = 0.0
    out_sum: Var | float = 0.0
    for pb in batches:
        b_out = branch.forward(pb.encodings)
        if pb.pde_pack.shape[1]:
            H = hidden.forward_jet(pb.pde_pack, "lap")
            M = diffcore.contract_merge(H, w_last, b_last, b_out, p, pb.pde_segments)
            r_re = mu0 * M[3, :, 0] + rw2 * (M[0, :, 0] + bias_re)
            r_im = mu0 * M[3, :, 1] + rw2 * (M[0, :, 1] + bias_im)
            pde_sum = pde_sum + (r_re * r_re).sum() + (r_im * r_im).sum()
        if pb.inner_pack.shape[1]:
            H = hidden.forward_jet(pb.inner_pack, None)
            M = diffcore.contract_merge(H, w_last, b_last, b_out, p, pb.inner_segments)
            nx, ny = pb.inner_normals[:, 0], pb.inner_normals[:, 1]
            r_re = mu0 * (nx * M[1, :, 0] + ny * M[2, :, 0] + pb.inner_inc_re)
            r_im = mu0 * (nx * M[1, :, 1] + ny * M[2, :, 1] + pb.inner_inc_im)
            gam_sum = gam_sum + (r_re * r_re).sum() + (r_im * r_im).sum()
        if pb.outer_pack.shape[1]:
            H = hidden.forward_jet(pb.outer_pack, None)
            M = diffcore.contract_merge(H, w_last, b_last, b_out, p, pb.outer_segments)
            nx, ny = pb.outer_normals[:, 0], pb.outer_normals[:, 1]
            r_re = nx * M[1, :, 0] + ny * M[2, :, 0] + k0 * (M[0, :, 1] + bias_im)
            r_im = nx * M[1, :, 1] + ny * M[2, :, 1] + (-k0) * (M[0, :, 0] + bias_re)
            out_sum = out_sum + (r_re * r_re).sum() + (r_im * r_im).sum()

    terms = []
    for acc, n in ((pde_sum, n_pde), (gam_sum, n_in), (out_sum, n_out)):
        if isinstance(acc, Var):
            terms.append(acc * (1.0 / n))
        else:
            terms.append(Var(np.zeros(())))
    total = terms[0] * w1 + terms[1] * w2 + terms[2] * w3
    report = LossReport(
        pde=float(terms[0].data),
        gamma=float(terms[1].data),
        gamma_out=float(terms[2].data),
        total=float(total.data),
        weights=(w1, w2, w3),
    )
    if not want_grad:
        return report, None
    diffcore.backward(total)
    zeros = lambda v: np.zeros_like(v.data) if v.grad is None else v.grad
    return report, (zeros(bvar), zeros(tvar), zeros(bias))


def total_loss(model: DeepOnetModel, training_geometries: list[TrainingGeometry],
               wp: WaveParams, weights=(1.0, 1.0, 1.0)) -> LossReport:
    """Loss of the model over fixed point sets; value only."""
    batch = prepare_batch(training_geometries, wp, model.spatial_mode, model.dtype)
    report, _ = loss_and_grad(model, [batch], wp, weights, want_grad=False)
    return report
