"""Error metrics, angle sweeps, field exports and self-diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore, fem, geometry, physics
from .deeponet import DeepOnetModel, evaluate_values
from .geometry import PolarBoundary
from .physics import WaveParams


class EvaluationError(ValueError):
    pass


def relative_error(pred, ref, mode: str = "complex") -> float:
    """Normalized sum of absolute pointwise differences, relative to the reference.

    complex mode: sum|pred - ref| / sum|ref|; amplitude mode compares moduli:
    sum||pred| - |ref|| / sum|ref|.
    """
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise EvaluationError(f"length mismatch: {pred.shape} vs {ref.shape}")
    denom = np.abs(ref).sum()
    if denom == 0.0:
        raise EvaluationError("reference field is identically zero")
    if mode == "complex":
        num = np.abs(pred - ref).sum()
    elif mode == "amplitude":
        num = np.abs(np.abs(pred) - np.abs(ref)).sum()
    else:
        raise EvaluationError(f"unknown error mode {mode!r}")
    return float(num / denom)


@dataclass(frozen=True)
class SubdomainSpec:
    """Disk over which the localized error is reported."""

    center: tuple[float, float]
    radius: float = 0.15

    def mask(self, pts: np.ndarray) -> np.ndarray:
        d = np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1])
        return d <= self.radius


def concavity_subdomain(geom: PolarBoundary, radius: float = 0.15,
                        n_scan: int = 4096) -> SubdomainSpec:
    """Disk centered on the concavity mouth: the boundary point of minimal R.

    Recomputed per rotation, so the metric tracks the feature it measures.
    """
    th = 2.0 * np.pi * np.arange(n_scan) / n_scan
    r = geometry.radius(geom, th)
    t_star = th[int(np.argmin(r))]
    cx, cy = geometry.boundary_point(geom, t_star)
    return SubdomainSpec(center=(float(cx), float(cy)), radius=radius)


@dataclass
class SweepRow:
    angle_deg: float
    err_global: float
    err_global_amp: float
    err_d2: float
    err_d2_amp: float
    cross: tuple[float, ...]  # model(angle) vs FEM(beta) for each training beta
    status: str = "ok"


@dataclass(frozen=True)
class FemConfig:
    n_theta: int = 128
    n_radial: int = 21
    grading: float = 2.0


def fem_reference(base_geom: PolarBoundary, angle_deg: float, wp: WaveParams,
                  cfg: FemConfig) -> fem.FemSolution:
    geom = base_geom.rotated(base_geom.rotation + np.deg2rad(angle_deg))
    return fem.solve_scattering(geom, wp, cfg.n_theta, cfg.n_radial, cfg.grading)


def model_at_nodes(model: DeepOnetModel, geom: PolarBoundary, nodes: np.ndarray,
                   probes: geometry.ProbeSet) -> np.ndarray:
    enc = geometry.probe_encoding(geom, probes)
    return evaluate_values(model, enc, geom, nodes)


def angle_sweep(model: DeepOnetModel, wp: WaveParams, angles, base_geom: PolarBoundary,
                fem_cfg: FemConfig, training_angles, probes=None,
                subdomain_radius: float = 0.15) -> list[SweepRow]:
    """Per-angle comparison of the trained model against fresh FEM references.

    The model is evaluated at each reference's mesh nodes.  Cross columns
    compare the model at the swept angle against the FEM solutions of the
    training angles (at those meshes' nodes).
    """
    if probes is None:
        probes = geometry.ring_probes(base_geom.center, n=model.n_probes)
    refs = {}
    for beta in training_angles:
        refs[beta] = fem_reference(base_geom, beta, wp, fem_cfg)
    rows = []
    for alpha in angles:
        try:
            sol = fem_reference(base_geom, alpha, wp, fem_cfg)
            geom_a = base_geom.rotated(base_geom.rotation + np.deg2rad(alpha))
            pred = model_at_nodes(model, geom_a, sol.mesh.nodes, probes)
            sub = concavity_subdomain(geom_a, subdomain_radius)
            m = sub.mask(sol.mesh.nodes)
            if not np.any(m):
                raise EvaluationError("subdomain contains no mesh nodes")
            cross = []
            for beta in training_angles:
                ref_b = refs[beta]
                pred_b = model_at_nodes(model, geom_a, ref_b.mesh.nodes, probes)
                cross.append(relative_error(pred_b, ref_b.values, "complex"))
            rows.append(
                SweepRow(
                    angle_deg=float(alpha),
                    err_global=relative_error(pred, sol.values, "complex"),
                    err_global_amp=relative_error(pred, sol.values, "amplitude"),
                    err_d2=relative_error(pred[m], sol.values[m], "complex"),
                    err_d2_amp=relative_error(pred[m], sol.values[m], "amplitude"),
                    cross=tuple(cross),
                )
            )
        except (fem.FemError, EvaluationError) as e:
            rows.append(
                SweepRow(float(alpha), math.nan, math.nan, math.nan, math.nan,
                         tuple(math.nan for _ in training_angles),
                         status=f"error: {e}")
            )
    return rows


def cross_fem_error(base_geom: PolarBoundary, wp: WaveParams, alpha: float, beta: float,
                    fem_cfg: FemConfig, tol: float = 1e-6) -> float:
    """err(FEM(beta), FEM(alpha)) at FEM(alpha)'s nodes; the memorization baseline."""
    sol_a = fem_reference(base_geom, alpha, wp, fem_cfg)
    sol_b = fem_reference(base_geom, beta, wp, fem_cfg)
    vals_b = []
    ok = []
    for p in sol_a.mesh.nodes:
        try:
            vals_b.append(fem.field_at(sol_b, p, tol=tol))
            ok.append(True)
        except fem.PointLocationError:
            # node of mesh(alpha) inside the beta-rotated inclusion
            vals_b.append(0.0)
            ok.append(False)
    ok = np.asarray(ok)
    vals_b = np.asarray(vals_b)
    return relative_error(vals_b[ok], sol_a.values[ok], "complex")


def sweep_to_csv(rows: list[SweepRow], training_angles, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        cross_names = [f"cross_{int(b):+d}" for b in training_angles]
        w.writerow(["angle_deg", "err_global", "err_global_amp", "err_d2", "err_d2_amp",
                    *cross_names, "status"])
        for r in rows:
            w.writerow([repr(r.angle_deg), repr(r.err_global), repr(r.err_global_amp),
                        repr(r.err_d2), repr(r.err_d2_amp),
                        *[repr(c) for c in r.cross], r.status])


# ---------------------------------------------------------------------------
# field grids
# ---------------------------------------------------------------------------


def export_field_grid(source, geom: PolarBoundary, wp: WaveParams, n: int, stem,
                      component: str = "scattered", probes=None,
                      fem_cfg: FemConfig | None = None,
                      model: DeepOnetModel | None = None) -> dict:
    """Sample a field on an n x n grid of cell centers and write CSV + PGM.

    source is 'model' or 'fem'; component picks scattered, incident or total.
    Cells inside the inclusion are masked (zero in the PGM, empty in the CSV
    value columns).  The min/max scaling of the 8-bit heatmap goes into a
    sidecar text file so downstream plots can undo it.
    """
    if n < 2:
        raise EvaluationError("grid resolution must be >= 2")
    xs = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    phi = geometry.sdf(geom, pts)
    outside = phi > 0.0
    values = np.zeros(len(pts), dtype=complex)
    if component not in ("scattered", "incident", "total"):
        raise EvaluationError(f"unknown field component {component!r}")
    need_scattered = component in ("scattered", "total")
    if need_scattered:
        if source == "model":
            if model is None:
                raise EvaluationError("model source requires a model")
            if probes is None:
                probes = geometry.ring_probes(geom.center, n=model.n_probes)
            enc = geometry.probe_encoding(geom, probes)
            values[outside] = evaluate_values(model, enc, geom, pts[outside])
        elif source == "fem":
            cfg = fem_cfg or FemConfig()
            sol = fem.solve_scattering(geom, wp, cfg.n_theta, cfg.n_radial, cfg.grading)
            vals = []
            for p in pts[outside]:
                try:
                    vals.append(fem.field_at(sol, p, tol=1e-3))
                except fem.PointLocationError:
                    vals.append(np.nan)
            values[outside] = np.asarray(vals)
        else:
            raise EvaluationError(f"unknown field source {source!r}")
    if component in ("incident", "total"):
        inc, _ = physics.incident_field(wp, pts[outside])
        values[outside] = values[outside] + inc if component == "total" else inc

    good = outside & np.isfinite(values.real)
    csv_path = f"{stem}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "re", "im", "abs"])
        for i, (x, y) in enumerate(pts):
            if good[i]:
                v = values[i]
                w.writerow([repr(float(x)), repr(float(y)), repr(v.real), repr(v.imag), repr(abs(v))])
            else:
                w.writerow([repr(float(x)), repr(float(y)), "", "", ""])

    mag = np.where(good, np.abs(values), 0.0)
    vis = mag[good]
    vmin = float(vis.min()) if len(vis) else 0.0
    vmax = float(vis.max()) if len(vis) else 1.0
    scale = (vmax - vmin) if vmax > vmin else 1.0
    img = np.zeros(len(pts), dtype=np.uint8)
    img[good] = np.clip(np.round((mag[good] - vmin) / scale * 255.0), 0, 255).astype(np.uint8)
    grid = img.reshape(n, n)
    pgm_path = f"{stem}.pgm"
    with open(pgm_path, "wb") as f:
        f.write(f"P5\n{n} {n}\n255\n".encode("ascii"))
        # rows top-to-bottom: y decreasing
        f.write(np.ascontiguousarray(grid.T[::-1, :]).tobytes())
    with open(f"{stem}.pgm.txt", "w") as f:
        f.write(f"amplitude_min = {vmin!r}\namplitude_max = {vmax!r}\n")
        f.write(f"resolution = {n}\nmasked_cells = {int((~good).sum())}\n")
        f.write("masked cells are written as 0\n")
    return {
        "csv": csv_path,
        "pgm": pgm_path,
        "masked": int((~good).sum()),
        "masked_inside": int((~outside).sum()),
        "amplitude_min": vmin,
        "amplitude_max": vmax,
    }


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@dataclass
class DiagnosticCheck:
    name: str
    passed: bool
    measured: float
    threshold: float
    note: str = ""


@dataclass
class DiagnosticsReport:
    checks: list[DiagnosticCheck] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, measured, threshold, larger_is_fail=True, note=""):
        passed = measured < threshold if larger_is_fail else measured > threshold
        self.checks.append(DiagnosticCheck(name, bool(passed), float(measured),
                                           float(threshold), note))

    def format(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"[{status}] {c.name}: measured {c.measured:.3e} vs {c.threshold:.3e} {c.note}")
        return "\n".join(lines)


def _fd_jet_defect(geom, pts, sdf_jet_fn):
    h = 1e-5
    worst = 0.0
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    for p in pts:
        jet = sdf_jet_fn(geom, p, 3)
        fd_grad = np.array(
            [
                (geometry.sdf(geom, p + ex) - geometry.sdf(geom, p - ex)) / (2 * h),
                (geometry.sdf(geom, p + ey) - geometry.sdf(geom, p - ey)) / (2 * h),
            ]
        )
        worst = max(worst, np.linalg.norm(fd_grad - jet.grad) / np.linalg.norm(jet.grad))
        fdh = np.stack(
            [
                (sdf_jet_fn(geom, p + ex, 1).grad - sdf_jet_fn(geom, p - ex, 1).grad) / (2 * h),
                (sdf_jet_fn(geom, p + ey, 1).grad - sdf_jet_fn(geom, p - ey, 1).grad) / (2 * h),
            ]
        )
        fdh = 0.5 * (fdh + fdh.T)
        worst = max(worst, np.linalg.norm(fdh - jet.hess) / np.linalg.norm(jet.hess))
    return worst


def fem_flux_divergence_stat(sol: fem.FemSolution, wp: WaveParams, n_points: int = 200,
                             step: float = 0.02, seed: int = 0) -> float:
    """Median |div J| of the FEM field at interior points, relative to mu k0^3 amp^2.

    The P1 field has no pointwise Laplacian, so a 5-point finite-difference
    stencil of the interpolant stands in; the statistic is a smoke indicator
    of flux conservation, not a sharp test.
    """
    geom = sol.mesh.geom
    rng = np.random.default_rng(seed)
    total = 0
    vals = []
    margin = step * 1.5
    while len(vals) < n_points and total < 100 * n_points:
        total += 1
        p = rng.uniform(margin, 1.0 - margin, 2)
        if geometry.sdf(geom, p) < margin + 0.02:
            continue
        try:
            w0 = fem.field_at(sol, p, tol=1e-3)
            wxp = fem.field_at(sol, p + [step, 0.0], tol=1e-3)
            wxm = fem.field_at(sol, p - [step, 0.0], tol=1e-3)
            wyp = fem.field_at(sol, p + [0.0, step], tol=1e-3)
            wym = fem.field_at(sol, p - [0.0, step], tol=1e-3)
        except fem.PointLocationError:
            continue
        lap = (wxp + wxm + wyp + wym - 4.0 * w0) / step**2
        vals.append(abs(2.0 * wp.mu0 * np.imag(np.conj(w0) * lap)))
    if not vals:
        raise EvaluationError("no usable interior stencil points for the flux statistic")
    return float(np.median(vals) / (wp.mu0 * wp.k0**3 * wp.amp**2))


def encoding_gap(base_geom: PolarBoundary, probes, lo_deg=-60, hi_deg=60, step_deg=1.0):
    angles = np.arange(lo_deg, hi_deg + step_deg / 2, step_deg)
    encs = np.stack(
        [geometry.probe_encoding(base_geom.rotated(base_geom.rotation + np.deg2rad(a)), probes)
         for a in angles]
    )
    gap = np.inf
    for i in range(len(encs)):
        d = np.abs(encs[i + 1 :] - encs[i]).max(axis=1)
        if len(d):
            gap = min(gap, d.min())
    return float(gap)


def run_diagnostics(seed: int = 0, sdf_jet_fn=None, fem_cfg: FemConfig | None = None,
                    fem_flux_threshold: float = 0.2) -> DiagnosticsReport:
    """Release-gate checks with measured values; all must pass on defaults."""
    rep = DiagnosticsReport()
    rng = np.random.default_rng(seed)
    geom = PolarBoundary(rotation=float(rng.uniform(-1, 1)))
    wp = WaveParams()
    sdf_jet_fn = sdf_jet_fn or geometry.sdf_jet

    pts = []
    while len(pts) < 200:
        cand = rng.uniform(0, 1, (500, 2))
        keep = np.hypot(cand[:, 0] - geom.center[0], cand[:, 1] - geom.center[1]) > 0.05
        pts.extend(cand[keep].tolist())
    rep.add("geometry_jet_fd", _fd_jet_defect(geom, np.asarray(pts[:200]), sdf_jet_fn), 1e-6)

    worst = 0.0
    for k0 in (np.pi, 2 * np.pi, 4 * np.pi):
        wpk = WaveParams(omega=k0)
        p = rng.uniform(0, 1, (1000, 2))
        val, _ = physics.incident_field(wpk, p)
        res = physics.helmholtz_residual_field(wpk, val, -wpk.k0**2 * val)
        worst = max(worst, float(np.abs(res).max()))
    rep.add("plane_wave_residual", worst, 1e-8)

    probes = geometry.ring_probes(geom.center)
    rep.add("encoding_injectivity_gap", encoding_gap(geom, probes), 1e-4,
            larger_is_fail=False, note="(minimum pairwise Linf gap, must exceed)")

    cfg = fem_cfg or FemConfig()
    val_f, grad_f = fem.plane_wave_fields(wp)
    mesh1 = fem.build_mesh(geom, cfg.n_theta, cfg.n_radial, cfg.grading)
    _, e1 = fem.solve_mms(mesh1, wp, val_f, grad_f)
    rep.add("fem_mms_error", e1, 0.01, note=f"({mesh1.n_nodes} nodes)")
    mesh2 = fem.build_mesh(geom, 2 * cfg.n_theta, 2 * cfg.n_radial, cfg.grading)
    _, e2 = fem.solve_mms(mesh2, wp, val_f, grad_f)
    ratio = e1 / e2
    rep.checks.append(
        DiagnosticCheck("fem_mms_refinement_ratio", bool(3.0 <= ratio <= 5.0), float(ratio), 4.0,
                        note="(must lie in [3, 5])")
    )

    p0 = np.array([0.9, 0.7])
    def plane_eval(p):
        v, g = physics.incident_field(wp, p)
        return v, g, -wp.k0**2 * v
    rep.add("flux_divergence_plane_wave", abs(physics.flux_divergence(plane_eval, wp, p0)), 1e-10)
    def real_eval(p):
        return 1.7, np.array([0.3, -0.2]), 0.9
    rep.add("flux_divergence_real_field", abs(physics.flux_divergence(real_eval, wp, p0)), 1e-300,
            note="(exact zero required)")
    fem_sol = fem.FemSolution(mesh=mesh1, values=fem.solve(fem.assemble(mesh1, wp)))
    rep.add("fem_flux_divergence_stat", fem_flux_divergence_stat(fem_sol, wp, seed=seed),
            fem_flux_threshold, note="(median |div J| / mu k0^3 amp^2, smoke threshold)")

    spec = diffcore.MlpSpec((2, 16, 16, 16, 3), "tanh")
    params = np.random.Generator(np.random.Philox(key=seed)).normal(0, 0.5, spec.n_params)
    worst = 0.0
    for _ in range(20):
        x = rng.normal(0, 1, 2)
        jets = diffcore.mlp_forward_jet(spec, params, diffcore.identity_jets(x))
        h = 1e-4
        for o, jet in enumerate(jets):
            fd = np.array(
                [
                    (diffcore.mlp_forward(spec, params, x + [h, 0])[o]
                     - diffcore.mlp_forward(spec, params, x - [h, 0])[o]) / (2 * h),
                    (diffcore.mlp_forward(spec, params, x + [0, h])[o]
                     - diffcore.mlp_forward(spec, params, x - [0, h])[o]) / (2 * h),
                ]
            )
            worst = max(worst, np.linalg.norm(fd - jet.d) / max(np.linalg.norm(jet.d), 1e-12))
    rep.add("network_jet_fd", worst, 1e-5)
    return rep
