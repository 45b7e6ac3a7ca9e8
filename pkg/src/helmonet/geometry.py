"""Star-shaped inclusion geometry and its radial signed distance function.

The inclusion boundary is a cosine-harmonic perturbation of a circle,

    R(theta) = r0 * (1 + sum_k a_k cos(k * (theta - alpha))),

star-shaped about its center, so the signed distance of a point is taken
radially: phi = r - R(theta), negative inside, positive outside, zero on the
boundary.  All derivatives of phi (up to third order) are closed-form trig
sums, which is what makes this family convenient for residual-based training.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi

# Below this distance from the center the polar angle is meaningless.
DEGENERATE_RADIUS = 1e-12
JET_MIN_RADIUS = 1e-9


class GeometryError(ValueError):
    pass


class DegenerateCenterError(GeometryError):
    """Raised when derivatives are requested too close to the center."""


class DegenerateCenterWarning(RuntimeWarning):
    """Signals that sdf() was evaluated at (or numerically on) the center."""


@dataclass(frozen=True)
class PolarBoundary:
    """Rotated star-shaped inclusion, R(theta) = base_radius*(1 + sum a_k cos(k(theta-rotation)))."""

    center: tuple[float, float] = (0.5, 0.5)
    base_radius: float = 0.2
    harmonics: tuple[tuple[int, float], ...] = ((2, 0.08), (3, 0.23), (5, 0.11))
    rotation: float = 0.0

    def __post_init__(self):
        if self.base_radius <= 0.0:
            raise GeometryError(f"base_radius must be positive, got {self.base_radius}")
        amp = sum(abs(a) for _, a in self.harmonics)
        if amp >= 1.0:
            raise GeometryError(
                f"harmonic amplitudes sum to {amp:.3f} >= 1; R(theta) would not stay positive"
            )

    def rotated(self, alpha: float) -> "PolarBoundary":
        return PolarBoundary(self.center, self.base_radius, self.harmonics, alpha)

    @property
    def min_radius(self) -> float:
        # conservative bound; exact minimum needs a 1-D search
        return self.base_radius * (1.0 - sum(abs(a) for _, a in self.harmonics))

    @property
    def max_radius(self) -> float:
        return self.base_radius * (1.0 + sum(abs(a) for _, a in self.harmonics))


@dataclass(frozen=True)
class ProbeSet:
    """Fixed spatial locations where phi is sampled to encode a geometry."""

    points: np.ndarray  # (N, 2)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise GeometryError(f"probe points must have shape (N>=1, 2), got {pts.shape}")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise GeometryError("probe points must be distinct")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


def ring_probes(center=(0.5, 0.5), ring_radius: float = 0.3, n: int = 10) -> ProbeSet:
    """n probes equally spaced in angle on a ring about the center.

    The default ring radius 0.3 exceeds the default family's maximum boundary
    radius (0.284), so every probe sees phi > 0 for every rotation.
    """
    ang = TWO_PI * np.arange(n) / n
    pts = np.stack([center[0] + ring_radius * np.cos(ang), center[1] + ring_radius * np.sin(ang)], axis=1)
    return ProbeSet(pts)


@dataclass
class SdfJet:
    """phi and its Cartesian derivatives at one point (or a batch of points).

    grad is (phi_x, phi_y); hess the symmetric 2x2 Hessian; third, when
    requested, holds (phi_xxx, phi_xxy, phi_xyy, phi_yyy).
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray | None = None
    third: np.ndarray | None = None


def radius(b: PolarBoundary, theta) -> np.ndarray:
    """Boundary radius R(theta); accepts scalars or arrays."""
    t = np.asarray(theta, dtype=float) - b.rotation
    out = np.ones_like(t)
    for k, a in b.harmonics:
        out = out + a * np.cos(k * t)
    return b.base_radius * out


def radius_derivatives(b: PolarBoundary, theta, order: int = 3):
    """(R, R', R'', R''') truncated to `order` entries past R."""
    t = np.asarray(theta, dtype=float) - b.rotation
    r0 = np.ones_like(t)
    d1 = np.zeros_like(t)
    d2 = np.zeros_like(t)
    d3 = np.zeros_like(t)
    for k, a in b.harmonics:
        kt = k * t
        r0 += a * np.cos(kt)
        d1 += -a * k * np.sin(kt)
        if order >= 2:
            d2 += -a * k * k * np.cos(kt)
        if order >= 3:
            d3 += a * k * k * k * np.sin(kt)
    out = [b.base_radius * r0, b.base_radius * d1]
    if order >= 2:
        out.append(b.base_radius * d2)
    if order >= 3:
        out.append(b.base_radius * d3)
    return tuple(out)


def boundary_point(b: PolarBoundary, theta) -> np.ndarray:
    """Parametric boundary point (x_c + R cos, y_c + R sin); vectorized over theta."""
    t = np.asarray(theta, dtype=float)
    r = radius(b, t)
    return np.stack([b.center[0] + r * np.cos(t), b.center[1] + r * np.sin(t)], axis=-1)


def boundary_tangent(b: PolarBoundary, theta) -> np.ndarray:
    """d/dtheta of boundary_point (not normalized)."""
    t = np.asarray(theta, dtype=float)
    r, rp = radius_derivatives(b, t, order=1)
    return np.stack([rp * np.cos(t) - r * np.sin(t), rp * np.sin(t) + r * np.cos(t)], axis=-1)


def boundary_normal(b: PolarBoundary, theta) -> np.ndarray:
    """Unit normal on the boundary pointing out of the inclusion.

    Equals grad(phi)/|grad(phi)| at boundary_point(theta).
    """
    t = np.asarray(theta, dtype=float)
    r, rp = radius_derivatives(b, t, order=1)
    c, s = np.cos(t), np.sin(t)
    gx = c + (rp / r) * s
    gy = s - (rp / r) * c
    norm = np.hypot(gx, gy)
    return np.stack([gx / norm, gy / norm], axis=-1)


def _split(p):
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    if pts.shape[-1] != 2:
        raise GeometryError(f"points must have trailing dimension 2, got shape {p.shape}")
    return pts, single


def sdf(b: PolarBoundary, p) -> np.ndarray:
    """Radial signed distance phi = r - R(theta); negative inside the inclusion.

    At the center the angle is undefined; those points get -R(0) and a
    DegenerateCenterWarning so downstream filtering can discard them.
    """
    pts, single = _split(p)
    dx = pts[:, 0] - b.center[0]
    dy = pts[:, 1] - b.center[1]
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    out = r - radius(b, theta)
    bad = r < DEGENERATE_RADIUS
    if np.any(bad):
        warnings.warn("sdf evaluated at the inclusion center", DegenerateCenterWarning, stacklevel=2)
        out = np.where(bad, -radius(b, 0.0), out)
    return out[0] if single else out


def sdf_jet(b: PolarBoundary, p, order: int = 2) -> SdfJet:
    """Analytic derivatives of phi through r and theta.

    order 1: value + gradient; 2: + Hessian; 3: + third-order entries
    (xxx, xxy, xyy, yyy).  Vectorized: p may be (2,) or (n, 2).
    """
    if order not in (1, 2, 3):
        raise GeometryError(f"order must be 1, 2 or 3, got {order}")
    pts, single = _split(p)
    dx = pts[:, 0] - b.center[0]
    dy = pts[:, 1] - b.center[1]
    r = np.hypot(dx, dy)
    if np.any(r < JET_MIN_RADIUS):
        raise DegenerateCenterError("sdf_jet requested within 1e-9 of the inclusion center")
    theta = np.arctan2(dy, dx)
    c = dx / r
    s = dy / r

    rd = radius_derivatives(b, theta, order=order)
    R1 = rd[1]

    value = r - rd[0]

    # first derivatives of r and theta
    th_x, th_y = -s / r, c / r
    gx = c - R1 * th_x
    gy = s - R1 * th_y
    grad = np.stack([gx, gy], axis=-1)

    hess = None
    third = None
    if order >= 2:
        R2 = rd[2]
        r2 = r * r
        r_xx, r_xy, r_yy = s * s / r, -c * s / r, c * c / r
        th_xx, th_xy, th_yy = 2 * c * s / r2, (s * s - c * c) / r2, -2 * c * s / r2
        # phi_ab = r_ab - R'' th_a th_b - R' th_ab
        h_xx = r_xx - R2 * th_x * th_x - R1 * th_xx
        h_xy = r_xy - R2 * th_x * th_y - R1 * th_xy
        h_yy = r_yy - R2 * th_y * th_y - R1 * th_yy
        hess = np.stack(
            [np.stack([h_xx, h_xy], axis=-1), np.stack([h_xy, h_yy], axis=-1)], axis=-2
        )
    if order >= 3:
        R3 = rd[3]
        r3 = r2 * r
        r_xxx = -3 * c * s * s / r2
        r_xxy = s * (2 * c * c - s * s) / r2
        r_xyy = c * (2 * s * s - c * c) / r2
        r_yyy = -3 * s * c * c / r2
        th_xxx = 2 * s * (s * s - 3 * c * c) / r3
        th_xxy = 2 * c * (c * c - 3 * s * s) / r3
        th_xyy = 2 * s * (3 * c * c - s * s) / r3
        th_yyy = -2 * c * (c * c - 3 * s * s) / r3
        ths = {"x": th_x, "y": th_y}
        th2 = {"xx": th_xx, "xy": th_xy, "yy": th_yy}
        th3 = {"xxx": th_xxx, "xxy": th_xxy, "xyy": th_xyy, "yyy": th_yyy}
        r3d = {"xxx": r_xxx, "xxy": r_xxy, "xyy": r_xyy, "yyy": r_yyy}

        def phi3(a, bb, cc):
            key3 = "".join(sorted(a + bb + cc))
            pair = lambda u, v: th2["".join(sorted(u + v))]
            return (
                r3d[key3]
                - R3 * ths[a] * ths[bb] * ths[cc]
                - R2 * (pair(a, bb) * ths[cc] + pair(a, cc) * ths[bb] + pair(bb, cc) * ths[a])
                - R1 * th3[key3]
            )

        third = np.stack(
            [phi3("x", "x", "x"), phi3("x", "x", "y"), phi3("x", "y", "y"), phi3("y", "y", "y")],
            axis=-1,
        )

    if single:
        value = value[0]
        grad = grad[0]
        hess = None if hess is None else hess[0]
        third = None if third is None else third[0]
    return SdfJet(value=value, grad=grad, hess=hess, third=third)


def probe_encoding(b: PolarBoundary, probes: ProbeSet) -> np.ndarray:
    """Vector [phi(p_1), ..., phi(p_N)] in fixed probe order."""
    return np.asarray(sdf(b, probes.points), dtype=float)


def rotate_about(p, alpha: float, center=(0.5, 0.5)) -> np.ndarray:
    """Rotate point(s) by alpha around the given center."""
    pts, single = _split(p)
    dx = pts[:, 0] - center[0]
    dy = pts[:, 1] - center[1]
    c, s = np.cos(alpha), np.sin(alpha)
    out = np.stack([center[0] + c * dx - s * dy, center[1] + s * dx + c * dy], axis=-1)
    return out[0] if single else out


def inclusion_area(b: PolarBoundary, n_quad: int = 4096) -> float:
    """Area enclosed by the boundary, 0.5 * integral of R(theta)^2 dtheta."""
    t = TWO_PI * (np.arange(n_quad) + 0.5) / n_quad
    r = radius(b, t)
    return float(0.5 * np.sum(r * r) * TWO_PI / n_quad)


def probes_to_csv(probes: ProbeSet, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "x", "y"])
        for i, (x, y) in enumerate(probes.points):
            w.writerow([i, repr(float(x)), repr(float(y))])


def probes_from_csv(path) -> ProbeSet:
    pts = []
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if header[:3] != ["index", "x", "y"]:
            raise GeometryError(f"unexpected probe CSV header: {header}")
        for row in rd:
            pts.append((float(row[1]), float(row[2])))
    return ProbeSet(np.asarray(pts))
