"""Deterministic collocation and boundary point sets.

All randomness comes from numpy's counter-based Philox generator keyed on
(seed, stream), so every point set is a bit-reproducible pure function of
(geometry, config).  Streams: 0 interior, 1 band, 2 outer, 3 inner.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .geometry import PolarBoundary

_STREAM_INTERIOR, _STREAM_BAND, _STREAM_OUTER, _STREAM_INNER = range(4)

MAX_CONSECUTIVE_REJECTIONS = 1_000_000


class SamplingError(ValueError):
    pass


class SamplingExhaustedError(SamplingError):
    """Rejection sampling stalled; the target region is likely empty."""


@dataclass(frozen=True)
class SamplerConfig:
    n_interior_raw: int = 15_000
    band_fraction: float = 0.5
    band_width: float = 0.01
    n_outer: int = 20_000  # shared across geometries
    n_inner_per_geometry: int = 2_000
    inner_weighting: str = "theta"  # or "arclength": density proportional to arc length
    seed: int = 0

    def __post_init__(self):
        if min(self.n_interior_raw, self.n_outer, self.n_inner_per_geometry) < 0:
            raise SamplingError("point counts must be >= 0")
        if not (0.0 < self.band_width < 0.1):
            raise SamplingError(f"band_width must lie in (0, 0.1), got {self.band_width}")
        if self.band_fraction < 0.0:
            raise SamplingError("band_fraction must be >= 0")
        if self.inner_weighting not in ("theta", "arclength"):
            raise SamplingError(f"unknown inner_weighting {self.inner_weighting!r}")

    def with_seed(self, seed: int) -> "SamplerConfig":
        return replace(self, seed=seed)


@dataclass
class CollocationSet:
    interior: np.ndarray  # (n, 2), all with phi > 0
    band: np.ndarray  # (m, 2), 0 < phi < band_width
    outer: tuple[np.ndarray, np.ndarray]  # points on the square perimeter, outward normals
    inner: tuple[np.ndarray, np.ndarray]  # points on the inclusion boundary, outward-of-inclusion normals


def _rng(cfg: SamplerConfig, stream: int) -> np.random.Generator:
    key = np.array([np.uint64(cfg.seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_interior(geom: PolarBoundary, cfg: SamplerConfig) -> np.ndarray:
    """Uniform draws on the unit square, keeping only points outside the inclusion."""
    rng = _rng(cfg, _STREAM_INTERIOR)
    pts = rng.uniform(0.0, 1.0, size=(cfg.n_interior_raw, 2))
    phi = geometry.sdf(geom, pts) if len(pts) else np.zeros(0)
    return pts[phi > 0.0]


def sample_band(geom: PolarBoundary, cfg: SamplerConfig,
                retained_count: int | None = None) -> np.ndarray:
    """Points uniform in the one-sided band 0 < phi < band_width outside the boundary.

    Proposals are area-uniform in the annulus r in [min R, max R + band_width]
    around the center; the count is ceil(band_fraction * retained interior count).
    """
    if retained_count is None:
        retained_count = len(sample_interior(geom, cfg))
    target = int(np.ceil(cfg.band_fraction * retained_count))
    if target == 0:
        return np.zeros((0, 2))
    rng = _rng(cfg, _STREAM_BAND)
    r1 = geom.min_radius
    r2 = geom.max_radius + cfg.band_width
    out = []
    got = 0
    rejected_streak = 0
    while got < target:
        m = max(4 * (target - got), 1024)
        u = rng.uniform(0.0, 1.0, size=m)
        th = rng.uniform(0.0, 2.0 * np.pi, size=m)
        r = np.sqrt(r1 * r1 + u * (r2 * r2 - r1 * r1))
        pts = np.stack(
            [geom.center[0] + r * np.cos(th), geom.center[1] + r * np.sin(th)], axis=1
        )
        phi = geometry.sdf(geom, pts)
        ok = (phi > 0.0) & (phi < cfg.band_width)
        # stay inside the computational square
        ok &= (pts[:, 0] >= 0.0) & (pts[:, 0] <= 1.0) & (pts[:, 1] >= 0.0) & (pts[:, 1] <= 1.0)
        acc = pts[ok]
        if len(acc) == 0:
            rejected_streak += m
            if rejected_streak > MAX_CONSECUTIVE_REJECTIONS:
                raise SamplingExhaustedError(
                    f"band sampling stalled after {rejected_streak} consecutive rejections"
                )
            continue
        rejected_streak = 0
        out.append(acc[: target - got])
        got += len(out[-1])
    return np.concatenate(out, axis=0)


def sample_outer(cfg: SamplerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Uniform points on the unit-square perimeter with per-edge outward normals.

    Draws landing exactly on a corner are re-drawn.  Perimeter parameter t in
    [0,4): bottom, right, top, left in that order.
    """
    rng = _rng(cfg, _STREAM_OUTER)
    n = cfg.n_outer
    t = np.zeros(0)
    while len(t) < n:
        cand = rng.uniform(0.0, 4.0, size=n - len(t))
        frac = cand % 1.0
        cand = cand[(frac != 0.0)]  # corner hits: re-draw
        t = np.concatenate([t, cand])
    edge = np.floor(t).astype(int)
    f = t - edge
    pts = np.empty((n, 2))
    nrm = np.empty((n, 2))
    for e, (px, py, nx, ny) in enumerate(
        [(None, 0.0, 0.0, -1.0), (1.0, None, 1.0, 0.0), (None, 1.0, 0.0, 1.0), (0.0, None, -1.0, 0.0)]
    ):
        m = edge == e
        # traverse the perimeter counterclockwise
        coord = f[m] if e in (0, 1) else 1.0 - f[m]
        pts[m, 0] = coord if px is None else px
        pts[m, 1] = coord if py is None else py
        nrm[m, 0] = nx
        nrm[m, 1] = ny
    return pts, nrm


def sample_inner(geom: PolarBoundary, cfg: SamplerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Boundary points at random angles, paired with outward normals.

    Default weighting is uniform in theta; "arclength" thins the angles by
    rejection against the parametric speed, giving uniform density along the
    curve instead.
    """
    rng = _rng(cfg, _STREAM_INNER)
    n = cfg.n_inner_per_geometry
    if cfg.inner_weighting == "theta":
        th = rng.uniform(0.0, 2.0 * np.pi, size=n)
    else:
        grid = np.linspace(0.0, 2.0 * np.pi, 4096, endpoint=False)
        speed_max = np.linalg.norm(geometry.boundary_tangent(geom, grid), axis=1).max() * 1.001
        samples = []
        got = 0
        while got < n:
            cand = rng.uniform(0.0, 2.0 * np.pi, size=max(2 * (n - got), 256))
            u = rng.uniform(0.0, 1.0, size=len(cand))
            speed = np.linalg.norm(geometry.boundary_tangent(geom, cand), axis=1)
            acc = cand[u * speed_max < speed][: n - got]
            samples.append(acc)
            got += len(acc)
        th = np.concatenate(samples)
    return geometry.boundary_point(geom, th), geometry.boundary_normal(geom, th)


def build_collocation(geom: PolarBoundary, cfg: SamplerConfig,
                      outer: tuple[np.ndarray, np.ndarray] | None = None) -> CollocationSet:
    """Full per-geometry point budget; pass a shared outer set to reuse it."""
    interior = sample_interior(geom, cfg)
    band = sample_band(geom, cfg, retained_count=len(interior))
    if outer is None:
        outer = sample_outer(cfg)
    inner = sample_inner(geom, cfg)
    return CollocationSet(interior=interior, band=band, outer=outer, inner=inner)


# ---------------------------------------------------------------------------
# CSV round trip: columns (kind, x, y, nx, ny)
# ---------------------------------------------------------------------------


def collocation_to_csv(cs: CollocationSet, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "x", "y", "nx", "ny"])
        for kind, pts, nrm in (
            ("interior", cs.interior, None),
            ("band", cs.band, None),
            ("outer", cs.outer[0], cs.outer[1]),
            ("inner", cs.inner[0], cs.inner[1]),
        ):
            for i in range(len(pts)):
                nx, ny = (0.0, 0.0) if nrm is None else (nrm[i, 0], nrm[i, 1])
                w.writerow([kind, repr(float(pts[i, 0])), repr(float(pts[i, 1])),
                            repr(float(nx)), repr(float(ny))])


def collocation_from_csv(path) -> CollocationSet:
    buckets: dict[str, list] = {"interior": [], "band": [], "outer": [], "inner": []}
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if header != ["kind", "x", "y", "nx", "ny"]:
            raise SamplingError(f"unexpected collocation CSV header: {header}")
        for row in rd:
            kind = row[0]
            if kind not in buckets:
                raise SamplingError(f"unknown point kind {kind!r}")
            buckets[kind].append([float(v) for v in row[1:]])
    arr = {k: (np.asarray(v).reshape(-1, 4) if v else np.zeros((0, 4))) for k, v in buckets.items()}
    return CollocationSet(
        interior=arr["interior"][:, :2],
        band=arr["band"][:, :2],
        outer=(arr["outer"][:, :2], arr["outer"][:, 2:]),
        inner=(arr["inner"][:, :2], arr["inner"][:, 2:]),
    )
