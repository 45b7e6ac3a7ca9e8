"""Adam training of the operator network against the physics loss.

Full-batch by default: every geometry's fixed collocation sets enter every
step.  The whole trajectory is a pure function of (seeds, config) in
sequential mode, and checkpoints carry the complete optimizer state so a
resumed run is bitwise identical to an uninterrupted one.

Compute dtype is configurable; float32 roughly quadruples throughput on
typical desktop BLAS while leaving the loss statistics unchanged, so it is
the training default.  Verification paths elsewhere stay float64.
"""

from __future__ import annotations

import contextlib
import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

try:  # optional: small/medium GEMMs here run faster without BLAS threading
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - depends on environment
    threadpool_limits = None

from . import geometry, physics, sampling
from .deeponet import DeepOnetModel, load_checkpoint, save_checkpoint
from .physics import PreparedBatch, WaveParams, loss_and_grad, prepare_batch
from .sampling import SamplerConfig


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    """Loss or gradient went non-finite; training aborted."""


DEFAULT_TRAINING_ANGLES = (-30.0, -10.0, 0.0, 10.0, 30.0)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20_000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 100
    seed: int = 0
    training_angles_deg: tuple[float, ...] = DEFAULT_TRAINING_ANGLES
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dtype: str = "float32"
    chunk_size: int | None = 2048  # point-batch chunking keeps traces cache-resident
    blas_threads: int | None = 1  # None: leave the BLAS pool alone
    checkpoint_every: int = 0  # 0: only final checkpoint
    resample_every: int = 0  # 0: collocation sets fixed for the whole run
    minibatch_fraction: float = 1.0  # < 1: seeded-shuffle minibatches of each point set

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise TrainingError("Adam betas must lie in (0, 1)")
        if self.learning_rate <= 0.0:
            raise TrainingError("learning_rate must be positive")
        if self.log_every < 1:
            raise TrainingError("log_every must be >= 1")
        if not np.all(np.isfinite(self.training_angles_deg)):
            raise TrainingError("training angles must be finite")
        if not (0.0 < self.minibatch_fraction <= 1.0):
            raise TrainingError("minibatch_fraction must lie in (0, 1]")
        if self.resample_every < 0:
            raise TrainingError("resample_every must be >= 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int, dtype=np.float64) -> "AdamState":
        return cls(m=np.zeros(n, dtype=dtype), v=np.zeros(n, dtype=dtype), t=0)


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)
    # each row: (iteration, pde, gamma, gamma_out, total, wall_time_s)

    def append(self, iteration, report: physics.LossReport, wall: float) -> None:
        if self.rows and iteration <= self.rows[-1][0]:
            raise TrainingError("log iterations must be strictly increasing")
        self.rows.append((iteration, report.pde, report.gamma, report.gamma_out, report.total, wall))

    def column(self, name: str) -> np.ndarray:
        idx = ["iteration", "pde", "gamma", "gamma_out", "total", "wall_time_s"].index(name)
        return np.array([r[idx] for r in self.rows])


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; mutates params and state in place."""
    if params.shape != grad.shape:
        raise TrainingError(f"shape mismatch: params {params.shape} vs grad {grad.shape}")
    n_bad = int(np.size(grad) - np.isfinite(grad).sum())
    if n_bad:
        raise NonFiniteLossError(f"{n_bad} non-finite gradient entries at t={state.t + 1}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    mhat = state.m / (1.0 - b1**state.t)
    vhat = state.v / (1.0 - b2**state.t)
    params -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
    return params, state


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def geometry_seed(base_seed: int, index: int) -> int:
    """Per-geometry sampler seed; the shared outer set uses base_seed itself."""
    return (base_seed + 1 + index) & 0xFFFFFFFFFFFFFFFF


def build_training_geometries(geoms, sampler_cfg: SamplerConfig, probes=None):
    """Collocation sets and encodings for a list of geometries.

    The outer boundary set is sampled once and shared; interior/band/inner
    sets use per-geometry derived seeds.
    """
    outer = sampling.sample_outer(sampler_cfg)
    out = []
    for i, geom in enumerate(geoms):
        cfg_i = sampler_cfg.with_seed(geometry_seed(sampler_cfg.seed, i))
        colloc = sampling.build_collocation(geom, cfg_i, outer=outer)
        pr = probes if probes is not None else geometry.ring_probes(geom.center)
        enc = geometry.probe_encoding(geom, pr)
        out.append(physics.TrainingGeometry(geom=geom, encoding=enc, colloc=colloc))
    return out


def _chunk_batch(pb: PreparedBatch, chunk: int) -> list[PreparedBatch]:
    """Split one batch into fixed-size row chunks to bound the trace memory.

    Chunk boundaries never cross geometry segments, so the merge segments
    stay trivial; summation order is fixed by construction.
    """

    def split(segments):
        out = []
        for gidx, lo, hi in segments:
            for c in range(lo, hi, chunk):
                out.append((gidx, c, min(c + chunk, hi)))
        return out

    parts = []
    for gidx, lo, hi in split(pb.pde_segments):
        parts.append(("pde", gidx, lo, hi))
    for gidx, lo, hi in split(pb.inner_segments):
        parts.append(("inner", gidx, lo, hi))
    for gidx, lo, hi in split(pb.outer_segments):
        parts.append(("outer", gidx, lo, hi))
    chunks = []
    e = np.zeros((3, 0, 5), dtype=pb.pde_pack.dtype)
    e4 = np.zeros((4, 0, 5), dtype=pb.pde_pack.dtype)
    z2 = np.zeros((0, 2), dtype=pb.pde_pack.dtype)
    z1 = np.zeros(0, dtype=pb.pde_pack.dtype)
    for kind, gidx, lo, hi in parts:
        n = hi - lo
        chunks.append(
            PreparedBatch(
                encodings=pb.encodings,
                pde_pack=pb.pde_pack[:, lo:hi] if kind == "pde" else e4,
                pde_segments=[(gidx, 0, n)] if kind == "pde" else [],
                inner_pack=pb.inner_pack[:, lo:hi] if kind == "inner" else e,
                inner_segments=[(gidx, 0, n)] if kind == "inner" else [],
                inner_normals=pb.inner_normals[lo:hi] if kind == "inner" else z2,
                inner_inc_re=pb.inner_inc_re[lo:hi] if kind == "inner" else z1,
                inner_inc_im=pb.inner_inc_im[lo:hi] if kind == "inner" else z1,
                outer_pack=pb.outer_pack[:, lo:hi] if kind == "outer" else e,
                outer_segments=[(gidx, 0, n)] if kind == "outer" else [],
                outer_normals=pb.outer_normals[lo:hi] if kind == "outer" else z2,
            )
        )
    return chunks


def prepare_all(model: DeepOnetModel, tgeoms, wp: WaveParams, cfg: TrainConfig):
    dtype = np.dtype(cfg.dtype)
    pb = prepare_batch(tgeoms, wp, model.spatial_mode, dtype)
    return _chunk_batch(pb, cfg.chunk_size) if cfg.chunk_size else [pb]


def _window_batch(pb: PreparedBatch, perms: dict, window: int, fraction: float) -> PreparedBatch:
    """One minibatch: the window-th slice of each geometry's permuted rows."""

    def pick(segments, perm):
        idx = []
        segs = []
        at = 0
        for gidx, lo, hi in segments:
            m = int(np.ceil((hi - lo) * fraction))
            take = perm[lo:hi][window * m : (window + 1) * m]
            if len(take) == 0:  # wrap: reuse the leading slice so no batch is empty
                take = perm[lo:hi][:m]
            idx.append(take)
            segs.append((gidx, at, at + len(take)))
            at += len(take)
        return (np.concatenate(idx) if idx else np.zeros(0, int)), segs

    i_pde, s_pde = pick(pb.pde_segments, perms["pde"])
    i_in, s_in = pick(pb.inner_segments, perms["inner"])
    i_out, s_out = pick(pb.outer_segments, perms["outer"])
    return PreparedBatch(
        encodings=pb.encodings,
        pde_pack=pb.pde_pack[:, i_pde],
        pde_segments=s_pde,
        inner_pack=pb.inner_pack[:, i_in],
        inner_segments=s_in,
        inner_normals=pb.inner_normals[i_in],
        inner_inc_re=pb.inner_inc_re[i_in],
        inner_inc_im=pb.inner_inc_im[i_in],
        outer_pack=pb.outer_pack[:, i_out],
        outer_segments=s_out,
        outer_normals=pb.outer_normals[i_out],
    )


class BatchProvider:
    """Prepared batches per iteration: fixed sets by default, with optional
    periodic resampling and seeded-shuffle minibatching.

    All state is a pure function of the iteration number, so a resumed run
    sees exactly the batches an uninterrupted one would.
    """

    def __init__(self, model, geoms, wp, sampler_cfg: SamplerConfig, cfg: TrainConfig,
                 probes=None):
        self.model = model
        self.geoms = geoms
        self.wp = wp
        self.sampler_cfg = sampler_cfg
        self.cfg = cfg
        self.probes = probes
        self._resample_epoch = None
        self._full: PreparedBatch | None = None
        self._shuffle_epoch = None
        self._perms = None
        if cfg.minibatch_fraction < 1.0:
            self.windows_per_epoch = int(np.ceil(1.0 / cfg.minibatch_fraction))
        else:
            self.windows_per_epoch = 1
        self._chunk_cache: tuple[int, list] | None = None

    def _ensure_full(self, iteration: int):
        epoch = 0 if not self.cfg.resample_every else max(iteration - 1, 0) // self.cfg.resample_every
        if epoch == self._resample_epoch:
            return
        seed = (self.sampler_cfg.seed + 1_000_003 * epoch) & 0xFFFFFFFFFFFFFFFF
        scfg = self.sampler_cfg.with_seed(seed)
        tgeoms = build_training_geometries(self.geoms, scfg, self.probes)
        self._full = prepare_batch(tgeoms, self.wp, self.model.spatial_mode,
                                   np.dtype(self.cfg.dtype))
        self._resample_epoch = epoch
        self._shuffle_epoch = None
        self._chunk_cache = None

    def _segment_permutation(self, rng, segments, n):
        perm = np.arange(n)
        for _gidx, lo, hi in segments:
            perm[lo:hi] = lo + rng.permutation(hi - lo)
        return perm

    def batches(self, iteration: int) -> list[PreparedBatch]:
        self._ensure_full(iteration)
        pb = self._full
        if self.cfg.minibatch_fraction >= 1.0:
            if self._chunk_cache is None:
                chunks = _chunk_batch(pb, self.cfg.chunk_size) if self.cfg.chunk_size else [pb]
                self._chunk_cache = (0, chunks)
            return self._chunk_cache[1]
        step = max(iteration - 1, 0)
        epoch, window = divmod(step, self.windows_per_epoch)
        if epoch != self._shuffle_epoch:
            key = np.array(
                [np.uint64((self.cfg.seed + 77_777 * epoch) & 0xFFFFFFFFFFFFFFFF),
                 np.uint64(20)], dtype=np.uint64)
            rng = np.random.Generator(np.random.Philox(key=key))
            self._perms = {
                "pde": self._segment_permutation(rng, pb.pde_segments, pb.pde_pack.shape[1]),
                "inner": self._segment_permutation(rng, pb.inner_segments, pb.inner_pack.shape[1]),
                "outer": self._segment_permutation(rng, pb.outer_segments, pb.outer_pack.shape[1]),
            }
            self._shuffle_epoch = epoch
        wb = _window_batch(pb, self._perms, window, self.cfg.minibatch_fraction)
        return _chunk_batch(wb, self.cfg.chunk_size) if self.cfg.chunk_size else [wb]


def _flat_model(model: DeepOnetModel, dtype) -> tuple[DeepOnetModel, np.ndarray]:
    """Model whose parameter arrays are views into one flat vector."""
    flat = np.concatenate(
        [model.branch_params, model.trunk_params, model.output_bias]
    ).astype(dtype)
    nb, nt = model.branch_params.size, model.trunk_params.size
    m = DeepOnetModel(
        branch_spec=model.branch_spec,
        branch_params=flat[:nb],
        trunk_spec=model.trunk_spec,
        trunk_params=flat[nb : nb + nt],
        output_bias=flat[nb + nt :],
        latent=model.latent,
        spatial_mode=model.spatial_mode,
        init_seed=model.init_seed,
    )
    return m, flat


def _thread_limits(cfg: TrainConfig):
    if cfg.blas_threads is not None and threadpool_limits is not None:
        return threadpool_limits(limits=cfg.blas_threads, user_api="blas")
    return contextlib.nullcontext()


def _run_loop(work: DeepOnetModel, flat: np.ndarray, state: AdamState,
              provider: "BatchProvider", wp, cfg: TrainConfig, start_iter: int,
              log: TrainLog, checkpoint_path=None):
    t0 = time.perf_counter()

    def evaluate_only(i):
        report, _ = loss_and_grad(work, provider.batches(i), wp, cfg.loss_weights,
                                  want_grad=False)
        return report

    with _thread_limits(cfg):
        if start_iter == 0:
            log.append(0, evaluate_only(1), 0.0)
        for i in range(start_iter + 1, cfg.iterations + 1):
            report, grads = loss_and_grad(work, provider.batches(i), wp, cfg.loss_weights,
                                          want_grad=True)
            if not np.isfinite(report.total):
                _dump_state(work, state, i - 1, cfg, checkpoint_path)
                raise NonFiniteLossError(
                    f"loss became non-finite at iteration {i} (last finite state saved)"
                )
            g = np.concatenate([grads[0], grads[1], grads[2]]).astype(flat.dtype, copy=False)
            try:
                adam_step(flat, g, state, cfg)
            except NonFiniteLossError:
                _dump_state(work, state, i - 1, cfg, checkpoint_path)
                raise
            if i % cfg.log_every == 0 or i == cfg.iterations:
                log.append(i, evaluate_only(i), time.perf_counter() - t0)
            if checkpoint_path and cfg.checkpoint_every and i % cfg.checkpoint_every == 0:
                _dump_state(work, state, i, cfg, checkpoint_path)
    return work, state


def _sampler_meta(sampler_cfg: SamplerConfig) -> dict:
    return {
        "n_interior_raw": sampler_cfg.n_interior_raw,
        "band_fraction": sampler_cfg.band_fraction,
        "band_width": sampler_cfg.band_width,
        "n_outer": sampler_cfg.n_outer,
        "n_inner_per_geometry": sampler_cfg.n_inner_per_geometry,
        "seed": sampler_cfg.seed,
    }


def _dump_state(model, state: AdamState, iteration: int, cfg: TrainConfig, path,
                sampler_meta=None):
    if path is None:
        return
    save_checkpoint(
        model,
        path,
        extra_arrays={
            "adam_m": state.m,
            "adam_v": state.v,
            "adam_scalars": np.array([float(state.t), float(iteration)]),
        },
        extra_meta={"train_dtype": cfg.dtype, "sampler": sampler_meta or {}},
    )


def train(model: DeepOnetModel, geoms, wp: WaveParams, sampler_cfg: SamplerConfig,
          cfg: TrainConfig, probes=None, checkpoint_path=None):
    """Optimize the model over the given geometries; returns (model, TrainLog).

    Deterministic given (model, seeds, config).  The returned model is in the
    training dtype; cast with .astype as needed.
    """
    if len(geoms) < 1:
        raise TrainingError("need at least one training geometry")
    work, flat = _flat_model(model, np.dtype(cfg.dtype))
    provider = BatchProvider(work, geoms, wp, sampler_cfg, cfg, probes)
    state = AdamState.zeros(flat.size, dtype=flat.dtype)
    log = TrainLog()
    work, state = _run_loop(work, flat, state, provider, wp, cfg, 0, log, checkpoint_path)
    if checkpoint_path:
        _dump_state(work, state, cfg.iterations, cfg, checkpoint_path, _sampler_meta(sampler_cfg))
    return work, log


def resume(checkpoint_path, geoms, wp: WaveParams, sampler_cfg: SamplerConfig,
           cfg: TrainConfig, probes=None, out_checkpoint_path=None):
    """Continue training from a checkpoint as if never interrupted.

    The checkpoint must carry Adam state; collocation sets are rebuilt from
    (geometries, sampler config), which reproduces the originals whenever the
    budgets and seed are unchanged (a mismatch warns and simply samples anew).
    """
    model, extra, header = load_checkpoint(checkpoint_path)
    if "adam_m" not in extra or "adam_scalars" not in extra:
        raise TrainingError("checkpoint lacks optimizer state; cannot resume")
    meta = (header.get("extra_meta") or {}).get("sampler") or {}
    if meta and meta != _sampler_meta(sampler_cfg):
        warnings.warn(
            "sampler configuration differs from the checkpoint's; sampling new point sets",
            RuntimeWarning,
        )
    dtype = np.dtype(cfg.dtype)
    n_expected = model.branch_params.size + model.trunk_params.size + 2
    if extra["adam_m"].size != n_expected or extra["adam_v"].size != n_expected:
        raise TrainingError("corrupt optimizer state: size mismatch with parameters")
    t, start_iter = (int(v) for v in extra["adam_scalars"])
    if start_iter > cfg.iterations:
        raise TrainingError(
            f"checkpoint is at iteration {start_iter}, beyond requested {cfg.iterations}"
        )
    work, flat = _flat_model(model, dtype)
    provider = BatchProvider(work, geoms, wp, sampler_cfg, cfg, probes)
    state = AdamState(
        m=extra["adam_m"].astype(dtype), v=extra["adam_v"].astype(dtype), t=t
    )
    log = TrainLog()
    work, state = _run_loop(work, flat, state, provider, wp, cfg, start_iter, log,
                            out_checkpoint_path)
    if out_checkpoint_path:
        _dump_state(work, state, cfg.iterations, cfg, out_checkpoint_path,
                    _sampler_meta(sampler_cfg))
    return work, log


# ---------------------------------------------------------------------------
# log CSV output
# ---------------------------------------------------------------------------


def write_loss_csv(log: TrainLog, path) -> None:
    """Deterministic loss curve: identical runs give byte-identical files."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "pde", "gamma", "gamma_out", "total"])
        for it, pde, gam, gout, total, _wall in log.rows:
            w.writerow([it, repr(pde), repr(gam), repr(gout), repr(total)])


def write_timing_csv(log: TrainLog, path) -> None:
    """Wall-clock column, kept separate so the loss CSV stays reproducible."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "wall_time_s"])
        for it, *_rest, wall in log.rows:
            w.writerow([it, f"{wall:.3f}"])
