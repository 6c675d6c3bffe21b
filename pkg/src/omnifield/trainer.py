"""Optimization loop binding rendering, hierarchy lookup, losses, and updates.

One image per iteration, round-robin, so patch ids inside a batch always refer
to a single image's representation. The surface backend trains features only
(geometry and colors come from the scene); the voxel backend co-trains
density, features, and colors through the volume renderer with the color and
opacity terms added.

Defaults are desk-scale; paper_scale() returns the original large-run
configuration for completeness.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field, fields, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .field import (
    SurfaceField,
    VoxelField,
    backprop_rays,
    composite_rays,
    save_field,
)
from .synthdata import SceneDataset


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; a diagnostic checkpoint was written if possible."""


@dataclass
class TrainConfig:
    iterations: int = 2000
    rays_per_batch: int = 2048
    lr_start: float = 1e-2
    lr_end: float = 3e-4
    schedule: str = "cosine"          # cosine | constant
    lam: float = 0.5                  # per-level decay of the hierarchical loss
    feature_dim: int = 16
    w1: float = 1.0                   # hierarchical term weight
    w2: float = 1.0                   # norm term weight
    w3: float = 1e-3                  # opacity term weight (voxel only)
    backend: str = "surface"          # surface | voxel
    seed: int = 0
    # explicit per-point fields need a wider temperature floor than implicit
    # ones: the equilibrium cosine margin between a cluster and a pulled
    # neighbor scales with phi, and 0.05 is below the separability noise floor
    phi_min: float = 0.25
    point_knn: int = 8
    voxel_resolution: int = 48
    samples_per_ray: int = 48
    checkpoint_every: int = 0         # 0 disables periodic checkpoints
    log_every: int = 1

    def __post_init__(self):
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.backend not in ("surface", "voxel"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")

    @classmethod
    def paper_scale(cls) -> "TrainConfig":
        """The full-scale configuration: 50k iterations of 8192 rays,
        weights (5e-4, 5e2, 1e-3), cosine 1e-2 -> 3e-4, D = 16."""
        return cls(iterations=50000, rays_per_batch=8192, w1=5e-4, w2=5e2, w3=1e-3)

    def to_file(self, path):
        Path(path).write_text(
            "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self)) + "\n"
        )

    @classmethod
    def from_file(cls, path, **overrides):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"unknown config key: {key}")
            ftype = str(known[key].type)
            if "int" in ftype:
                kwargs[key] = int(val)
            elif "float" in ftype:
                kwargs[key] = float(val)
            else:
                kwargs[key] = val
        kwargs.update(overrides)
        return cls(**kwargs)


def lr_at(step: int, config: TrainConfig) -> float:
    """Cosine annealing from lr_start to lr_end over the configured iterations."""
    if config.schedule == "constant":
        return config.lr_start
    frac = min(max(step / config.iterations, 0.0), 1.0)
    return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    """Adam moment buffers per named parameter tensor."""

    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              betas=(0.9, 0.999), eps=1e-8) -> None:
    """In-place Adam update with bias correction."""
    state.step += 1
    b1, b2 = betas
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def sample_batch(dataset: SceneDataset, view: int, rays_per_batch: int, rng):
    """Uniform pixel sample over the view's non-null patch region.

    Returns (pixels (n, 2) as x,y, patch_ids (n,)), or None when the view has
    no patch evidence at all (warned and skipped by the caller).
    """
    patch_map = dataset.hierrep(view).partition.patch_index_map
    valid = np.flatnonzero(patch_map.ravel() >= 0)
    if valid.size == 0:
        warnings.warn(f"view {view} has no patch evidence; skipping")
        return None
    pick = rng.choice(valid, size=rays_per_batch, replace=True)
    ys, xs = np.divmod(pick, patch_map.shape[1])
    return np.stack([xs, ys], axis=1), patch_map.ravel()[pick]


def train_scene(dataset: SceneDataset, config: TrainConfig, *, out_dir=None, quiet=True):
    """Run the full optimization; returns (field, log_lines).

    The loss log is one text line per logged step (see losses.LOG_COLUMNS) and
    is also written to <out_dir>/loss_log.txt when out_dir is given.
    """
    rng = np.random.default_rng(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if config.backend == "surface":
        field = SurfaceField.build(
            dataset.points, dataset.colors, config.feature_dim,
            knn=config.point_knn, seed=config.seed,
        )
        step_fn = _surface_step
    else:
        field = VoxelField.build(
            config.voxel_resolution, dataset.bounds(), config.feature_dim, seed=config.seed
        )
        step_fn = _voxel_step

    log_lines = [f"# {L.LOG_COLUMNS}"]
    for it in range(config.iterations):
        view = it % dataset.n_views
        batch = sample_batch(dataset, view, config.rays_per_batch, rng)
        if batch is None:
            continue
        lr = lr_at(it, config)
        breakdown = step_fn(dataset, field, config, view, batch, lr, it)
        if not math.isfinite(breakdown.total):
            if out is not None:
                save_field(field, out / "diverged.field")
            raise TrainingDiverged(f"non-finite loss at step {it}: {breakdown.total}")
        if it % config.log_every == 0 or it == config.iterations - 1:
            log_lines.append(breakdown.log_line(it, lr))
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0 and out is not None:
            save_field(field, out / f"step_{it + 1:06d}.field")
        if not quiet and (it % max(config.iterations // 20, 1) == 0 or it == config.iterations - 1):
            print(f"step {it}/{config.iterations} total={breakdown.total:.5f} lr={lr:.5g}", flush=True)

    if out is not None:
        (out / "loss_log.txt").write_text("\n".join(log_lines) + "\n")
    return field, log_lines


def _surface_step(dataset, field, config, view, batch, lr, it):
    pixels, patch_ids = batch
    hit = dataset.hit_index_map(view)
    point_ids = hit[pixels[:, 1], pixels[:, 0]]
    keep = point_ids >= 0  # jittered masks may extend past the rendered footprint
    point_ids = point_ids[keep]
    patch_ids = patch_ids[keep]
    if point_ids.size == 0:
        return L.total_loss(0.0, 0.0, 0.0, 0.0, config.w1, config.w2, config.w3)

    feats = field.features[point_ids]
    cb = L.ClusterBatch.build(feats, patch_ids, phi_min=config.phi_min)
    lh, gh = L.loss_hier(cb, dataset.levels(view), config.lam)
    ln, gn = L.loss_norm(feats)

    sample_grad = config.w1 * gh + config.w2 * gn
    feat_grad = np.zeros_like(field.features)
    np.add.at(feat_grad, point_ids, sample_grad)

    state = _state_of(field, config)
    adam_step({"features": field.features}, {"features": feat_grad}, state, lr)
    field.bump_version()
    return L.total_loss(lh, ln, 0.0, 0.0, config.w1, config.w2, config.w3)


def _voxel_step(dataset, field, config, view, batch, lr, it):
    pixels, patch_ids = batch
    cam = dataset.cameras[view]
    origins, dirs = cam.pixel_rays(pixels)
    rr = composite_rays(
        field, origins, dirs, config.samples_per_ray,
        jitter=True, jitter_seed=config.seed * 1000003 + it,
    )
    gt_rgb = dataset.rgb_image(view)[pixels[:, 1], pixels[:, 0]]

    cb = L.ClusterBatch.build(rr.features, patch_ids, phi_min=config.phi_min)
    lh, gh = L.loss_hier(cb, dataset.levels(view), config.lam)
    ln, gn = L.loss_norm(rr.features)
    lc, gc = L.loss_color(rr.colors, gt_rgb)
    lo, go = L.loss_opacity(rr.opacity)

    grads = backprop_rays(
        field, rr.cache,
        d_colors=gc,
        d_features=config.w1 * gh + config.w2 * gn,
        d_opacity=config.w3 * go,
    )
    state = _state_of(field, config)
    adam_step(
        {"density_raw": field.density_raw, "features": field.features, "colors": field.colors},
        {"density_raw": grads.density_raw, "features": grads.features, "colors": grads.colors},
        state, lr,
    )
    field.bump_version()
    return L.total_loss(lh, ln, lc, lo, config.w1, config.w2, config.w3)


def _state_of(field, config) -> OptimizerState:
    # optimizer state rides on the field instance so step functions stay free
    # of loop-level bookkeeping
    state = getattr(field, "_opt_state", None)
    if state is None:
        state = OptimizerState()
        field._opt_state = state
    return state
