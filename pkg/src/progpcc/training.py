"""Rate-distortion training with random decode-level sampling.

Every optimizer step draws one decode level L, shared by the whole
(gradient-accumulated) batch.  The rate term covers only the channel groups
a level-L decoder would read; undecoded groups are zeroed on the synthesis
path and receive no gradient.  Distortion is the sum of the per-scale
occupancy BCEs, measured on the full pre-prune candidate sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .checkpoint import save_checkpoint
from .codec import (
    _synthesis_stage,
    analyze,
    enhancement_latent,
    membership_labels,
    prune_topk,
    residual_fuse,
)
from .entropy import estimate_rate_bpp, quantize
from .geometry import PointCloud, VoxelSet, voxelize
from .model import CodecModel
from .nn import AdamState, adam_step, bce_occupancy, clip_gradients, cosine_lr
from .sparse import SparseTensor

DIVERGENCE_LIMIT = 1e4
LOG_COLUMNS = ("step", "level", "rate_bpp", "distortion", "loss", "lr")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite or exceeded the divergence limit."""


def sample_decode_level(rng: np.random.Generator, n_levels: int,
                        weights=None) -> int:
    """Uniform over {1..n_levels}, or weighted when a weight vector is given."""
    if weights is None:
        return int(rng.integers(1, n_levels + 1))
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != n_levels or (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative with one entry per level")
    return int(rng.choice(np.arange(1, n_levels + 1), p=w / w.sum()))


def rd_loss(model: CodecModel, coords: np.ndarray, level: int,
            rng: np.random.Generator, tape: Optional[Tape] = None,
            lam: Optional[float] = None) -> dict:
    """Differentiable rate + lambda(level) * distortion for one cloud.

    Returns {"loss", "rate_bpp", "distortion", "tape"}; the first three are
    tracked variables sharing the tape.
    """
    cfg = model.config
    if not 1 <= level <= cfg.n_levels:
        raise ValueError(f"level {level} outside [1, {cfg.n_levels}]")
    tape = tape if tape is not None else Tape()
    n_in = len(coords)
    ar = analyze(model, coords, tape)
    g0, g1, g2 = ar.scales

    def group_rate(layer: int, z) -> object:
        # one slice per channel group, summed: the total is additive by
        # construction, matching per-segment accounting
        decoded = cfg.groups.channels_at(level, layer)
        lik = model.densities[layer].likelihood(z, tape)
        total = None
        edge = 0
        for g in cfg.groups.groups[layer]:
            if edge >= decoded:
                break
            bpp = estimate_rate_bpp(ad.slice_cols(lik, edge, edge + g), n_in)
            total = bpp if total is None else total + bpp
            edge += g
        return total

    def mask_decoded(z, layer: int):
        m = np.zeros(cfg.latent_channels[layer])
        m[:cfg.groups.channels_at(level, layer)] = 1.0
        return ad.mul(z, m)

    z0 = quantize(ar.bottleneck.features, "noise", rng)
    rate = group_rate(0, z0)
    t2 = SparseTensor(ar.bottleneck.coords, mask_decoded(z0, 0), 8, validate=False)
    h2, logit2 = _synthesis_stage(model, t2, 2, tape)
    bce2 = bce_occupancy(ad.sigmoid(logit2), membership_labels(h2.coords, g2))
    kept2 = prune_topk(h2, logit2, len(g2))

    cur = kept2
    if cfg.groups.channels_at(level, 1) > 0:
        y1 = enhancement_latent(model, 1, ar.enc_feats[1], kept2, tape)
        z1 = quantize(y1.features, "noise", rng)
        rate = rate + group_rate(1, z1)
        cur = residual_fuse(model, 1, kept2,
                            SparseTensor(kept2.coords, mask_decoded(z1, 1), 4,
                                         validate=False), tape)
    h1, logit1 = _synthesis_stage(model, cur, 1, tape)
    bce1 = bce_occupancy(ad.sigmoid(logit1), membership_labels(h1.coords, g1))
    kept1 = prune_topk(h1, logit1, len(g1))

    cur = kept1
    if cfg.groups.channels_at(level, 2) > 0:
        y2 = enhancement_latent(model, 2, ar.enc_feats[0], kept1, tape)
        z2 = quantize(y2.features, "noise", rng)
        rate = rate + group_rate(2, z2)
        cur = residual_fuse(model, 2, kept1,
                            SparseTensor(kept1.coords, mask_decoded(z2, 2), 2,
                                         validate=False), tape)
    h0, logit0 = _synthesis_stage(model, cur, 0, tape)
    bce0 = bce_occupancy(ad.sigmoid(logit0), membership_labels(h0.coords, g0))

    distortion = bce2 + bce1 + bce0
    weight = cfg.lambda_at(level) if lam is None else float(lam)
    loss = rate + weight * distortion
    if not np.isfinite(loss.data):
        raise TrainingDivergedError(
            f"non-finite loss at level {level}: rate_bpp={float(rate.data)!r}, "
            f"distortion={float(distortion.data)!r}")
    return {"loss": loss, "rate_bpp": rate, "distortion": distortion, "tape": tape}


# --- synthetic shapes ---------------------------------------------------------


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def _sphere(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius


def _torus(rng, n, radius):
    major, minor = radius, radius / 3.0
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = (n - filled) * 2 + 8
        u = rng.uniform(0.0, 2.0 * math.pi, m)
        v = rng.uniform(0.0, 2.0 * math.pi, m)
        # rejection keeps the sampling uniform in surface area
        accept = rng.uniform(0.0, 1.0, m) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[accept], v[accept]
        take = min(len(u), n - filled)
        ring = major + minor * np.cos(v[:take])
        out[filled:filled + take] = np.column_stack(
            [ring * np.cos(u[:take]), ring * np.sin(u[:take]),
             minor * np.sin(v[:take])])
        filled += take
    return out


def _box(rng, n, radius):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-radius, radius, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        rows = axis == a
        others = [i for i in range(3) if i != a]
        pts[rows, a] = sign[rows] * radius
        pts[np.ix_(rows, others)] = uv[rows]
    return pts


def gen_synthetic_cloud(shape: str, n_points: int, bit_depth: int,
                        rng: np.random.Generator,
                        radius: Optional[float] = None) -> VoxelSet:
    """Randomly rotated surface samples of an analytic shape, voxelized."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    size = 2 ** bit_depth
    center = (size - 1) / 2.0
    r = float(radius) if radius is not None else 0.38 * size
    if shape == "sphere":
        pts = _sphere(rng, n_points, r)
    elif shape == "torus":
        pts = _torus(rng, n_points, r)
    elif shape == "box":
        pts = _box(rng, n_points, r * 0.75)
    elif shape == "union":
        half = n_points // 2
        pts = np.vstack([_sphere(rng, max(half, 1), r * 0.9),
                         _box(rng, max(n_points - half, 1), r * 0.55)])[:n_points]
    else:
        raise ValueError(f"unknown shape {shape!r}")
    pts = pts @ _random_rotation(rng).T + center
    pts = np.clip(pts, 0.0, size - 1.0)
    vox, _ = voxelize(PointCloud(pts), bit_depth, normalize=False)
    return vox


# --- training loop ------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 4
    n_clouds: int = 200
    points_per_cloud: int = 2000
    bit_depth: int = 6
    shapes: tuple = ("sphere", "torus", "box", "union")
    lr_start: float = 8e-4
    lr_end: float = 2e-5
    clip_norm: float = 5.0
    weight_decay: float = 1e-4
    seed: int = 0
    level_weights: Optional[tuple] = None
    log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    checkpoint_every: int = 0  # 0: only at the end


@dataclass
class TrainResult:
    rows: list
    steps: int
    optimizer: AdamState
    log_text: str


def format_log(rows) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(",".join([
            str(row["step"]), str(row["level"]),
            repr(row["rate_bpp"]), repr(row["distortion"]),
            repr(row["loss"]), repr(row["lr"]),
        ]))
    return "\n".join(lines) + "\n"


def make_dataset(config: TrainConfig, rng: np.random.Generator) -> list:
    clouds = []
    for i in range(config.n_clouds):
        shape = config.shapes[i % len(config.shapes)]
        clouds.append(gen_synthetic_cloud(
            shape, config.points_per_cloud, config.bit_depth, rng))
    return clouds


def train(config: TrainConfig, model: CodecModel,
          dataset: Optional[list] = None) -> TrainResult:
    """Optimize the model in place; returns the metrics log rows."""
    rng = np.random.default_rng(config.seed)
    clouds = dataset if dataset is not None else make_dataset(config, rng)
    if not clouds:
        raise ValueError("training needs at least one cloud")
    params = model.params()
    opt = AdamState()
    n_levels = model.config.n_levels

    chunks_per_epoch = max(1, math.ceil(len(clouds) / config.batch_size))
    total_steps = config.epochs * chunks_per_epoch
    rows = []
    step = 0
    for _ in range(config.epochs):
        perm = rng.permutation(len(clouds))
        for c0 in range(0, len(clouds), config.batch_size):
            batch = perm[c0:c0 + config.batch_size]
            level = sample_decode_level(rng, n_levels, config.level_weights)
            acc = None
            mean = {"loss": 0.0, "rate_bpp": 0.0, "distortion": 0.0}
            for ci in batch:
                out = rd_loss(model, clouds[ci].coords, level, rng)
                grads = backward(out["tape"], out["loss"], params)
                if acc is None:
                    acc = grads
                else:
                    for name in acc:
                        acc[name] += grads[name]
                for key in mean:
                    mean[key] += float(out[key].data) / len(batch)
            grads = {name: g / len(batch) for name, g in acc.items()}
            grads, _ = clip_gradients(grads, config.clip_norm)
            lr = cosine_lr(step, total_steps, config.lr_start, config.lr_end)
            adam_step(params, grads, opt, lr, weight_decay=config.weight_decay)
            step += 1
            rows.append({"step": step, "level": level, "lr": lr, **mean})
            if not math.isfinite(mean["loss"]) or mean["loss"] > DIVERGENCE_LIMIT:
                raise TrainingDivergedError(
                    f"step {step}: loss {mean['loss']!r} "
                    f"(rate_bpp={mean['rate_bpp']!r}, distortion={mean['distortion']!r})")
            if (config.checkpoint_path and config.checkpoint_every
                    and step % config.checkpoint_every == 0):
                save_checkpoint(config.checkpoint_path, model, opt)

    log_text = format_log(rows)
    if config.log_path:
        with open(config.log_path, "w", newline="") as fh:
            fh.write(log_text)
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, model, opt)
    return TrainResult(rows, step, opt, log_text)
