"""End-to-end scalable encoder and decoder.

Analysis downsamples the voxel grid three times (strides 1 -> 2 -> 4 -> 8) and
keeps the two intermediate feature maps for the enhancement latents.  The
bottleneck coordinates travel as an octree; every latent channel group is
range-coded into its own length-prefixed segment, so the stream can be cut
after any group.

The encoder runs the synthesis path itself to build the enhancement latents
on exactly the coordinate sets the decoder will reconstruct.  That works
because segments are ordered base -> layer 1 -> layer 2: whenever a layer-1
group is present, the whole base layer is too, so both sides see identical
inputs, and synthesis is deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .container import (
    BitstreamContainer,
    ContainerHeader,
    ContainerParseError,
    LevelOutOfRangeError,
)
from .entropy import build_cdf, range_decode, range_encode, stream_bits_estimate
from .geometry import VoxelSet
from .model import CodecModel
from .octree import decode_octree, encode_octree
from .sparse import (
    SparseTensor,
    channel_concat,
    generative_upconv,
    lexsorted,
    sparse_conv,
    target_conv,
    _pack,
)

logger = logging.getLogger(__name__)

MIN_BIT_DEPTH = 4  # three downsamplings need at least a 16^3 grid


class ModelStateError(ValueError):
    """Model parameters unusable for coding (non-finite values)."""


class CheckpointMismatchError(ValueError):
    """Container was produced by a different model checkpoint."""


def _relu(t: SparseTensor) -> SparseTensor:
    return SparseTensor(t.coords, ad.relu(t.features), t.stride, validate=False)


@dataclass
class AnalyzeResult:
    scales: list          # occupied coordinate sets G_0, G_1, G_2 (strides 1, 2, 4)
    enc_feats: list       # feature tensors E_0 (stride 2) and E_1 (stride 4)
    bottleneck: SparseTensor  # base latent on C_2 (stride 8)


def analyze(model: CodecModel, coords: np.ndarray,
            tape: Optional[Tape] = None) -> AnalyzeResult:
    """Run the three downsampling blocks and the base latent head."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0:
        raise ValueError("cannot analyze an empty voxel set")
    k = model.kernels
    x = SparseTensor(coords, np.ones((len(coords), 1)), 1)
    h = _relu(sparse_conv(x, k["enc0a"], tape=tape))
    e0 = _relu(sparse_conv(h, k["enc0b"], out_stride=2, tape=tape))
    h = _relu(sparse_conv(e0, k["enc1a"], tape=tape))
    e1 = _relu(sparse_conv(h, k["enc1b"], out_stride=4, tape=tape))
    h = _relu(sparse_conv(e1, k["enc2a"], tape=tape))
    h = _relu(sparse_conv(h, k["enc2b"], out_stride=8, tape=tape))
    y = sparse_conv(h, k["enc_proj"], tape=tape)  # linear latent head
    return AnalyzeResult([coords, e0.coords, e1.coords], [e0, e1], y)


def prune_topk(t: SparseTensor, logits, k: int) -> SparseTensor:
    """Keep the k highest-scoring voxels; ties go to lexicographically smaller coords."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = logits.data if isinstance(logits, Var) else np.asarray(logits)
    scores = scores.reshape(len(t))
    if k >= len(t):
        if k > len(t):
            logger.warning("top-k requested %d of %d voxels; keeping all", k, len(t))
        return t
    # stable sort on descending score keeps coordinate order among ties,
    # and coords are already lexicographically sorted
    order = np.argsort(-scores, kind="stable")
    keep = np.sort(order[:k])
    feats = ad.take_rows(t.features, keep)
    return SparseTensor(t.coords[keep], feats, t.stride, validate=False)


def _synthesis_stage(model: CodecModel, t: SparseTensor, stage: int,
                     tape: Optional[Tape] = None):
    """Generative 2x upsample + conv + linear occupancy head.

    Returns the feature tensor over all candidate children and the aligned
    occupancy logits (one column).
    """
    k = model.kernels
    up = _relu(generative_upconv(t, k[f"up{stage}"], tape=tape))
    h = _relu(sparse_conv(up, k[f"dec{stage}"], tape=tape))
    logits = sparse_conv(h, k[f"cls{stage}"], tape=tape)
    return h, logits.features


def enhancement_latent(model: CodecModel, layer: int, enc_feats: SparseTensor,
                       recon: SparseTensor, tape: Optional[Tape] = None) -> SparseTensor:
    """Project encoder features, aggregated at the reconstructed coordinates,
    together with the reconstruction features, to the layer's latent.

    Linear by construction: a neighborhood aggregation of the encoder tensor
    evaluated on `recon.coords`, channel-concatenated with the reconstruction
    features, then one 1-layer projection.
    """
    if enc_feats.stride != recon.stride:
        raise ValueError(
            f"encoder features (stride {enc_feats.stride}) and reconstruction "
            f"(stride {recon.stride}) must live at the same scale")
    k = model.kernels
    aligned = target_conv(enc_feats, recon.coords, k[f"align{layer}"], tape=tape)
    joined = channel_concat(aligned, recon)
    return sparse_conv(joined, k[f"mix{layer}"], tape=tape)


def residual_fuse(model: CodecModel, layer: int, recon: SparseTensor,
                  latent: SparseTensor, tape: Optional[Tape] = None) -> SparseTensor:
    """Concatenate reconstruction features with a decoded latent and mix once."""
    if recon.stride != latent.stride or not np.array_equal(recon.coords, latent.coords):
        raise ValueError("fusion needs identical coordinate sets and strides")
    joined = channel_concat(recon, latent)
    return sparse_conv(joined, model.kernels[f"fuse{layer}"], tape=tape)


def membership_labels(coords: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """1.0 for rows of `coords` present in `reference` (both lex-sorted), else 0.0."""
    keys = _pack(np.asarray(coords, dtype=np.int64))
    ref = _pack(np.asarray(reference, dtype=np.int64))
    pos = np.searchsorted(ref, keys)
    pos_c = np.minimum(pos, len(ref) - 1) if len(ref) else pos
    hit = (pos < len(ref)) & (ref[pos_c] == keys) if len(ref) else np.zeros(len(keys), bool)
    return hit.astype(np.float64).reshape(-1, 1)


def _build_tables(model: CodecModel, bounds) -> list:
    """One frozen CDF table per latent channel, grouped by layer."""
    tables = []
    offset = 0
    for layer, den in enumerate(model.densities):
        n = model.config.latent_channels[layer]
        per_layer = []
        for ch in range(n):
            b = int(bounds[offset + ch])
            per_layer.append(build_cdf(den.pmf(ch, b), b))
        tables.append(per_layer)
        offset += n
    return tables


def _segment_tables(tables, layer: int, a: int, b: int, rows: int) -> list:
    # channel-major symbol order: all rows of channel a, then a+1, ...
    return [tables[layer][ch] for ch in range(a, b) for _ in range(rows)]


@dataclass
class EncodeResult:
    container: BitstreamContainer
    segment_bits_estimate: list
    n_input: int
    trace: dict  # reconstructed coordinate sets, for conditioning checks


def encode(voxels: VoxelSet, model: CodecModel) -> EncodeResult:
    """Encode a voxel set into one embedded container."""
    model = model.snap_float32()
    if not model.all_finite():
        raise ModelStateError("model parameters contain non-finite values")
    cfg = model.config
    if voxels.bit_depth < MIN_BIT_DEPTH:
        raise ValueError(f"encoding needs bit depth >= {MIN_BIT_DEPTH}")

    coords = lexsorted(np.asarray(voxels.coords, dtype=np.int64).reshape(-1, 3))
    ar = analyze(model, coords)
    g0, g1, g2 = ar.scales
    c2 = ar.bottleneck.coords
    z_base = np.rint(ar.bottleneck.data)

    bounds = []
    for den in model.densities:
        bounds.extend(max(1, int(b)) for b in den.channel_bounds())
    tables = _build_tables(model, bounds)

    # run the synthesis path to obtain the decoder's coordinate sets
    t2 = SparseTensor(c2, z_base, 8, validate=False)
    h2, logit2 = _synthesis_stage(model, t2, 2)
    kept2 = prune_topk(h2, logit2, len(g2))
    y1 = enhancement_latent(model, 1, ar.enc_feats[1], kept2)
    z1 = np.rint(y1.data)
    fused = residual_fuse(model, 1, kept2,
                          SparseTensor(kept2.coords, z1, 4, validate=False))
    h1, logit1 = _synthesis_stage(model, fused, 1)
    kept1 = prune_topk(h1, logit1, len(g1))
    y2 = enhancement_latent(model, 2, ar.enc_feats[0], kept1)
    z2 = np.rint(y2.data)

    zs = [z_base, z1, z2]
    segments, est = [], []
    for layer, a, b in cfg.groups.level_map():
        z = zs[layer]
        sym = z[:, a:b].T.ravel().astype(np.int64)
        tabs = _segment_tables(tables, layer, a, b, len(z))
        segments.append(range_encode(sym, tabs))
        est.append(stream_bits_estimate(sym, tabs))

    header = ContainerHeader(
        bit_depth=voxels.bit_depth,
        group_sizes=tuple(cfg.groups.flat_sizes()),
        k_counts=(len(g0), len(g1), len(g2)),
        bounds=tuple(bounds),
        checkpoint_hash=model.param_hash(),
    )
    octree_seg = encode_octree(c2 // 8, voxels.bit_depth - 3)
    container = BitstreamContainer(header, octree_seg, segments)
    trace = {"c2": c2, "recon1": kept2.coords, "recon0": kept1.coords}
    return EncodeResult(container, est, len(coords), trace)


def decode(container: BitstreamContainer, model: CodecModel, level: int,
           trace: Optional[dict] = None) -> VoxelSet:
    """Reconstruct the voxel set from the first `level` channel groups."""
    model = model.snap_float32()
    if not model.all_finite():
        raise ModelStateError("model parameters contain non-finite values")
    cfg = model.config
    head = container.header
    if not 1 <= level <= cfg.n_levels:
        raise LevelOutOfRangeError(
            f"level {level} outside [1, {cfg.n_levels}]")
    if level > len(container.segments):
        raise LevelOutOfRangeError(
            f"level {level} requested but the container holds only "
            f"{len(container.segments)} segments")
    if tuple(head.group_sizes) != tuple(cfg.groups.flat_sizes()):
        raise CheckpointMismatchError(
            "container channel grouping does not match the model configuration")
    if head.checkpoint_hash != model.param_hash():
        raise CheckpointMismatchError(
            "container was produced by a different model checkpoint")

    cells, depth = decode_octree(container.octree)
    if depth != head.bit_depth - 3:
        raise ContainerParseError(
            f"octree depth {depth} disagrees with bit depth {head.bit_depth}")
    c2 = cells * 8
    k0, k1, k2 = head.k_counts
    tables = _build_tables(model, head.bounds)

    rows = [len(c2), k2, k1]
    zs = [np.zeros((rows[i], cfg.latent_channels[i])) for i in range(3)]
    for idx, (layer, a, b) in enumerate(cfg.groups.level_map()):
        if idx >= level:
            break  # zero-fill everything not transmitted
        tabs = _segment_tables(tables, layer, a, b, rows[layer])
        vals = range_decode(container.segments[idx], tabs)
        zs[layer][:, a:b] = vals.reshape(b - a, rows[layer]).T

    t2 = SparseTensor(c2, zs[0], 8, validate=False)
    h2, logit2 = _synthesis_stage(model, t2, 2)
    kept2 = prune_topk(h2, logit2, k2)
    if trace is not None:
        trace.update({"c2": c2, "recon1": kept2.coords})
    if cfg.groups.groups_in_layer_at(level, 1) > 0:
        cur = residual_fuse(model, 1, kept2,
                            SparseTensor(kept2.coords, zs[1], 4, validate=False))
    else:
        cur = kept2
    h1, logit1 = _synthesis_stage(model, cur, 1)
    kept1 = prune_topk(h1, logit1, k1)
    if trace is not None:
        trace["recon0"] = kept1.coords
    if cfg.groups.groups_in_layer_at(level, 2) > 0:
        cur = residual_fuse(model, 2, kept1,
                            SparseTensor(kept1.coords, zs[2], 2, validate=False))
    else:
        cur = kept1
    h0, logit0 = _synthesis_stage(model, cur, 0)
    kept0 = prune_topk(h0, logit0, k0)
    return VoxelSet(kept0.coords, head.bit_depth)
