"""Sparse voxel tensors and convolutions over integer coordinate sets.

Tensors carry (N,3) integer coordinates at a power-of-two stride plus an
(N,C) feature matrix. Convolutions assemble a kernel map (which input row
feeds which output row for each kernel offset) by exact coordinate lookup,
then reduce with a single einsum. Within one offset the input rows hit are
unique, so backward scatters are plain vectorized adds.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import Param, Tape, Var, concat_cols

_KEY_BITS = 21
_KEY_BIAS = 1 << (_KEY_BITS - 1)


def _pack(coords: np.ndarray) -> np.ndarray:
    c = coords.astype(np.int64) + _KEY_BIAS
    return (c[..., 0] << (2 * _KEY_BITS)) | (c[..., 1] << _KEY_BITS) | c[..., 2]


def lexsorted(coords: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically (x, then y, then z), duplicates removed."""
    return np.unique(np.asarray(coords, dtype=np.int64).reshape(-1, 3), axis=0)


def full_offsets(kernel_size: int = 3) -> np.ndarray:
    """All kernel offsets in lexicographic order, e.g. 27 for a 3^3 kernel."""
    if kernel_size % 2 != 1 or kernel_size < 1:
        raise ValueError("kernel_size must be odd and positive")
    r = kernel_size // 2
    axis = np.arange(-r, r + 1, dtype=np.int64)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


class SparseTensor:
    """Features bound to unique, lexicographically sorted voxel coordinates."""

    def __init__(self, coords: np.ndarray, features, stride: int = 1,
                 validate: bool = True) -> None:
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        self.features = features if isinstance(features, Var) else Var(features)
        self.stride = int(stride)
        if self.features.data.ndim != 2 or len(self.features.data) != len(self.coords):
            raise ValueError("features must be (N, C) aligned with coords")
        if validate:
            if self.stride < 1:
                raise ValueError(f"stride must be >= 1, got {stride}")
            if len(self.coords) and (self.coords % self.stride != 0).any():
                raise ValueError("coordinates must be divisible by the stride")
            keys = _pack(self.coords)
            if len(keys) > 1 and not (np.diff(keys) > 0).all():
                raise ValueError("coordinates must be unique and lexicographically sorted")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def data(self) -> np.ndarray:
        return self.features.data

    @property
    def channels(self) -> int:
        return self.features.data.shape[1]


class KernelWeights:
    """Per-offset weight matrices plus a bias for one sparse convolution."""

    def __init__(self, name: str, c_in: int, c_out: int,
                 offsets: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None) -> None:
        self.name = name
        self.offsets = full_offsets() if offsets is None else np.asarray(offsets, np.int64)
        rng = rng or np.random.default_rng()
        k = len(self.offsets)
        scale = 1.0 / np.sqrt(c_in * k)
        self.weight = Param(f"{name}.weight", rng.uniform(-scale, scale, (k, c_in, c_out)))
        self.bias = Param(f"{name}.bias", np.zeros(c_out))

    @property
    def c_in(self) -> int:
        return self.weight.data.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.data.shape[2]

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


def _kernel_map(src_coords: np.ndarray, dst_coords: np.ndarray,
                offsets: np.ndarray, step: int, sign: int = 1):
    """Index of the source row feeding each (dst, offset) pair, -1 when absent."""
    src_keys = _pack(src_coords)
    nb = dst_coords[:, None, :] + sign * offsets[None, :, :] * step
    keys = _pack(nb)
    pos = np.searchsorted(src_keys, keys)
    pos = np.minimum(pos, max(len(src_keys) - 1, 0))
    hit = src_keys[pos] == keys if len(src_keys) else np.zeros_like(pos, bool)
    return np.where(hit, pos, -1)


def _conv_apply(feats: Var, idx: np.ndarray, kw: KernelWeights,
                tape: Optional[Tape]) -> Var:
    mask = idx >= 0
    w, b = kw.weight.data, kw.bias.data
    gathered = feats.data[np.maximum(idx, 0)] * mask[..., None]
    out_data = np.einsum("mkc,kcd->md", gathered, w, optimize=True) + b
    if tape is None:
        return Var(out_data)
    wleaf, bleaf = tape.leaf(kw.weight), tape.leaf(kw.bias)
    out = Var(out_data, tape, track=True)

    def back(g):
        grad_w = np.einsum("mkc,md->kcd", gathered, g, optimize=True)
        grad_b = g.sum(axis=0)
        grad_in = None
        if feats.track:
            spread = np.einsum("md,kcd->mkc", g, w, optimize=True)
            grad_in = np.zeros_like(feats.data)
            for k in range(idx.shape[1]):
                mk = mask[:, k]
                # neighbor lookup is injective per offset: no duplicate rows
                grad_in[idx[mk, k]] += spread[mk, k]
        return (grad_in, grad_w, grad_b)

    tape.record(out, [feats, wleaf, bleaf], back)
    return out


def sparse_conv(t: SparseTensor, kw: KernelWeights, out_stride: Optional[int] = None,
                tape: Optional[Tape] = None) -> SparseTensor:
    """Convolution at the same stride or with 2x downsampling.

    Output feature at u is bias + sum over offsets d with u + d*stride
    occupied of feature(u + d*stride) @ W_d. Downsampling keeps the unique
    coordinates 2s * floor(c / 2s).
    """
    if kw.c_in != t.channels:
        raise ValueError(f"kernel expects {kw.c_in} channels, tensor has {t.channels}")
    out_stride = t.stride if out_stride is None else int(out_stride)
    if out_stride == t.stride:
        dst = t.coords
    elif out_stride == 2 * t.stride:
        dst = lexsorted((t.coords // out_stride) * out_stride)
    else:
        raise ValueError(f"out_stride must be {t.stride} or {2 * t.stride}, got {out_stride}")
    idx = _kernel_map(t.coords, dst, kw.offsets, t.stride)
    out = _conv_apply(t.features, idx, kw, tape)
    return SparseTensor(dst, out, out_stride, validate=False)


def generative_upconv(t: SparseTensor, kw: KernelWeights,
                      tape: Optional[Tape] = None) -> SparseTensor:
    """Transposed convolution that emits all 2x2x2 children of every parent.

    Output stride is half the input stride; feature at child u accumulates
    feature(u - d * out_stride) @ W_d over parents inside the kernel support.
    """
    if kw.c_in != t.channels:
        raise ValueError(f"kernel expects {kw.c_in} channels, tensor has {t.channels}")
    if t.stride < 2 or t.stride % 2 != 0:
        raise ValueError(f"cannot upsample below stride 1 (input stride {t.stride})")
    half = t.stride // 2
    corners = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"), -1).reshape(-1, 3)
    dst = lexsorted((t.coords[:, None, :] + corners[None] * half).reshape(-1, 3))
    idx = _kernel_map(t.coords, dst, kw.offsets, half, sign=-1)
    out = _conv_apply(t.features, idx, kw, tape)
    return SparseTensor(dst, out, half, validate=False)


def target_conv(t: SparseTensor, targets: np.ndarray, kw: KernelWeights,
                tape: Optional[Tape] = None) -> SparseTensor:
    """Convolution evaluated exactly on caller-chosen coordinates.

    Targets must share the source stride. Targets with no occupied neighbor
    get the bias alone. With targets equal to the source coordinates this
    reduces to sparse_conv at the same stride.
    """
    if kw.c_in != t.channels:
        raise ValueError(f"kernel expects {kw.c_in} channels, tensor has {t.channels}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 3)
    if len(targets) and (targets % t.stride != 0).any():
        raise ValueError("targets must be divisible by the source stride")
    idx = _kernel_map(t.coords, targets, kw.offsets, t.stride)
    out = _conv_apply(t.features, idx, kw, tape)
    return SparseTensor(targets, out, t.stride)


def channel_concat(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    """Concatenate features of two tensors defined on identical coordinates."""
    if a.stride != b.stride or not np.array_equal(a.coords, b.coords):
        raise ValueError("channel_concat needs identical coordinate sets and strides")
    return SparseTensor(a.coords, concat_cols([a.features, b.features]), a.stride,
                        validate=False)
