"""Per-level rate-distortion evaluation of an encoded cloud.

Encodes once, then for every requested level truncates the container, decodes
the prefix, and measures bits-per-point and D1/D2 PSNR against the input
voxels.  Rate accounting is the exact serialized prefix size, header
included; the denominator is the input point count before voxel dedup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .codec import EncodeResult, decode, encode
from .container import serialize_container, truncate_container
from .geometry import (
    VoxelSet,
    compute_d1_psnr,
    compute_d2_psnr,
    estimate_normals,
)
from .model import CodecModel

_NORMAL_NEIGHBORS = 16


@dataclass(frozen=True)
class RdPoint:
    level: int
    bpp: float
    d1_psnr: float
    d2_psnr: Optional[float] = None

    def __post_init__(self) -> None:
        if self.bpp <= 0:
            raise ValueError("bitrate must be positive")
        if self.level < 1:
            raise ValueError("levels start at 1")


@dataclass
class RdCurve:
    """RD points of one asset, ordered by bitrate."""

    points: list

    def __post_init__(self) -> None:
        self.points = sorted(self.points, key=lambda p: p.bpp)

    def __iter__(self):
        return iter(self.points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class EvalReport:
    curve: RdCurve
    errors: dict = field(default_factory=dict)  # level -> error message
    encode_result: Optional[EncodeResult] = None


def evaluate_levels(model: CodecModel, voxels: VoxelSet,
                    levels=None, n_in: Optional[int] = None,
                    with_d2: bool = True,
                    peak: Optional[float] = None) -> EvalReport:
    """Encode once and measure every requested decode level.

    Per-level codec failures are recorded in the report and do not stop the
    remaining levels.
    """
    result = encode(voxels, model)
    full = result.container
    levels = list(levels) if levels is not None else list(range(1, model.config.n_levels + 1))
    n_in = int(n_in) if n_in is not None else result.n_input
    peak = float(peak) if peak is not None else float(2 ** voxels.bit_depth - 1)
    normals = None
    if with_d2 and len(voxels) >= _NORMAL_NEIGHBORS:
        normals = estimate_normals(voxels, k=_NORMAL_NEIGHBORS)

    points, errors = [], {}
    for level in levels:
        try:
            prefix = truncate_container(full, level)
            recon = decode(prefix, model, level)
            bits = len(serialize_container(prefix)) * 8
            d1 = compute_d1_psnr(voxels, recon, peak)
            d2 = compute_d2_psnr(voxels, recon, normals, peak) if normals is not None else None
            points.append(RdPoint(level, bits / n_in, d1, d2))
        except (ValueError, RuntimeError) as exc:
            errors[level] = str(exc)
    return EvalReport(RdCurve(points), errors, result)


def _fmt(value) -> str:
    if value is None:
        return ""
    if math.isnan(value):
        return "--"
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


def curve_csv(curve: RdCurve) -> str:
    """Per-level table; delta columns appear only with two or more rows.

    Columns: level, bpp, d1_psnr, d2_psnr[, delta_bpp, delta_d1_psnr].
    The first row has no predecessor, marked "--".
    """
    pts = list(curve)
    with_delta = len(pts) > 1
    header = ["level", "bpp", "d1_psnr", "d2_psnr"]
    if with_delta:
        header += ["delta_bpp", "delta_d1_psnr"]
    lines = [",".join(header)]
    for i, pt in enumerate(pts):
        row = [str(pt.level), _fmt(pt.bpp), _fmt(pt.d1_psnr), _fmt(pt.d2_psnr)]
        if with_delta:
            if i == 0:
                row += ["--", "--"]
            else:
                row += [_fmt(pt.bpp - pts[i - 1].bpp),
                        _fmt(pt.d1_psnr - pts[i - 1].d1_psnr)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
