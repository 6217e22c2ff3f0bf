"""Embedded bitstream container.

One encoded point cloud is a single byte string that can be cut at any
segment boundary and still decode at the matching quality level.

Byte layout (all integers little-endian)::

    [magic "GSG1" 4B] [version 1B] [bit_depth 1B] [S 1B] [n_levels 1B]
    [group sizes n_levels x 1B]
    [K_i S x 4B]                     per-scale kept-voxel counts, fine to coarse
    [per-channel symbol bounds 2B each, base layer first, channel order]
    [checkpoint hash 8B]
    [octree segment: 4B length + payload]
    [n_levels x (4B length + payload)] latent segments, base -> layer1 -> layer2

`parse_container` accepts a prefix that ends on a segment boundary; segments
beyond the cut are simply absent.  A prefix that ends mid-segment is a
distinct error from a malformed header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAGIC = b"GSG1"
VERSION = 1


class ContainerError(ValueError):
    """Base class for container parse/format failures."""


class ContainerParseError(ContainerError):
    """Malformed header or impossible field values."""


class SegmentBoundaryError(ContainerError):
    """Payload ends in the middle of a segment (bad truncation point)."""


class LevelOutOfRangeError(ContainerError):
    """Requested decode level is not available."""


@dataclass(frozen=True)
class ContainerHeader:
    bit_depth: int
    group_sizes: tuple            # flat, base layer first
    k_counts: tuple               # K_0 (finest) .. K_{S-1} (coarsest)
    bounds: tuple                 # per channel, same order as group_sizes
    checkpoint_hash: bytes

    def __post_init__(self) -> None:
        if not 1 <= self.bit_depth <= 16:
            raise ContainerParseError(f"bit depth {self.bit_depth} outside [1, 16]")
        if not self.group_sizes:
            raise ContainerParseError("need at least one channel group")
        if any(not 1 <= g <= 255 for g in self.group_sizes):
            raise ContainerParseError("group sizes must be in [1, 255]")
        if any(k < 0 or k > 0xFFFFFFFF for k in self.k_counts):
            raise ContainerParseError("point counts must fit in 4 bytes")
        if len(self.bounds) != sum(self.group_sizes):
            raise ContainerParseError("need one symbol bound per latent channel")
        if any(not 0 <= b <= 0xFFFF for b in self.bounds):
            raise ContainerParseError("symbol bounds must fit in 2 bytes")
        if len(self.checkpoint_hash) != 8:
            raise ContainerParseError("checkpoint hash must be 8 bytes")

    @property
    def n_levels(self) -> int:
        return len(self.group_sizes)


@dataclass
class BitstreamContainer:
    header: ContainerHeader
    octree: bytes
    segments: list = field(default_factory=list)

    @property
    def n_levels(self) -> int:
        return self.header.n_levels


def serialize_container(container: BitstreamContainer) -> bytes:
    h = container.header
    if len(container.segments) > h.n_levels:
        raise ContainerError("more segments than declared levels")
    parts = [
        MAGIC,
        struct.pack("<BBBB", VERSION, h.bit_depth, len(h.k_counts), h.n_levels),
        bytes(h.group_sizes),
        struct.pack(f"<{len(h.k_counts)}I", *h.k_counts),
        struct.pack(f"<{len(h.bounds)}H", *h.bounds),
        h.checkpoint_hash,
        struct.pack("<I", len(container.octree)),
        container.octree,
    ]
    for seg in container.segments:
        parts.append(struct.pack("<I", len(seg)))
        parts.append(seg)
    return b"".join(parts)


def parse_container(data: bytes) -> BitstreamContainer:
    if len(data) < 8:
        raise ContainerParseError("container shorter than fixed header")
    if data[:4] != MAGIC:
        raise ContainerParseError(f"bad magic {data[:4]!r}")
    version, bit_depth, n_scales, n_levels = struct.unpack_from("<BBBB", data, 4)
    if version != VERSION:
        raise ContainerParseError(f"unsupported container version {version}")
    if n_levels < 1:
        raise ContainerParseError("container declares zero levels")
    pos = 8
    need = n_levels + 4 * n_scales
    if len(data) < pos + need:
        raise ContainerParseError("header truncated before group table")
    group_sizes = tuple(data[pos:pos + n_levels])
    pos += n_levels
    k_counts = struct.unpack_from(f"<{n_scales}I", data, pos)
    pos += 4 * n_scales
    n_channels = sum(group_sizes)
    if len(data) < pos + 2 * n_channels + 8:
        raise ContainerParseError("header truncated before symbol bounds")
    bounds = struct.unpack_from(f"<{n_channels}H", data, pos)
    pos += 2 * n_channels
    checkpoint_hash = data[pos:pos + 8]
    pos += 8
    try:
        header = ContainerHeader(bit_depth, group_sizes, k_counts, bounds,
                                 checkpoint_hash)
    except ContainerError:
        raise
    octree, pos = _read_segment(data, pos, "octree")
    segments = []
    while pos < len(data) and len(segments) < n_levels:
        seg, pos = _read_segment(data, pos, f"latent {len(segments) + 1}")
        segments.append(seg)
    if pos != len(data):
        raise ContainerParseError("trailing bytes after final declared segment")
    return BitstreamContainer(header, octree, segments)


def _read_segment(data: bytes, pos: int, what: str):
    if len(data) < pos + 4:
        raise SegmentBoundaryError(f"{what} segment length prefix cut off")
    (length,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + length:
        raise SegmentBoundaryError(
            f"{what} segment payload cut off ({len(data) - pos} of {length} bytes)")
    return data[pos:pos + length], pos + length


def truncate_container(container: BitstreamContainer, level: int) -> BitstreamContainer:
    """Keep the octree plus the first `level` latent segments; header unchanged."""
    if level < 1:
        raise LevelOutOfRangeError("at least one channel group must be kept")
    if level > len(container.segments):
        raise LevelOutOfRangeError(
            f"level {level} requested but only {len(container.segments)} segments present")
    return BitstreamContainer(container.header, container.octree,
                              list(container.segments[:level]))
