"""Lossless octree coding of occupied voxel coordinates.

Breadth-first traversal from the root; every visited internal node emits one
occupancy byte whose bits mark which of its eight octants contain points.
Bit index a*4 + b*2 + c counts from the MSB, where (a, b, c) are the x, y, z
coordinate bits at that level (x in the highest position). Only occupied
children are visited, so a zero byte can never legally appear.

Stream layout: [1 byte depth][4 byte LE voxel count][occupancy bytes].
"""

from __future__ import annotations

import struct

import numpy as np


class OctreeDecodeError(ValueError):
    """The octree stream is truncated, padded, or internally inconsistent."""


def encode_octree(coords: np.ndarray, depth: int) -> bytes:
    """Serialize unique voxel coordinates on a 2^depth grid."""
    if not 1 <= depth <= 16:
        raise ValueError(f"depth must be in [1, 16], got {depth}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0:
        raise ValueError("cannot octree-encode an empty voxel set")
    if coords.min() < 0 or coords.max() >= (1 << depth):
        raise ValueError("coordinates fall outside the octree cube")
    if len(np.unique(coords, axis=0)) != len(coords):
        raise ValueError("coordinates must be unique")

    out = bytearray(struct.pack("<BI", depth, len(coords)))
    queue = [coords]
    for level in range(depth):
        shift = depth - 1 - level
        next_queue = []
        for node in queue:
            bits = (node >> shift) & 1
            child = bits[:, 0] * 4 + bits[:, 1] * 2 + bits[:, 2]
            byte = 0
            for idx in range(8):
                sub = node[child == idx]
                if len(sub):
                    byte |= 0x80 >> idx
                    next_queue.append(sub)
            out.append(byte)
        queue = next_queue
    return bytes(out)


def decode_octree(data: bytes):
    """Recover (coords, depth) from an octree stream.

    Coordinates come back in canonical lexicographic order.
    """
    if len(data) < 5:
        raise OctreeDecodeError("stream shorter than its fixed header")
    depth, count = struct.unpack_from("<BI", data, 0)
    if not 1 <= depth <= 16:
        raise OctreeDecodeError(f"invalid depth byte {depth}")
    pos = 5
    queue = [(0, 0, 0)]
    voxels = []
    for level in range(depth):
        next_queue = []
        for ox, oy, oz in queue:
            if pos >= len(data):
                raise OctreeDecodeError("truncated stream: ran out of occupancy bytes")
            byte = data[pos]
            pos += 1
            if byte == 0:
                raise OctreeDecodeError("zero occupancy byte at an internal node")
            for idx in range(8):
                if byte & (0x80 >> idx):
                    child = (ox * 2 + (idx >> 2), oy * 2 + ((idx >> 1) & 1), oz * 2 + (idx & 1))
                    next_queue.append(child)
        queue = next_queue
    if pos != len(data):
        raise OctreeDecodeError("trailing bytes after the last occupancy node")
    if len(queue) != count:
        raise OctreeDecodeError(f"voxel count mismatch: header {count}, decoded {len(queue)}")
    voxels = np.array(queue, dtype=np.int64).reshape(-1, 3)
    order = np.lexsort((voxels[:, 2], voxels[:, 1], voxels[:, 0]))
    return voxels[order], depth
