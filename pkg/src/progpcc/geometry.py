"""Point cloud geometry: PLY I/O, voxelization, nearest neighbors, distortion metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

_SCALAR_TYPES = {
    "char": "<i1", "int8": "<i1",
    "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}
_FLOAT_TYPES = {"float", "float32", "double", "float64"}


class PlyError(ValueError):
    """Base class for PLY read failures."""


class PlyHeaderError(PlyError):
    """The header is malformed or missing required declarations."""


class PlyPayloadError(PlyError):
    """The payload is truncated or inconsistent with the header."""


class PlyUnsupportedError(PlyError):
    """The file uses a feature this reader does not handle (e.g. big-endian)."""


@dataclass
class PointCloud:
    """Raw points in source units, with optional per-point normals."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals and points must have equal length")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class GridTransform:
    """Affine map from source units into voxel units: v = round((p - offset) * scale)."""

    scale: np.ndarray
    offset: np.ndarray

    def to_world(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) / self.scale + self.offset


@dataclass
class VoxelSet:
    """Deduplicated integer coordinates on a 2^bit_depth grid, lexicographically sorted."""

    coords: np.ndarray
    bit_depth: int

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.coords)


# --- PLY ---------------------------------------------------------------------


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if end < 0:
        raise PlyHeaderError("missing end_header")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyHeaderError("no newline after end_header")
    header = data[:nl].decode("ascii", errors="replace")
    lines = [ln.strip() for ln in header.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("comment") and not ln.startswith("obj_info")]
    if not lines or lines[0] != "ply":
        raise PlyHeaderError("not a PLY file (missing 'ply' magic)")

    fmt = None
    elements = []  # (name, count, [(prop_name, type, list_count_type|None)])
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "format":
            if len(parts) != 3:
                raise PlyHeaderError(f"bad format line: {ln!r}")
            if parts[1] == "ascii":
                fmt = "ascii"
            elif parts[1] == "binary_little_endian":
                fmt = "binary_le"
            elif parts[1] == "binary_big_endian":
                raise PlyUnsupportedError("big-endian PLY is not supported")
            else:
                raise PlyHeaderError(f"unknown format {parts[1]!r}")
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyHeaderError(f"bad element line: {ln!r}")
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyHeaderError(f"bad element count: {ln!r}") from None
            if count < 0:
                raise PlyHeaderError(f"negative element count: {ln!r}")
            elements.append((parts[1], count, []))
        elif parts[0] == "property":
            if not elements:
                raise PlyHeaderError("property before any element")
            if parts[1] == "list":
                if len(parts) != 5:
                    raise PlyHeaderError(f"bad list property: {ln!r}")
                elements[-1][2].append((parts[4], parts[3], parts[2]))
            else:
                if len(parts) != 3:
                    raise PlyHeaderError(f"bad property line: {ln!r}")
                elements[-1][2].append((parts[2], parts[1], None))
        elif parts[0] == "end_header":
            break
        else:
            raise PlyHeaderError(f"unrecognized header line: {ln!r}")
    if fmt is None:
        raise PlyHeaderError("missing format line")
    return fmt, elements, data[nl + 1:]


def _vertex_arrays(rows: dict, count: int):
    for axis in ("x", "y", "z"):
        if axis not in rows:
            raise PlyHeaderError(f"vertex element missing property {axis!r}")
    pts = np.stack([rows["x"], rows["y"], rows["z"]], axis=1).astype(np.float64)
    normals = None
    if all(n in rows for n in ("nx", "ny", "nz")):
        normals = np.stack([rows["nx"], rows["ny"], rows["nz"]], axis=1).astype(np.float64)
    return PointCloud(pts, normals)


def _parse_ascii(elements, payload: bytes) -> PointCloud:
    tokens = payload.split()
    pos = 0

    def take(n: int):
        nonlocal pos
        if pos + n > len(tokens):
            raise PlyPayloadError("truncated ASCII payload")
        out = tokens[pos:pos + n]
        pos += n
        return out

    for name, count, props in elements:
        if name != "vertex":
            # Skip other elements token by token; list properties carry their own count.
            for _ in range(count):
                for _, ptype, list_type in props:
                    if list_type is None:
                        take(1)
                    else:
                        n = int(take(1)[0])
                        take(n)
            continue
        for pname, ptype, list_type in props:
            if list_type is not None:
                raise PlyUnsupportedError("list property on vertex element")
            if pname in ("x", "y", "z") and ptype not in _FLOAT_TYPES:
                raise PlyUnsupportedError(f"vertex {pname} must be float32/float64, got {ptype}")
        raw = take(count * len(props))
        try:
            values = np.array(raw, dtype=np.float64).reshape(count, len(props))
        except ValueError:
            raise PlyPayloadError("non-numeric token in vertex data") from None
        rows = {p[0]: values[:, i] for i, p in enumerate(props)}
        return _vertex_arrays(rows, count)
    raise PlyHeaderError("no vertex element")


def _parse_binary(elements, payload: bytes) -> PointCloud:
    offset = 0
    for name, count, props in elements:
        has_list = any(p[2] is not None for p in props)
        if name != "vertex":
            if not has_list:
                stride = sum(np.dtype(_SCALAR_TYPES[p[1]]).itemsize for p in props)
                offset += stride * count
                if offset > len(payload):
                    raise PlyPayloadError("truncated binary payload")
                continue
            # Variable-size rows: walk them one by one.
            for _ in range(count):
                for _, ptype, list_type in props:
                    if list_type is None:
                        offset += np.dtype(_SCALAR_TYPES[ptype]).itemsize
                    else:
                        ct = np.dtype(_SCALAR_TYPES[list_type])
                        if offset + ct.itemsize > len(payload):
                            raise PlyPayloadError("truncated binary payload")
                        n = int(np.frombuffer(payload, ct, 1, offset)[0])
                        offset += ct.itemsize + n * np.dtype(_SCALAR_TYPES[ptype]).itemsize
                if offset > len(payload):
                    raise PlyPayloadError("truncated binary payload")
            continue
        if has_list:
            raise PlyUnsupportedError("list property on vertex element")
        fields = []
        for pname, ptype, _ in props:
            if ptype not in _SCALAR_TYPES:
                raise PlyUnsupportedError(f"unknown property type {ptype!r}")
            if pname in ("x", "y", "z") and ptype not in _FLOAT_TYPES:
                raise PlyUnsupportedError(f"vertex {pname} must be float32/float64, got {ptype}")
            fields.append((pname, _SCALAR_TYPES[ptype]))
        dt = np.dtype(fields)
        if offset + dt.itemsize * count > len(payload):
            raise PlyPayloadError("truncated binary payload")
        table = np.frombuffer(payload, dt, count, offset)
        rows = {p[0]: table[p[0]] for p in props}
        return _vertex_arrays(rows, count)
    raise PlyHeaderError("no vertex element")


def parse_ply(src) -> PointCloud:
    """Read a point cloud from a PLY file path or raw bytes.

    Supports ascii and binary_little_endian 1.0 with float32/float64 coordinates.
    Unknown per-vertex properties are skipped; nx/ny/nz are kept when present.
    """
    data = src if isinstance(src, (bytes, bytearray)) else Path(src).read_bytes()
    fmt, elements, payload = _parse_header(bytes(data))
    if fmt == "ascii":
        return _parse_ascii(elements, payload)
    return _parse_binary(elements, payload)


def serialize_ply(cloud: PointCloud, binary: bool = False) -> bytes:
    """Encode a point cloud as PLY bytes (ascii doubles or binary_le float32)."""
    n = len(cloud)
    has_n = cloud.normals is not None
    fmt = "binary_little_endian" if binary else "ascii"
    ptype = "float" if binary else "double"
    head = [f"ply\nformat {fmt} 1.0\nelement vertex {n}"]
    for prop in ("x", "y", "z"):
        head.append(f"property {ptype} {prop}")
    if has_n:
        for prop in ("nx", "ny", "nz"):
            head.append(f"property {ptype} {prop}")
    head.append("end_header\n")
    header = "\n".join(head).encode("ascii")
    table = cloud.points if not has_n else np.hstack([cloud.points, cloud.normals])
    if binary:
        return header + table.astype("<f4").tobytes()
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in table)
    return header + body.encode("ascii") + b"\n"


def write_ply(path, cloud: PointCloud, binary: bool = False) -> None:
    Path(path).write_bytes(serialize_ply(cloud, binary))


# --- Voxelization ------------------------------------------------------------


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def voxelize(cloud, bit_depth: int, normalize: bool = True):
    """Quantize a cloud onto a 2^bit_depth cubic grid.

    With normalize=True the bounding box is affinely mapped onto [0, 2^b - 1]
    per axis (degenerate axes keep unit scale). With normalize=False the input
    is only rounded and must already lie inside the grid. Rounding is
    half-away-from-zero; duplicates collapse. Returns (VoxelSet, GridTransform).
    """
    if not 1 <= bit_depth <= 16:
        raise ValueError(f"bit_depth must be in [1, 16], got {bit_depth}")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot voxelize an empty point cloud")
    if not np.isfinite(pts).all():
        raise ValueError("point cloud contains non-finite coordinates")
    top = (1 << bit_depth) - 1
    if normalize:
        lo = pts.min(axis=0)
        extent = pts.max(axis=0) - lo
        scale = np.where(extent > 0, top / np.where(extent > 0, extent, 1.0), 1.0)
        offset = lo
    else:
        scale = np.ones(3)
        offset = np.zeros(3)
    grid = _round_half_away((pts - offset) * scale)
    if not normalize and (grid.min() < 0 or grid.max() > top):
        raise ValueError("points fall outside the grid; pass normalize=True")
    coords = np.unique(np.clip(grid, 0, top).astype(np.int64), axis=0)
    return VoxelSet(coords, bit_depth), GridTransform(scale, offset)


# --- Nearest neighbors on the voxel grid -------------------------------------

_KEY_BITS = 21
_KEY_BIAS = 1 << (_KEY_BITS - 1)
_shell_cache: dict = {}


def _pack(coords: np.ndarray) -> np.ndarray:
    c = coords.astype(np.int64) + _KEY_BIAS
    return (c[..., 0] << (2 * _KEY_BITS)) | (c[..., 1] << _KEY_BITS) | c[..., 2]


def _shell(r: int):
    """Offsets at Chebyshev radius r, sorted by (squared norm, x, y, z)."""
    if r in _shell_cache:
        return _shell_cache[r]
    rng = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    mask = np.abs(grid).max(axis=1) == r
    offs = grid[mask]
    d2 = (offs * offs).sum(axis=1)
    order = np.lexsort((offs[:, 2], offs[:, 1], offs[:, 0], d2))
    out = (offs[order], d2[order])
    _shell_cache[r] = out
    return out


class GridIndex:
    """Uniform-grid spatial hash over unique integer voxels (one cell per voxel)."""

    def __init__(self, coords: np.ndarray):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if len(coords) == 0:
            raise ValueError("cannot index an empty voxel set")
        self.coords = coords
        keys = _pack(coords)
        self._order = np.argsort(keys, kind="stable")
        self._skeys = keys[self._order]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row indices of exact coordinate matches, -1 where absent."""
        keys = _pack(np.asarray(coords, dtype=np.int64))
        pos = np.searchsorted(self._skeys, keys)
        pos = np.minimum(pos, len(self._skeys) - 1)
        hit = self._skeys[pos] == keys
        return np.where(hit, self._order[pos], -1)

    def nearest(self, queries: np.ndarray):
        """Nearest neighbor of each query point.

        Returns (indices, squared distances). Ties resolve deterministically:
        smallest squared distance, then smallest Chebyshev shell, then
        lexicographically smallest offset.
        """
        q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
        m = len(q)
        best_d2 = np.full(m, np.iinfo(np.int64).max, dtype=np.int64)
        best_idx = np.full(m, -1, dtype=np.int64)
        active = np.arange(m)
        r = 0
        while len(active):
            offs, d2 = _shell(r)
            cand = q[active][:, None, :] + offs[None, :, :]
            idx = self.lookup(cand.reshape(-1, 3)).reshape(len(active), -1)
            hit = idx >= 0
            d2m = np.where(hit, d2[None, :], np.iinfo(np.int64).max)
            col = np.argmin(d2m, axis=1)  # first minimum = lex-smallest offset
            rows = np.arange(len(active))
            cand_d2 = d2m[rows, col]
            better = cand_d2 < best_d2[active]
            upd = active[better]
            best_d2[upd] = cand_d2[better]
            best_idx[upd] = idx[rows[better], col[better]]
            r += 1
            active = active[best_d2[active] > r * r]
        return best_idx, best_d2

    def knearest(self, queries: np.ndarray, k: int):
        """Indices of the k nearest voxels per query, nearest first.

        Ordering per query is (squared distance, offset lexicographic).
        """
        if k > len(self.coords):
            raise ValueError(f"k={k} exceeds index size {len(self.coords)}")
        q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
        m = len(q)
        counts = np.zeros(m, dtype=np.int64)
        reach = np.full(m, -1, dtype=np.int64)  # radius at which k hits were seen
        active = np.arange(m)
        r = 0
        while len(active):
            offs, _ = _shell(r)
            cand = q[active][:, None, :] + offs[None, :, :]
            idx = self.lookup(cand.reshape(-1, 3)).reshape(len(active), -1)
            counts[active] += (idx >= 0).sum(axis=1)
            done = counts[active] >= k
            reach[active[done]] = r
            active = active[~done]
            r += 1
        # The kth hit within Chebyshev radius R has d2 <= 3R^2, so rescanning up
        # to ceil(sqrt(3)*R) catches every closer candidate.
        full = np.array([math.isqrt(3 * rr * rr) + 1 for rr in reach], dtype=np.int64)
        hits_q, hits_d2, hits_idx, hits_off = [], [], [], []
        for r in range(int(full.max()) + 1):
            offs, d2 = _shell(r)
            sel = np.nonzero(full >= r)[0]
            if len(sel) == 0:
                continue
            cand = q[sel][:, None, :] + offs[None, :, :]
            idx = self.lookup(cand.reshape(-1, 3)).reshape(len(sel), -1)
            qi, oi = np.nonzero(idx >= 0)
            hits_q.append(sel[qi])
            hits_d2.append(d2[oi])
            hits_idx.append(idx[qi, oi])
            hits_off.append(offs[oi])
        hq = np.concatenate(hits_q)
        hd = np.concatenate(hits_d2)
        hi = np.concatenate(hits_idx)
        ho = np.concatenate(hits_off)
        order = np.lexsort((ho[:, 2], ho[:, 1], ho[:, 0], hd, hq))
        hq, hi = hq[order], hi[order]
        starts = np.searchsorted(hq, np.arange(m))
        pick = starts[:, None] + np.arange(k)[None, :]
        return hi[pick]


# --- Distortion metrics ------------------------------------------------------


def _coords_of(x) -> np.ndarray:
    return x.coords if isinstance(x, VoxelSet) else np.asarray(x, dtype=np.int64).reshape(-1, 3)


def _mean_sq_error(src: np.ndarray, dst: np.ndarray) -> float:
    _, d2 = GridIndex(dst).nearest(src)
    return int(d2.sum()) / len(src)  # integer sum: exact, order independent


def compute_d1_psnr(a, b, peak: float) -> float:
    """Symmetric point-to-point PSNR: 10*log10(3*peak^2 / max of directional MSEs).

    Identical sets produce math.inf.
    """
    ca, cb = _coords_of(a), _coords_of(b)
    if len(ca) == 0 or len(cb) == 0:
        raise ValueError("point-to-point distance needs non-empty sets")
    mse = max(_mean_sq_error(ca, cb), _mean_sq_error(cb, ca))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def compute_d2_psnr(ref, deg, ref_normals: np.ndarray, peak: float) -> float:
    """Symmetric point-to-plane PSNR.

    Each nearest-neighbor error vector is projected onto the normal of the
    reference-cloud point in the pair before squaring; both directions use the
    reference cloud's normals, and the worse mean is kept.
    """
    cr, cd = _coords_of(ref), _coords_of(deg)
    normals = np.asarray(ref_normals, dtype=np.float64).reshape(-1, 3)
    if len(normals) != len(cr):
        raise ValueError("need one normal per reference point")
    if len(cr) == 0 or len(cd) == 0:
        raise ValueError("point-to-plane distance needs non-empty sets")
    idx, _ = GridIndex(cr).nearest(cd)
    err = (cd - cr[idx]).astype(np.float64)
    proj = (err * normals[idx]).sum(axis=1)
    mse_dr = math.fsum((proj * proj).tolist()) / len(cd)
    idx, _ = GridIndex(cd).nearest(cr)
    err = (cd[idx] - cr).astype(np.float64)
    proj = (err * normals).sum(axis=1)
    mse_rd = math.fsum((proj * proj).tolist()) / len(cr)
    mse = max(mse_dr, mse_rd)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def estimate_normals(voxels, k: int = 16) -> np.ndarray:
    """Unit normals from PCA over the k nearest neighbors (self included).

    The normal is the eigenvector of the neighborhood covariance with the
    smallest eigenvalue; its sign is arbitrary.
    """
    coords = _coords_of(voxels)
    if len(coords) < k:
        raise ValueError(f"need at least k={k} points, got {len(coords)}")
    index = GridIndex(coords)
    nbr = index.knearest(coords, k)  # (n, k)
    pts = coords[nbr].astype(np.float64)
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(norms > 0, norms, 1.0)
