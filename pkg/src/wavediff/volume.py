"""Triangle meshes, dense volume grids and truncated signed distance sampling."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from wavediff import _bvh

log = logging.getLogger(__name__)

VOL_MAGIC = b"WVOL"
_VOL_HEADER = struct.Struct("<4sIff")


class InvalidInputError(ValueError):
    """Raised for malformed meshes, grids or files."""


class InvalidConfigError(ValueError):
    """Raised for inconsistent configuration values."""


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("mesh vertices must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidInputError("triangle index out of range")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def cleaned(self) -> "TriangleMesh":
        """Drop zero-area and index-repeating triangles."""
        if self.is_empty:
            return self
        f = self.triangles
        distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
        keep = distinct & (self.triangle_areas() > 0.0)
        if keep.all():
            return self
        return TriangleMesh(self.vertices, f[keep])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        used = self.vertices[np.unique(self.triangles)] if not self.is_empty else self.vertices
        return used.min(axis=0), used.max(axis=0)


@dataclass(frozen=True)
class TsdfConfig:
    resolution: int = 64
    extent: float = 0.45
    truncation: float = 0.1

    def __post_init__(self):
        n = self.resolution
        if n < 8 or n & (n - 1):
            raise InvalidConfigError(f"resolution must be a power of two >= 8, got {n}")
        if not 0 < self.truncation <= self.extent:
            raise InvalidConfigError("truncation must satisfy 0 < truncation <= extent")

    @property
    def voxel_size(self) -> float:
        return 2.0 * self.extent / self.resolution


@dataclass(frozen=True)
class VolumeGrid:
    """Cubic scalar field over [-extent, extent]^3, cell-centred samples.

    ``values[i, j, k]`` is the sample at x index i, y index j, z index k, so
    the flattened C-order array is z-fastest. ``truncation`` is None for
    grids that are not a TSDF (wavelet coefficient volumes).
    """

    values: np.ndarray
    extent: float
    truncation: float | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim == 1:
            n = round(len(vals) ** (1.0 / 3.0))
            if n**3 != len(vals):
                raise InvalidInputError(f"{len(vals)} values do not form a cube grid")
            vals = vals.reshape(n, n, n)
        if vals.ndim != 3 or len(set(vals.shape)) != 1 or vals.shape[0] < 1:
            raise InvalidInputError(f"volume must be a cube, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("volume values must be finite")
        if self.extent <= 0:
            raise InvalidInputError("extent must be positive")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def voxel_size(self) -> float:
        return 2.0 * self.extent / self.resolution

    def with_values(self, values: np.ndarray, truncation: float | None = None) -> "VolumeGrid":
        return VolumeGrid(values, self.extent, truncation)

    def axis_coordinates(self) -> np.ndarray:
        return index_to_coordinate(np.arange(self.resolution), self.resolution, self.extent)

    def points(self) -> np.ndarray:
        """All sample locations as an (N^3, 3) array in z-fastest order."""
        c = self.axis_coordinates()
        gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def index_to_coordinate(index, resolution: int, extent: float):
    return -extent + (np.asarray(index) + 0.5) * (2.0 * extent / resolution)


def coordinate_to_index(coord, resolution: int, extent: float):
    """Nearest cell index for a coordinate, clipped to the grid."""
    idx = np.floor((np.asarray(coord) + extent) / (2.0 * extent / resolution))
    return np.clip(idx, 0, resolution - 1).astype(np.int64)


# ----------------------------------------------------------------------------
# mesh operations


def normalize_mesh(mesh: TriangleMesh, extent: float = 0.45) -> TriangleMesh:
    """Centre the bounding box at the origin and scale the longest side to 2*extent."""
    if mesh.is_empty or len(mesh.vertices) == 0:
        raise InvalidInputError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    span = float((hi - lo).max())
    if span <= 0:
        raise InvalidInputError("mesh has zero extent")
    centre = 0.5 * (lo + hi)
    scale = 2.0 * extent / span
    return TriangleMesh((mesh.vertices - centre) * scale, mesh.triangles)


def is_closed_manifold(mesh: TriangleMesh) -> bool:
    """Every directed edge has exactly one opposite partner."""
    if mesh.is_empty:
        return True
    f = mesh.triangles
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    n = int(f.max()) + 1
    fwd = directed[:, 0] * n + directed[:, 1]
    rev = directed[:, 1] * n + directed[:, 0]
    uniq, counts = np.unique(fwd, return_counts=True)
    if np.any(counts != 1):
        return False
    return bool(np.all(np.isin(rev, uniq)))


class MeshDistance:
    """Exact closest-point queries and pseudonormal signs over a BVH.

    Build once per mesh, then query any number of points.
    """

    def __init__(self, mesh: TriangleMesh, leaf_size: int = 4):
        mesh = mesh.cleaned()
        if mesh.is_empty:
            raise InvalidInputError("mesh has no non-degenerate triangles")
        if not is_closed_manifold(mesh):
            log.warning("mesh is not watertight; distance signs may be locally wrong")
        self.mesh = mesh
        v, f = mesh.vertices, mesh.triangles
        self._tri = np.ascontiguousarray(v[f])  # (T, 3, 3)
        face_n, edge_n, vert_n = _pseudonormals(v, f)
        self._face_n = face_n
        self._edge_n = edge_n
        self._vert_n = np.ascontiguousarray(vert_n[f])  # per-corner vertex pseudonormal
        self._bvh = _bvh.build(self._tri, leaf_size)

    def query(self, points, max_distance: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Return (signed distance, closest point) for an (n, 3) array.

        Points with no surface within ``max_distance`` come back as NaN.
        """
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        out_d = np.empty(len(pts))
        out_c = np.empty((len(pts), 3))
        max_d2 = max_distance**2 if np.isfinite(max_distance) else np.inf
        _bvh.query(pts, max_d2, self._tri, self._face_n, self._edge_n, self._vert_n, *self._bvh, out_d, out_c)
        return out_d, out_c

    def signed_distance(self, points) -> np.ndarray:
        return self.query(points)[0]


def _pseudonormals(v: np.ndarray, f: np.ndarray):
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    n = np.cross(b - a, c - a)
    face_n = n / np.linalg.norm(n, axis=1, keepdims=True)

    # edge pseudonormal: sum of the unit normals of the faces sharing the edge
    edges = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1)  # (T, 3, 2)
    key = np.sort(edges, axis=2).reshape(-1, 2)
    nv = len(v)
    ek = key[:, 0] * nv + key[:, 1]
    uniq, inv = np.unique(ek, return_inverse=True)
    acc = np.zeros((len(uniq), 3))
    np.add.at(acc, inv, np.repeat(face_n, 3, axis=0))
    edge_n = acc[inv].reshape(-1, 3, 3)

    # vertex pseudonormal: incident face normals weighted by the incident angle
    vert_n = np.zeros_like(v)
    corners = (a, b, c)
    for i in range(3):
        p = corners[i]
        e1 = corners[(i + 1) % 3] - p
        e2 = corners[(i + 2) % 3] - p
        cosang = np.einsum("ij,ij->i", e1, e2) / (
            np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
        )
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(vert_n, f[:, i], face_n * ang[:, None])
    return face_n, np.ascontiguousarray(edge_n), vert_n


def signed_distance(mesh: TriangleMesh, point) -> float:
    """Signed Euclidean distance from one point to the mesh (negative inside)."""
    return float(MeshDistance(mesh).signed_distance(np.asarray(point, dtype=float)[None])[0])


def ray_parity_inside(mesh: TriangleMesh, points, direction=(0.5773, 0.5774, 0.5775)) -> np.ndarray:
    """Inside test by counting ray crossings; validation fallback for the pseudonormal sign."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    tri = mesh.vertices[mesh.triangles]
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-15
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    inside = np.zeros(len(pts), dtype=bool)
    for start in range(0, len(pts), 256):
        p = pts[start : start + 256, None, :]
        tvec = p - v0[None]
        u = np.einsum("pij,ij->pi", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None])
        v = np.einsum("pij,j->pi", qvec, d) * inv_det
        t = np.einsum("pij,ij->pi", qvec, e2) * inv_det
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        inside[start : start + 256] = hit.sum(axis=1) % 2 == 1
    return inside


def sample_tsdf(mesh: TriangleMesh, cfg: TsdfConfig) -> VolumeGrid:
    """Sample clamp(signed distance, -tau, tau) at the cell centres of the cfg grid.

    Exact distances are only computed inside the truncation band. Voxels
    outside it are grouped into 6-connected components; because tau exceeds
    half a voxel, no surface passes between two adjacent far voxels, so one
    exact query per component fixes the sign of the whole component.
    """
    if not isinstance(cfg, TsdfConfig):
        raise InvalidConfigError("cfg must be a TsdfConfig")
    n, tau = cfg.resolution, cfg.truncation
    grid = VolumeGrid(np.zeros((n,) * 3), cfg.extent)
    pts = grid.points()
    md = MeshDistance(mesh)
    if tau <= 0.5 * cfg.voxel_size:
        sd = md.signed_distance(pts)
    else:
        sd, _ = md.query(pts, max_distance=tau)
        far = np.isnan(sd).reshape((n,) * 3)
        labels, count = ndimage.label(far)
        if count:
            flat = labels.ravel()
            idx = np.flatnonzero(flat)
            # first voxel (z-fastest order) of each component 1..count
            _, first = np.unique(flat[idx], return_index=True)
            signs = np.sign(md.signed_distance(pts[idx[first]]))
            sd = np.where(np.isnan(sd), np.concatenate([[0.0], signs])[flat] * tau, sd)
    vals = np.clip(sd, -tau, tau).reshape((n,) * 3)
    return VolumeGrid(vals, cfg.extent, tau)


# ----------------------------------------------------------------------------
# file formats


def load_obj(path) -> TriangleMesh:
    """Read v/f records from a Wavefront OBJ, fan-triangulating polygons."""
    verts: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs three coordinates")
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ValueError("face needs at least three vertices")
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: {exc}") from exc
    if not faces:
        raise InvalidInputError(f"{path}: no faces")
    return TriangleMesh(np.array(verts, dtype=np.float64), np.array(faces)).cleaned()


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def encode_vol(grid: VolumeGrid) -> bytes:
    n = grid.resolution
    head = _VOL_HEADER.pack(VOL_MAGIC, n, grid.extent, grid.truncation or 0.0)
    return head + grid.values.astype("<f4").tobytes(order="C")


def decode_vol(buf: bytes, offset: int = 0) -> tuple[VolumeGrid, int]:
    """Parse one .vol payload starting at ``offset``; returns (grid, end offset)."""
    if len(buf) - offset < _VOL_HEADER.size:
        raise InvalidInputError("truncated .vol header")
    magic, n, extent, trunc = _VOL_HEADER.unpack_from(buf, offset)
    if magic != VOL_MAGIC:
        raise InvalidInputError(f"bad .vol magic {magic!r}")
    start = offset + _VOL_HEADER.size
    end = start + 4 * n**3
    if len(buf) < end:
        raise InvalidInputError("truncated .vol payload")
    vals = np.frombuffer(buf, dtype="<f4", count=n**3, offset=start).astype(np.float64)
    # header floats are float32; keep their shortest decimal form so 0.45 reads back as 0.45
    extent, trunc = float(str(np.float32(extent))), float(str(np.float32(trunc)))
    grid = VolumeGrid(vals.reshape(n, n, n), extent, trunc if trunc > 0 else None)
    return grid, end


def save_vol(grid: VolumeGrid, path) -> None:
    Path(path).write_bytes(encode_vol(grid))


def load_vol(path) -> VolumeGrid:
    buf = Path(path).read_bytes()
    grid, end = decode_vol(buf)
    if end != len(buf):
        raise InvalidInputError(f"{path}: trailing bytes after .vol payload")
    return grid
