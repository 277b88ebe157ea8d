"""Procedural test geometry: spheres, boxes and chair-like box assemblies."""

from __future__ import annotations

import numpy as np

from wavediff.volume import TriangleMesh, VolumeGrid


def icosphere(subdivisions: int = 4, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(np.array(v) * radius, np.array(faces))


def box_mesh(lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned box, 12 outward-facing triangles."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    corners = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    # corner index bits: x=1, y=2, z=4
    quads = [
        (0, 2, 3, 1),  # z = lo
        (4, 5, 7, 6),  # z = hi
        (0, 1, 5, 4),  # y = lo
        (2, 6, 7, 3),  # y = hi
        (0, 4, 6, 2),  # x = lo
        (1, 3, 7, 5),  # x = hi
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners, np.array(faces))


def sphere_tsdf(resolution: int, radius: float = 0.3, extent: float = 0.45, truncation: float = 0.1) -> VolumeGrid:
    grid = VolumeGrid(np.zeros((resolution,) * 3), extent)
    r = np.linalg.norm(grid.points(), axis=1) - radius
    return VolumeGrid(np.clip(r, -truncation, truncation).reshape((resolution,) * 3), extent, truncation)


def box_sdf(points: np.ndarray, lo, hi) -> np.ndarray:
    """Exact signed distance to an axis-aligned box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    c = 0.5 * (lo + hi)
    h = 0.5 * (hi - lo)
    q = np.abs(points - c) - h
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def chair_boxes(rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seat, back and four legs with randomised proportions, in roughly [-0.5, 0.5]^3."""
    w = rng.uniform(0.30, 0.45)  # half width (x)
    d = rng.uniform(0.28, 0.42)  # half depth (z)
    seat_y = rng.uniform(-0.08, 0.05)
    seat_t = rng.uniform(0.04, 0.07)
    leg = rng.uniform(0.035, 0.06)
    back_h = rng.uniform(0.35, 0.5)
    back_t = rng.uniform(0.04, 0.07)
    floor = -0.5
    boxes = [
        ((-w, seat_y - seat_t, -d), (w, seat_y, d)),
        ((-w, seat_y, d - back_t), (w, seat_y + back_h, d)),
    ]
    for sx in (-1, 1):
        for sz in (-1, 1):
            x0 = sx * (w - leg)
            z0 = sz * (d - leg)
            boxes.append(((x0 - leg, floor, z0 - leg), (x0 + leg, seat_y - seat_t + 1e-3, z0 + leg)))
    return [(np.array(lo), np.array(hi)) for lo, hi in boxes]


def chair_mesh(seed: int, resolution: int = 96) -> TriangleMesh:
    """Watertight chair-like mesh: iso-surface of the union of its boxes."""
    from wavediff.isosurface import marching_cubes

    boxes = chair_boxes(np.random.default_rng(seed))
    grid = VolumeGrid(np.zeros((resolution,) * 3), 0.6)
    pts = grid.points()
    sd = np.min([box_sdf(pts, lo, hi) for lo, hi in boxes], axis=0)
    return marching_cubes(grid.with_values(sd.reshape((resolution,) * 3)))


def chair_tsdf(seed: int, resolution: int = 64, extent: float = 0.45, truncation: float = 0.1,
               scale: float = 0.75) -> VolumeGrid:
    """TSDF of a box-union chair computed analytically on the grid.

    The union of box SDFs is exact outside the shape and a lower bound on the
    depth inside, which is all a toy dataset needs.
    """
    grid = VolumeGrid(np.zeros((resolution,) * 3), extent, truncation)
    pts = grid.points() / scale
    boxes = chair_boxes(np.random.default_rng(seed))
    sd = np.min([box_sdf(pts, lo, hi) for lo, hi in boxes], axis=0) * scale
    return grid.with_values(np.clip(sd, -truncation, truncation).reshape((resolution,) * 3))
