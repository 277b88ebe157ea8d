"""Point sampling on meshes and set-level generative metrics.

Distances between clouds:

* Chamfer (CD): mean squared nearest-neighbour distance from a to b plus
  the same from b to a.
* Earth mover's (EMD): mean Euclidean distance under the optimal bijection.
  Clouds larger than ``EMD_MAX_POINTS`` are subsampled with a fixed seed
  before the exact assignment is solved.

Set metrics (MMD, COV, 1-NNA) work on precomputed distance matrices so the
expensive pairwise part is done once per distance kind.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from wavediff.volume import InvalidInputError, TriangleMesh

EMD_MAX_POINTS = 1024
UNIT_SCALE = {"CD": 1e-3, "EMD": 1e-2}


def _cloud(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise InvalidInputError("point cloud is empty")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("point cloud has non-finite coordinates")
    return p


def sample_surface(mesh: TriangleMesh, n: int = 2048, seed: int = 0) -> np.ndarray:
    """``n`` points uniformly distributed over the mesh surface."""
    areas = mesh.triangle_areas() if not mesh.is_empty else np.zeros(0)
    total = areas.sum()
    if not total > 0.0:
        raise InvalidInputError("cannot sample a mesh with zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def chamfer(a, b) -> float:
    a, b = _cloud(a), _cloud(b)
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return float(np.mean(dab**2) + np.mean(dba**2))


def _subsample(p: np.ndarray, k: int, seed: int) -> np.ndarray:
    if len(p) <= k:
        return p
    return p[np.sort(np.random.default_rng(seed).choice(len(p), k, replace=False))]


def emd(a, b, max_points: int = EMD_MAX_POINTS, seed: int = 0) -> float:
    a, b = _cloud(a), _cloud(b)
    if len(a) != len(b):
        raise InvalidInputError(f"EMD needs equal-size clouds, got {len(a)} and {len(b)}")
    a, b = _subsample(a, max_points, seed), _subsample(b, max_points, seed + 1)
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


DISTANCES = {"CD": chamfer, "EMD": emd}


def distance_matrix(xs, ys, kind: str = "CD", symmetric: bool = False) -> np.ndarray:
    fn = DISTANCES[kind]
    out = np.zeros((len(xs), len(ys)))
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            if symmetric and j < i:
                out[i, j] = out[j, i]
            elif not (symmetric and i == j):
                out[i, j] = fn(x, y)
    return out


def mmd_from_matrix(d_gen_ref: np.ndarray) -> float:
    """Mean over references of the closest generated distance."""
    return float(np.min(d_gen_ref, axis=0).mean())


def coverage_from_matrix(d_gen_ref: np.ndarray) -> float:
    """Share of references that are the nearest reference of some sample."""
    matched = np.argmin(d_gen_ref, axis=1)  # argmin takes the lowest index on ties
    return len(np.unique(matched)) / d_gen_ref.shape[1]


def one_nna_from_matrices(d_gg: np.ndarray, d_rr: np.ndarray, d_gr: np.ndarray) -> float:
    """Leave-one-out 1-NN accuracy over gen + ref labelled by origin."""
    ng, nr = d_gr.shape
    if ng < 2 or nr < 2:
        raise InvalidInputError("1-NNA needs at least two clouds per set")
    full = np.block([[d_gg, d_gr], [d_gr.T, d_rr]]).astype(np.float64)
    np.fill_diagonal(full, np.inf)
    labels = np.r_[np.zeros(ng, bool), np.ones(nr, bool)]
    nearest = np.argmin(full, axis=1)
    return float(np.mean(labels[nearest] == labels))


def _check_sets(gen, ref):
    if len(gen) == 0 or len(ref) == 0:
        raise InvalidInputError("generated and reference sets must be non-empty")


def mmd(gen, ref, kind: str = "CD") -> float:
    _check_sets(gen, ref)
    return mmd_from_matrix(distance_matrix(gen, ref, kind))


def coverage(gen, ref, kind: str = "CD") -> float:
    _check_sets(gen, ref)
    return coverage_from_matrix(distance_matrix(gen, ref, kind))


def one_nna(gen, ref, kind: str = "CD") -> float:
    _check_sets(gen, ref)
    if len(gen) < 2 or len(ref) < 2:
        raise InvalidInputError("1-NNA needs at least two clouds per set")
    return one_nna_from_matrices(
        distance_matrix(gen, gen, kind, symmetric=True),
        distance_matrix(ref, ref, kind, symmetric=True),
        distance_matrix(gen, ref, kind),
    )


@dataclass
class MetricReport:
    """Distance matrices per kind and the derived scalars (raw units)."""

    matrices: dict = field(default_factory=dict)  # kind -> (d_gg, d_rr, d_gr)
    values: dict = field(default_factory=dict)  # (metric, kind) -> value

    def rows(self):
        for (metric, kind), value in self.values.items():
            scale = UNIT_SCALE[kind] if metric == "MMD" else 1.0
            yield metric, kind, value / scale, scale

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "distance_kind", "value", "unit_scale"])
            for metric, kind, value, scale in self.rows():
                w.writerow([metric, kind, f"{value:.9g}", f"{scale:g}"])


def evaluate_sets(gen, ref, kinds=("CD", "EMD")) -> MetricReport:
    """MMD, COV and 1-NNA of a generated set against a reference set."""
    _check_sets(gen, ref)
    gen = [_cloud(g) for g in gen]
    ref = [_cloud(r) for r in ref]
    report = MetricReport()
    for kind in kinds:
        d_gr = distance_matrix(gen, ref, kind)
        d_gg = distance_matrix(gen, gen, kind, symmetric=True)
        d_rr = distance_matrix(ref, ref, kind, symmetric=True)
        report.matrices[kind] = (d_gg, d_rr, d_gr)
        report.values[("MMD", kind)] = mmd_from_matrix(d_gr)
        report.values[("COV", kind)] = coverage_from_matrix(d_gr)
        if len(gen) >= 2 and len(ref) >= 2:
            report.values[("1-NNA", kind)] = one_nna_from_matrices(d_gg, d_rr, d_gr)
    return report


def read_report(path) -> dict:
    with open(Path(path), newline="") as fh:
        return {(r["metric"], r["distance_kind"]): float(r["value"]) * float(r["unit_scale"])
                for r in csv.DictReader(fh)}
