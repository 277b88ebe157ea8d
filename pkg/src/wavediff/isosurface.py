"""Marching cubes over a VolumeGrid.

Corner numbering (offsets along the three grid axes)::

    0 (0,0,0)  1 (1,0,0)  2 (1,1,0)  3 (0,1,0)
    4 (0,0,1)  5 (1,0,1)  6 (1,1,1)  7 (0,1,1)

Edges 0-3 run around the k=0 face, 4-7 around the k=1 face and 8-11 are the
vertical edges 0-4, 1-5, 2-6, 3-7. Bit ``v`` of a cube index is set when
corner ``v`` lies below the iso level.

The 256-entry tables are generated rather than typed in. Each face of the
cube contributes boundary segments; a face with two diagonal corners below
the level is split so that the diagonal through its lowest corner
stays connected, where the lowest corner is the one with the smallest
coordinates. The rule depends only on the face, so neighbouring cells
agree on shared faces (the mesh is watertight), and it does not depend on
which side is below the level, so negating the volume yields the same
surface with every triangle reversed. Segments chain into loops, and each
loop is triangulated with as few chords lying inside a cube face as
possible (such a chord could coincide with one from the neighbouring cell).
The few loops where that count cannot reach zero are fanned around an
extra vertex at the cell centre instead.
"""

from __future__ import annotations

import numpy as np

from wavediff.volume import InvalidInputError, TriangleMesh, VolumeGrid, index_to_coordinate

CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
)
EDGES = np.array(
    [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]]
)
# corner cycles start at the face's lowest corner; normals point out of the cube
_FACES = [
    ((0, 1, 2, 3), (0, 0, -1)),
    ((4, 5, 6, 7), (0, 0, 1)),
    ((0, 1, 5, 4), (0, -1, 0)),
    ((3, 2, 6, 7), (0, 1, 0)),
    ((0, 3, 7, 4), (-1, 0, 0)),
    ((1, 2, 6, 5), (1, 0, 0)),
]
_EDGE_OF = {frozenset(map(int, e)): i for i, e in enumerate(EDGES)}
_EDGE_MID = CORNERS[EDGES].mean(axis=1)


def _face_segments(case: int, cycle, normal) -> list[tuple[int, int]]:
    """Directed edge-to-edge segments on one face for a cube index."""
    inside = [(case >> v) & 1 for v in cycle]
    n_in = sum(inside)
    if n_in in (0, 4):
        return []
    side = [_EDGE_OF[frozenset((cycle[i], cycle[(i + 1) % 4]))] for i in range(4)]

    def around(i):
        # the two face edges meeting at cycle[i], with that corner as reference
        return (side[(i - 1) % 4], side[i]), cycle[i]

    if n_in == 2 and inside[0] == inside[2]:
        cuts = [around(1), around(3)]
    elif n_in == 2:
        first = next(i for i in range(4) if inside[i] and not inside[(i + 1) % 4])
        cuts = [((side[first], side[(first + 2) % 4]), cycle[first])]
    else:
        cuts = [around(inside.index(1 if n_in == 1 else 0))]
    segs = []
    for pair, ref in cuts:
        a, b = pair
        mid = 0.5 * (_EDGE_MID[a] + _EDGE_MID[b])
        toward_pos = mid - CORNERS[ref] if (case >> ref) & 1 else CORNERS[ref] - mid
        tangent = np.cross(toward_pos, normal)
        if np.dot(tangent, _EDGE_MID[b] - _EDGE_MID[a]) < 0:
            a, b = b, a
        segs.append((a, b))
    return segs


_EDGE_FACES = [
    {f for f, (cycle, _) in enumerate(_FACES) if set(map(int, e)) <= set(cycle)} for e in EDGES
]


CENTER = 12  # pseudo edge id for a cell-centre vertex


def _shares_face(e1: int, e2: int) -> bool:
    return bool(_EDGE_FACES[e1] & _EDGE_FACES[e2])


def _min_chord_triangulation(poly):
    """Triangulation of a polygon minimising chords that lie in a cube face.

    Interval dynamic programme; returns (number of such chords, triangles).
    """
    n = len(poly)

    def bad(i, j):
        return int(j - i > 1 and (i, j) != (0, n - 1) and _shares_face(poly[i], poly[j]))

    best = {}
    for span in range(2, n):
        for i in range(n - span):
            j = i + span
            options = []
            for k in range(i + 1, j):
                cost = best.get((i, k), (0, []))[0] + best.get((k, j), (0, []))[0] + bad(i, k) + bad(k, j)
                options.append((cost, k))
            cost, k = min(options)
            tris = best.get((i, k), (0, []))[1] + best.get((k, j), (0, []))[1] + [(poly[i], poly[k], poly[j])]
            best[(i, j)] = (cost, tris)
    return best[(0, n - 1)]


def _triangulate_loop(loop):
    """Triangulate a directed loop of edge ids.

    A chord lying in a cube face could also be emitted by the neighbouring
    cell and make that edge non-manifold, so triangulations without one are
    preferred. Loops that have none are fanned around a cell-centre vertex.
    The search runs on the undirected loop, so the result does not depend on
    orientation; triangles follow the loop direction.
    """
    start = loop.index(min(loop))
    fwd = loop[start:] + loop[:start]
    rev = [fwd[0]] + fwd[:0:-1]
    canon = min(fwd, rev)
    bad, tris = _min_chord_triangulation(canon)
    if bad:
        return [(CENTER, fwd[i], fwd[(i + 1) % len(fwd)]) for i in range(len(fwd))], True
    if canon != fwd:
        tris = [t[::-1] for t in tris]
    return tris, False


def _case_triangles(case: int):
    nxt = {}
    for cycle, normal in _FACES:
        for a, b in _face_segments(case, cycle, np.array(normal)):
            nxt[a] = b
    tris, centre_loop = [], []
    while nxt:
        start = min(nxt)
        loop = [start]
        while nxt[loop[-1]] != start:
            loop.append(nxt[loop[-1]])
        for e in loop:
            del nxt[e]
        loop_tris, centred = _triangulate_loop(loop)
        tris += loop_tris
        if centred:
            if centre_loop:
                raise AssertionError(f"case {case} needs two centre vertices")
            centre_loop = loop
    return tris, centre_loop


def _build_tables():
    edge_table = np.zeros(256, dtype=np.int64)
    centre_edges = np.zeros((256, 12), dtype=bool)
    rows = []
    for case in range(256):
        bits = [(case >> v) & 1 for v in range(8)]
        edge_table[case] = sum(1 << i for i, (a, b) in enumerate(EDGES) if bits[a] != bits[b])
        tris, centre_loop = _case_triangles(case)
        rows.append(tris)
        centre_edges[case, centre_loop] = True
    width = max(len(r) for r in rows)
    tri_table = np.full((256, width, 3), -1, dtype=np.int64)
    for case, r in enumerate(rows):
        if r:
            tri_table[case, : len(r)] = r
    return edge_table, tri_table, centre_edges


EDGE_TABLE, TRI_TABLE, CENTRE_EDGES = _build_tables()
TRI_COUNT = (TRI_TABLE[:, :, 0] >= 0).sum(axis=1)
_EDGE_LOW = np.minimum(CORNERS[EDGES[:, 0]], CORNERS[EDGES[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(CORNERS[EDGES[:, 1]] - CORNERS[EDGES[:, 0]]), axis=1)


def _as_grid(volume) -> VolumeGrid:
    return volume if isinstance(volume, VolumeGrid) else VolumeGrid(np.asarray(volume, dtype=np.float64), 1.0)


def marching_cubes(tsdf, iso: float = 0.0) -> TriangleMesh:
    """Triangle mesh of the ``iso`` level set, oriented toward larger values.

    Vertices lie on sign-changing cell edges (linear interpolation) and are
    shared between neighbouring cells; they are ordered by edge key, and
    triangles by cell in C order. The few saddle configurations that cannot
    be triangulated cleanly get an extra vertex at the mean of their loop,
    listed after all edge vertices.
    """
    grid = _as_grid(tsdf)
    vals = grid.values - iso
    if not np.all(np.isfinite(vals)):
        raise InvalidInputError("volume contains non-finite values")
    tau = grid.truncation or 1.0
    vals = np.where(vals == 0.0, 1e-9 * tau, vals)
    n = grid.resolution
    below = vals < 0.0
    case = np.zeros((n - 1,) * 3, dtype=np.int64)
    for v, (di, dj, dk) in enumerate(CORNERS):
        case |= below[di : n - 1 + di, dj : n - 1 + dj, dk : n - 1 + dk].astype(np.int64) << v
    cells = np.nonzero(TRI_COUNT[case] > 0)
    if len(cells[0]) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cell = np.stack(cells, axis=1)
    cell_case = case[cells]
    rows = TRI_TABLE[cell_case]  # (cells, width, 3)
    used = rows[:, :, 0] >= 0
    cell_of = np.broadcast_to(np.arange(len(cell))[:, None], used.shape)[used]
    tri_edges = rows[used]  # (tris, 3) local edge ids, CENTER for a cell centre
    # edge vertices are keyed by (lower sample, axis); centres come after all edges
    keys = _edge_keys(cell[cell_of][:, None, :], np.minimum(tri_edges, 11), n)
    centre_key = 3 * n**3 + np.ravel_multi_index(cell[cell_of].T, (n, n, n))
    keys = np.where(tri_edges == CENTER, centre_key[:, None], keys)
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    n_edge = np.searchsorted(uniq, 3 * n**3)
    axis = uniq[:n_edge] % 3
    p0 = np.stack(np.unravel_index(uniq[:n_edge] // 3, (n, n, n)), axis=1)
    step = np.eye(3, dtype=np.int64)[axis]
    p1 = p0 + step
    v0 = vals[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = vals[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = v0 / (v0 - v1)
    pos = index_to_coordinate(p0 + t[:, None] * step, n, grid.extent)
    if n_edge < len(uniq):
        # centre = mean of the loop's edge vertices
        centre_cells = np.stack(np.unravel_index(uniq[n_edge:] - 3 * n**3, (n, n, n)), axis=1)
        mask = CENTRE_EDGES[case[tuple(centre_cells.T)]]
        loop_keys = _edge_keys(centre_cells[:, None, :], np.arange(12)[None, :], n)
        loop_pos = pos[np.searchsorted(uniq[:n_edge], np.where(mask, loop_keys, uniq[0]))]
        centre = (loop_pos * mask[..., None]).sum(axis=1) / mask.sum(axis=1)[:, None]
        pos = np.concatenate([pos, centre])
    return TriangleMesh(pos, inverse.reshape(-1, 3))


def _edge_keys(cell: np.ndarray, edge: np.ndarray, n: int) -> np.ndarray:
    low = cell + _EDGE_LOW[edge]
    return ((low[..., 0] * n + low[..., 1]) * n + low[..., 2]) * 3 + _EDGE_AXIS[edge]


def _directed_edges(mesh: TriangleMesh) -> np.ndarray:
    f = mesh.triangles
    return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])


def mesh_is_watertight(mesh: TriangleMesh) -> bool:
    """Every edge is used by exactly two triangles, once in each direction."""
    if mesh.is_empty:
        return True
    e = _directed_edges(mesh)
    n = len(mesh.vertices)
    fwd = e[:, 0] * n + e[:, 1]
    if len(np.unique(fwd)) != len(fwd):
        return False
    back = e[:, 1] * n + e[:, 0]
    return bool(np.array_equal(np.sort(fwd), np.sort(back)))


def euler_characteristic(mesh: TriangleMesh) -> int:
    """V - E + F over the vertices referenced by triangles."""
    if mesh.is_empty:
        return 0
    e = np.sort(_directed_edges(mesh), axis=1)
    n_edges = len(np.unique(e[:, 0] * len(mesh.vertices) + e[:, 1]))
    return len(np.unique(mesh.triangles)) - n_edges + len(mesh.triangles)
