"""Bounding volume hierarchy over triangles with exact closest-point queries."""

import warnings

import numba
import numpy as np

warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)

# closest-feature codes: 0 face interior, 1..3 edge (ab, bc, ca), 4..6 vertex (a, b, c)
FACE, EDGE_AB, EDGE_BC, EDGE_CA, VERT_A, VERT_B, VERT_C = range(7)


def build(tri: np.ndarray, leaf_size: int = 4):
    """Median-split BVH. Returns flat arrays consumed by :func:`query`."""
    lo_t = tri.min(axis=1)
    hi_t = tri.max(axis=1)
    cen = tri.mean(axis=1)
    order = np.arange(len(tri))
    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        bmin.append(lo_t[idx].min(axis=0))
        bmax.append(hi_t[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(bmin) - 1

    stack = [(new_node(0, len(tri)), 0, len(tri))]
    while stack:
        node, s, e = stack.pop()
        if e - s <= leaf_size:
            continue
        idx = order[s:e]
        axis = int(np.argmax(cen[idx].max(axis=0) - cen[idx].min(axis=0)))
        mid = (e - s) // 2
        part = np.argpartition(cen[idx, axis], mid)
        order[s:e] = idx[part]
        m = s + mid
        l_node = new_node(s, m)
        r_node = new_node(m, e)
        left[node] = l_node
        right[node] = r_node
        count[node] = 0
        stack.append((l_node, s, m))
        stack.append((r_node, m, e))
    return (
        np.array(bmin),
        np.array(bmax),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(start, dtype=np.int64),
        np.array(count, dtype=np.int64),
        order.astype(np.int64),
    )


@numba.njit(cache=True, inline="always")
def _dot(a0, a1, a2, b0, b1, b2):
    return a0 * b0 + a1 * b1 + a2 * b2


@numba.njit(cache=True)
def closest_point_triangle(p, a, b, c):
    """Closest point on triangle abc to p and the feature code it lies on."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab[0], ab[1], ab[2], ap[0], ap[1], ap[2])
    d2 = _dot(ac[0], ac[1], ac[2], ap[0], ap[1], ap[2])
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy(), VERT_A
    bp = p - b
    d3 = _dot(ab[0], ab[1], ab[2], bp[0], bp[1], bp[2])
    d4 = _dot(ac[0], ac[1], ac[2], bp[0], bp[1], bp[2])
    if d3 >= 0.0 and d4 <= d3:
        return b.copy(), VERT_B
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab, EDGE_AB
    cp = p - c
    d5 = _dot(ab[0], ab[1], ab[2], cp[0], cp[1], cp[2])
    d6 = _dot(ac[0], ac[1], ac[2], cp[0], cp[1], cp[2])
    if d6 >= 0.0 and d5 <= d6:
        return c.copy(), VERT_C
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac, EDGE_CA
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b), EDGE_BC
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w, FACE


@numba.njit(cache=True, inline="always")
def _box_d2(p, lo, hi):
    d2 = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d2 += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            d2 += (p[k] - hi[k]) ** 2
    return d2


@numba.njit(cache=True, parallel=True)
def query(pts, max_d2, tri, face_n, edge_n, vert_n, bmin, bmax, left, right, start, count, order, out_d, out_c):
    """Signed distance and closest point per query point.

    Only triangles closer than sqrt(max_d2) are considered; points with none
    in range get NaN outputs.
    """
    for i in numba.prange(pts.shape[0]):
        p = pts[i]
        best = max_d2
        best_t = -1
        best_r = 0
        best_c = np.zeros(3)
        stack = np.empty(128, dtype=np.int64)
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_d2(p, bmin[node], bmax[node]) >= best:
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    t = order[j]
                    c, region = closest_point_triangle(p, tri[t, 0], tri[t, 1], tri[t, 2])
                    d2 = (p[0] - c[0]) ** 2 + (p[1] - c[1]) ** 2 + (p[2] - c[2]) ** 2
                    if d2 < best:
                        best = d2
                        best_t = t
                        best_r = region
                        best_c = c
            else:
                l_node = left[node]
                r_node = right[node]
                dl = _box_d2(p, bmin[l_node], bmax[l_node])
                dr = _box_d2(p, bmin[r_node], bmax[r_node])
                # nearer child popped first
                if dl < dr:
                    stack[sp] = r_node
                    stack[sp + 1] = l_node
                else:
                    stack[sp] = l_node
                    stack[sp + 1] = r_node
                sp += 2
        if best_t < 0:
            out_d[i] = np.nan
            out_c[i, 0] = np.nan
            out_c[i, 1] = np.nan
            out_c[i, 2] = np.nan
            continue
        if best_r == FACE:
            n = face_n[best_t]
        elif best_r <= EDGE_CA:
            n = edge_n[best_t, best_r - EDGE_AB]
        else:
            n = vert_n[best_t, best_r - VERT_A]
        s = (p[0] - best_c[0]) * n[0] + (p[1] - best_c[1]) * n[1] + (p[2] - best_c[2]) * n[2]
        dist = np.sqrt(best)
        out_d[i] = -dist if s < 0.0 else dist
        out_c[i, 0] = best_c[0]
        out_c[i, 1] = best_c[1]
        out_c[i, 2] = best_c[2]
