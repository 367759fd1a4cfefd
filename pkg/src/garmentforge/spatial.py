"""Spatial queries on triangle soups: BVH closest point, inside tests."""

from dataclasses import dataclass

import numpy as np
from numba import njit


@njit(cache=True)
def closest_point_on_triangle(p, a, b, c):
    """Closest point to p on triangle (a, b, c), Ericson's region walk."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab[0] * ap[0] + ab[1] * ap[1] + ab[2] * ap[2]
    d2 = ac[0] * ap[0] + ac[1] * ap[1] + ac[2] * ap[2]
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy()
    bp = p - b
    d3 = ab[0] * bp[0] + ab[1] * bp[1] + ab[2] * bp[2]
    d4 = ac[0] * bp[0] + ac[1] * bp[1] + ac[2] * bp[2]
    if d3 >= 0.0 and d4 <= d3:
        return b.copy()
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab
    cp = p - c
    d5 = ab[0] * cp[0] + ab[1] * cp[1] + ab[2] * cp[2]
    d6 = ac[0] * cp[0] + ac[1] * cp[1] + ac[2] * cp[2]
    if d6 >= 0.0 and d5 <= d6:
        return c.copy()
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + v * ab + w * ac


@njit(cache=True)
def _bvh_closest(points, tri_corners, node_lo, node_hi, node_left, node_right, node_start, node_count, leaf_tris, out_dist, out_point, out_tri):
    stack = np.empty(128, dtype=np.int64)
    for q in range(points.shape[0]):
        p = points[q]
        best = 1e300
        best_pt = p.copy()
        best_tri = -1
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            # branch-and-bound on the node box
            d2 = 0.0
            for k in range(3):
                lo = node_lo[node, k]
                hi = node_hi[node, k]
                if p[k] < lo:
                    d2 += (lo - p[k]) ** 2
                elif p[k] > hi:
                    d2 += (p[k] - hi) ** 2
            if d2 >= best * best:
                continue
            if node_left[node] < 0:
                for i in range(node_start[node], node_start[node] + node_count[node]):
                    t = leaf_tris[i]
                    cp = closest_point_on_triangle(p, tri_corners[t, 0], tri_corners[t, 1], tri_corners[t, 2])
                    dx = p[0] - cp[0]
                    dy = p[1] - cp[1]
                    dz = p[2] - cp[2]
                    d = np.sqrt(dx * dx + dy * dy + dz * dz)
                    if d < best:
                        best = d
                        best_pt = cp
                        best_tri = t
            else:
                stack[top] = node_left[node]
                stack[top + 1] = node_right[node]
                top += 2
        out_dist[q] = best
        out_point[q] = best_pt
        out_tri[q] = best_tri


@dataclass
class TriangleBVH:
    """Median-split AABB tree over triangles, array-of-nodes layout."""

    tri_corners: np.ndarray  # (F, 3, 3)
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    leaf_tris: np.ndarray

    @staticmethod
    def build(vertices: np.ndarray, faces: np.ndarray, leaf_size: int = 8) -> "TriangleBVH":
        corners = np.ascontiguousarray(vertices[faces], dtype=np.float64)
        F = corners.shape[0]
        centroids = corners.mean(axis=1)
        tri_lo = corners.min(axis=1)
        tri_hi = corners.max(axis=1)

        order = np.arange(F, dtype=np.int64)
        lo_list, hi_list, left_list, right_list, start_list, count_list = [], [], [], [], [], []
        leaf_order = np.empty(F, dtype=np.int64)
        cursor = 0

        def make_node(idx: np.ndarray) -> int:
            nonlocal cursor
            node = len(lo_list)
            lo_list.append(tri_lo[idx].min(axis=0))
            hi_list.append(tri_hi[idx].max(axis=0))
            left_list.append(-1)
            right_list.append(-1)
            start_list.append(0)
            count_list.append(0)
            if idx.shape[0] <= leaf_size:
                start_list[node] = cursor
                count_list[node] = idx.shape[0]
                leaf_order[cursor : cursor + idx.shape[0]] = idx
                cursor += idx.shape[0]
                return node
            extent = tri_hi[idx].max(axis=0) - tri_lo[idx].min(axis=0)
            axis = int(np.argmax(extent))
            mid = idx.shape[0] // 2
            part = idx[np.argsort(centroids[idx, axis], kind="stable")]
            left_list[node] = make_node(part[:mid])
            right_list[node] = make_node(part[mid:])
            return node

        if F == 0:
            raise ValueError("BVH over empty mesh")
        import sys

        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 10000))
        try:
            make_node(order)
        finally:
            sys.setrecursionlimit(old)
        return TriangleBVH(
            corners,
            np.asarray(lo_list),
            np.asarray(hi_list),
            np.asarray(left_list, dtype=np.int64),
            np.asarray(right_list, dtype=np.int64),
            np.asarray(start_list, dtype=np.int64),
            np.asarray(count_list, dtype=np.int64),
            leaf_order,
        )

    def closest_points(self, points: np.ndarray):
        """Per query point: (distance, surface point, triangle id)."""
        points = np.ascontiguousarray(points, dtype=np.float64)
        n = points.shape[0]
        dist = np.empty(n, dtype=np.float64)
        cp = np.empty((n, 3), dtype=np.float64)
        tri = np.empty(n, dtype=np.int64)
        _bvh_closest(
            points, self.tri_corners, self.node_lo, self.node_hi,
            self.node_left, self.node_right, self.node_start, self.node_count,
            self.leaf_tris, dist, cp, tri,
        )
        return dist, cp, tri

    def closest_distances(self, points: np.ndarray) -> np.ndarray:
        return self.closest_points(points)[0]


@njit(cache=True)
def winding_numbers(points, tri_corners):
    """Generalized winding number per query point (van Oosterom solid angles)."""
    n = points.shape[0]
    out = np.zeros(n, dtype=np.float64)
    for q in range(n):
        p = points[q]
        total = 0.0
        for t in range(tri_corners.shape[0]):
            ax = tri_corners[t, 0, 0] - p[0]
            ay = tri_corners[t, 0, 1] - p[1]
            az = tri_corners[t, 0, 2] - p[2]
            bx = tri_corners[t, 1, 0] - p[0]
            by = tri_corners[t, 1, 1] - p[1]
            bz = tri_corners[t, 1, 2] - p[2]
            cx = tri_corners[t, 2, 0] - p[0]
            cy = tri_corners[t, 2, 1] - p[1]
            cz = tri_corners[t, 2, 2] - p[2]
            la = np.sqrt(ax * ax + ay * ay + az * az)
            lb = np.sqrt(bx * bx + by * by + bz * bz)
            lc = np.sqrt(cx * cx + cy * cy + cz * cz)
            det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
            denom = (
                la * lb * lc
                + (ax * bx + ay * by + az * bz) * lc
                + (bx * cx + by * cy + bz * cz) * la
                + (cx * ax + cy * ay + cz * az) * lb
            )
            total += 2.0 * np.arctan2(det, denom)
        out[q] = total / (4.0 * np.pi)
    return out


def points_inside(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Winding-number inside test for a closed, outward-oriented surface."""
    corners = np.ascontiguousarray(vertices[faces], dtype=np.float64)
    w = winding_numbers(np.ascontiguousarray(points, dtype=np.float64), corners)
    return w > threshold
