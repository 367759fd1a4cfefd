"""Differentiable triangle rasterization.

Two passes: a hard z-buffered attribute pass whose backward reaches both the
interpolated attributes and the vertex positions (interior gradients only),
and a soft silhouette pass where per-pixel coverage is a logistic of the
signed screen-space distance to the silhouette edge set, giving well-defined
contour gradients. Serial kernels in fixed order keep runs bit-reproducible.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .cameras import CameraView
from .mesh import AdjacencyIndex, TriMesh, build_adjacency

Z_NEAR = 1e-6


def project_vertices(mesh: TriMesh, view: CameraView) -> np.ndarray:
    """Per-vertex (u, v, camera z); u, v in continuous pixel coordinates."""
    cam = view.world_to_camera(mesh.vertices)
    z = cam[:, 2]
    safe = np.where(np.abs(z) > 1e-300, z, 1e-300)
    uvz = np.empty_like(cam)
    uvz[:, 0] = view.fx * cam[:, 0] / safe + view.cx
    uvz[:, 1] = view.fy * cam[:, 1] / safe + view.cy
    uvz[:, 2] = z
    return np.ascontiguousarray(uvz)


def projection_backward(mesh: TriMesh, view: CameraView, d_uvz: np.ndarray) -> np.ndarray:
    """Chain (du, dv, dz) gradients back to world vertex positions."""
    cam = view.world_to_camera(mesh.vertices)
    z = cam[:, 2]
    live = z > Z_NEAR
    zs = np.where(live, z, 1.0)
    d_cam = np.zeros_like(cam)
    d_cam[:, 0] = d_uvz[:, 0] * view.fx / zs
    d_cam[:, 1] = d_uvz[:, 1] * view.fy / zs
    d_cam[:, 2] = (
        -d_uvz[:, 0] * view.fx * cam[:, 0] / zs**2
        - d_uvz[:, 1] * view.fy * cam[:, 1] / zs**2
        + d_uvz[:, 2]
    )
    d_cam[~live] = 0.0
    return d_cam @ view.rotation


@njit(cache=True)
def _raster_forward(tris, uvz, height, width, z_near):
    face_id = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    depth = np.full((height, width), np.inf, dtype=np.float64)
    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
        z0, z1, z2 = uvz[i0, 2], uvz[i1, 2], uvz[i2, 2]
        if z0 <= z_near or z1 <= z_near or z2 <= z_near:
            continue
        u0, v0 = uvz[i0, 0], uvz[i0, 1]
        u1, v1 = uvz[i1, 0], uvz[i1, 1]
        u2, v2 = uvz[i2, 0], uvz[i2, 1]
        E = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if E == 0.0:
            continue
        sgn = 1.0 if E > 0.0 else -1.0
        umin = min(u0, min(u1, u2))
        umax = max(u0, max(u1, u2))
        vmin = min(v0, min(v1, v2))
        vmax = max(v0, max(v1, v2))
        jlo = max(0, int(np.ceil(umin - 0.5)))
        jhi = min(width - 1, int(np.floor(umax - 0.5)))
        ilo = max(0, int(np.ceil(vmin - 0.5)))
        ihi = min(height - 1, int(np.floor(vmax - 0.5)))
        for i in range(ilo, ihi + 1):
            vp = i + 0.5
            for j in range(jlo, jhi + 1):
                up = j + 0.5
                a0 = (u1 - up) * (v2 - vp) - (u2 - up) * (v1 - vp)
                a1 = (u2 - up) * (v0 - vp) - (u0 - up) * (v2 - vp)
                a2 = (u0 - up) * (v1 - vp) - (u1 - up) * (v0 - vp)
                if a0 * sgn < 0.0 or a1 * sgn < 0.0 or a2 * sgn < 0.0:
                    continue
                w0 = a0 / (E * z0)
                w1 = a1 / (E * z1)
                w2 = a2 / (E * z2)
                denom = w0 + w1 + w2
                if denom <= 0.0:
                    continue
                zp = 1.0 / denom
                if zp < depth[i, j]:
                    depth[i, j] = zp
                    face_id[i, j] = f
                    bary[i, j, 0] = w0 * zp
                    bary[i, j, 1] = w1 * zp
                    bary[i, j, 2] = w2 * zp
    return face_id, bary, depth


@njit(cache=True)
def _raster_backward(tris, uvz, face_id, bary, attrs, d_attr_img, d_attrs, d_uvz):
    height, width = face_id.shape
    C = attrs.shape[1]
    for i in range(height):
        vp = i + 0.5
        for j in range(width):
            f = face_id[i, j]
            if f < 0:
                continue
            up = j + 0.5
            i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
            u0, v0, z0 = uvz[i0, 0], uvz[i0, 1], uvz[i0, 2]
            u1, v1, z1 = uvz[i1, 0], uvz[i1, 1], uvz[i1, 2]
            u2, v2, z2 = uvz[i2, 0], uvz[i2, 1], uvz[i2, 2]
            E = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
            a0 = (u1 - up) * (v2 - vp) - (u2 - up) * (v1 - vp)
            a1 = (u2 - up) * (v0 - vp) - (u0 - up) * (v2 - vp)
            a2 = (u0 - up) * (v1 - vp) - (u1 - up) * (v0 - vp)
            b0 = a0 / E
            b1 = a1 / E
            b2 = a2 / E
            w0 = b0 / z0
            w1 = b1 / z1
            w2 = b2 / z2
            D = w0 + w1 + w2
            t0 = bary[i, j, 0]
            t1 = bary[i, j, 1]
            t2 = bary[i, j, 2]
            # attribute-side gradients and dL/dw_k = sum_c g_c (a_kc - a_px,c) / D
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            for c in range(C):
                g = d_attr_img[i, j, c]
                if g == 0.0:
                    continue
                v0c = attrs[i0, c]
                v1c = attrs[i1, c]
                v2c = attrs[i2, c]
                apx = t0 * v0c + t1 * v1c + t2 * v2c
                d_attrs[i0, c] += t0 * g
                d_attrs[i1, c] += t1 * g
                d_attrs[i2, c] += t2 * g
                s0 += g * (v0c - apx) / D
                s1 += g * (v1c - apx) / D
                s2 += g * (v2c - apx) / D
            if s0 == 0.0 and s1 == 0.0 and s2 == 0.0:
                continue
            # w_k = b_k / z_k
            db0 = s0 / z0
            db1 = s1 / z1
            db2 = s2 / z2
            d_uvz[i0, 2] += -s0 * b0 / (z0 * z0)
            d_uvz[i1, 2] += -s1 * b1 / (z1 * z1)
            d_uvz[i2, 2] += -s2 * b2 / (z2 * z2)
            # b_k = A_k / E
            dA0 = db0 / E
            dA1 = db1 / E
            dA2 = db2 / E
            dE = -(db0 * b0 + db1 * b1 + db2 * b2) / E
            # screen-space area derivatives
            d_uvz[i1, 0] += dA0 * (v2 - vp) + dE * (v2 - v0)
            d_uvz[i1, 1] += dA0 * (up - u2) + dE * (u0 - u2)
            d_uvz[i2, 0] += dA0 * (vp - v1) + dE * (v0 - v1)
            d_uvz[i2, 1] += dA0 * (u1 - up) + dE * (u1 - u0)
            d_uvz[i2, 0] += dA1 * (v0 - vp)
            d_uvz[i2, 1] += dA1 * (up - u0)
            d_uvz[i0, 0] += dA1 * (vp - v2) + dE * (v1 - v2)
            d_uvz[i0, 1] += dA1 * (u2 - up) + dE * (u2 - u1)
            d_uvz[i0, 0] += dA2 * (v1 - vp)
            d_uvz[i0, 1] += dA2 * (up - u1)
            d_uvz[i1, 0] += dA2 * (vp - v0)
            d_uvz[i1, 1] += dA2 * (u0 - up)


@dataclass
class RasterOutput:
    face_id: np.ndarray  # (H, W) int32, -1 = empty
    bary: np.ndarray  # (H, W, 3) perspective-correct, sums to 1 where covered
    depth: np.ndarray  # (H, W) camera z, inf where empty
    attrs: Optional[np.ndarray]  # (H, W, C) interpolated attributes
    mesh: TriMesh
    view: CameraView
    uvz: np.ndarray
    attributes: Optional[np.ndarray]

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0

    def interpolate(self, attributes: np.ndarray) -> np.ndarray:
        """Interpolate any (V, C) attribute array with this pass's coverage."""
        img = np.zeros(self.face_id.shape + (attributes.shape[1],), dtype=np.float64)
        mask = self.covered
        fid = self.face_id[mask]
        corner_vals = attributes[self.mesh.faces[fid]]  # (P, 3, C)
        img[mask] = np.einsum("pk,pkc->pc", self.bary[mask], corner_vals)
        return img

    def interpolate_corners(self, per_corner: np.ndarray) -> np.ndarray:
        """Interpolate per-corner attributes of shape (F, 3, C), e.g. UVs."""
        img = np.zeros(self.face_id.shape + (per_corner.shape[2],), dtype=np.float64)
        mask = self.covered
        fid = self.face_id[mask]
        img[mask] = np.einsum("pk,pkc->pc", self.bary[mask], per_corner[fid])
        return img


def rasterize_attributes(mesh: TriMesh, view: CameraView, attributes: Optional[np.ndarray] = None) -> RasterOutput:
    """Z-buffered perspective-correct rasterization of per-vertex attributes.

    Faces with any vertex at camera depth <= Z_NEAR are clipped whole.
    """
    if attributes is not None and attributes.shape[0] != mesh.num_vertices:
        raise ValueError("attribute list length must equal vertex count")
    uvz = project_vertices(mesh, view)
    face_id, bary, depth = _raster_forward(mesh.faces, uvz, view.height, view.width, Z_NEAR)
    out = RasterOutput(face_id, bary, depth, None, mesh, view, uvz, attributes)
    if attributes is not None:
        out.attrs = out.interpolate(np.ascontiguousarray(attributes, dtype=np.float64))
    return out


def rasterize_backward(out: RasterOutput, d_attr_img: np.ndarray):
    """Backward of rasterize_attributes w.r.t. attributes and vertex positions.

    Interior gradients only: pixel ownership is treated as fixed; coverage
    changes are the soft silhouette pass's job.
    """
    if out.attributes is None:
        raise ValueError("forward pass was run without attributes")
    attrs = np.ascontiguousarray(out.attributes, dtype=np.float64)
    d_attrs = np.zeros_like(attrs)
    d_uvz = np.zeros_like(out.uvz)
    _raster_backward(
        out.mesh.faces, out.uvz, out.face_id, out.bary, attrs,
        np.ascontiguousarray(d_attr_img, dtype=np.float64), d_attrs, d_uvz,
    )
    d_vertices = projection_backward(out.mesh, out.view, d_uvz)
    return d_attrs, d_vertices


# ---------------------------------------------------------------------------
# Soft silhouette

@njit(cache=True)
def _segment_distance_field(segments, band, height, width):
    dist = np.full((height, width), np.inf, dtype=np.float64)
    seg_id = np.full((height, width), -1, dtype=np.int32)
    reach = band + 1.5
    for s in range(segments.shape[0]):
        ax, ay = segments[s, 0], segments[s, 1]
        bx, by = segments[s, 2], segments[s, 3]
        jlo = max(0, int(np.floor(min(ax, bx) - reach)))
        jhi = min(width - 1, int(np.ceil(max(ax, bx) + reach)))
        ilo = max(0, int(np.floor(min(ay, by) - reach)))
        ihi = min(height - 1, int(np.ceil(max(ay, by) + reach)))
        ex = bx - ax
        ey = by - ay
        ee = ex * ex + ey * ey
        for i in range(ilo, ihi + 1):
            vp = i + 0.5
            for j in range(jlo, jhi + 1):
                up = j + 0.5
                if ee > 0.0:
                    t = ((up - ax) * ex + (vp - ay) * ey) / ee
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                else:
                    t = 0.0
                qx = ax + t * ex
                qy = ay + t * ey
                d = np.sqrt((up - qx) ** 2 + (vp - qy) ** 2)
                if d < dist[i, j]:
                    dist[i, j] = d
                    seg_id[i, j] = s
    return dist, seg_id


@njit(cache=True)
def _silhouette_backward_kernel(segments, dist, seg_id, d_dist, band, d_segments):
    height, width = dist.shape
    for i in range(height):
        vp = i + 0.5
        for j in range(width):
            s = seg_id[i, j]
            if s < 0 or dist[i, j] > band or dist[i, j] <= 0.0:
                continue
            g = d_dist[i, j]
            if g == 0.0:
                continue
            up = j + 0.5
            ax, ay = segments[s, 0], segments[s, 1]
            bx, by = segments[s, 2], segments[s, 3]
            ex = bx - ax
            ey = by - ay
            ee = ex * ex + ey * ey
            if ee > 0.0:
                t = ((up - ax) * ex + (vp - ay) * ey) / ee
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            else:
                t = 0.0
            qx = ax + t * ex
            qy = ay + t * ey
            d = dist[i, j]
            # envelope theorem: t held fixed at the optimum
            dqx = (qx - up) / d
            dqy = (qy - vp) / d
            d_segments[s, 0] += g * (1.0 - t) * dqx
            d_segments[s, 1] += g * (1.0 - t) * dqy
            d_segments[s, 2] += g * t * dqx
            d_segments[s, 3] += g * t * dqy


def silhouette_segments(mesh: TriMesh, uvz: np.ndarray, adjacency: AdjacencyIndex):
    """Candidate silhouette edges in screen space: boundary edges and edges
    whose two faces project with opposite orientation."""
    tris = mesh.faces
    z = uvz[:, 2]
    visible = (z[tris[:, 0]] > Z_NEAR) & (z[tris[:, 1]] > Z_NEAR) & (z[tris[:, 2]] > Z_NEAR)
    u = uvz[:, 0][tris]
    v = uvz[:, 1][tris]
    area2 = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])

    fa = adjacency.edge_faces[:, 0]
    fb = adjacency.edge_faces[:, 1]
    interior = fb >= 0
    cand = np.zeros(adjacency.edges.shape[0], dtype=bool)
    cand[~interior] = visible[fa[~interior]]
    both = interior.copy()
    both[interior] &= visible[fa[interior]] & visible[fb[interior]]
    cand[both] = area2[fa[both]] * area2[fb[both]] <= 0.0
    one = interior & ~both
    if one.any():
        cand[one] = visible[fa[one]] | visible[fb[one]]

    edge_ids = np.nonzero(cand)[0]
    ends = adjacency.edges[edge_ids]
    segments = np.empty((ends.shape[0], 4), dtype=np.float64)
    segments[:, 0] = uvz[ends[:, 0], 0]
    segments[:, 1] = uvz[ends[:, 0], 1]
    segments[:, 2] = uvz[ends[:, 1], 0]
    segments[:, 3] = uvz[ends[:, 1], 1]
    return segments, ends


@dataclass
class SoftSilhouette:
    coverage: np.ndarray  # (H, W) in [0, 1]
    tau: float
    band: float
    dist: np.ndarray
    seg_id: np.ndarray
    sign: np.ndarray  # +1 inside the hard mask, -1 outside
    segments: np.ndarray
    segment_vertices: np.ndarray  # (S, 2) vertex ids
    mesh: TriMesh
    view: CameraView
    uvz: np.ndarray

    @property
    def hard_mask(self) -> np.ndarray:
        return self.sign > 0


def soft_silhouette(
    mesh: TriMesh,
    view: CameraView,
    tau: float = 1.0,
    band: float = 12.0,
    adjacency: Optional[AdjacencyIndex] = None,
    raster: Optional[RasterOutput] = None,
) -> SoftSilhouette:
    """Per-pixel coverage = logistic(signed distance to the silhouette / tau).

    Sign is positive inside; beyond `band` pixels of any silhouette edge the
    coverage is the hard 0/1 mask and carries no gradient.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if adjacency is None:
        adjacency = build_adjacency(mesh)
    if raster is None:
        raster = rasterize_attributes(mesh, view)
    uvz = raster.uvz
    segments, seg_verts = silhouette_segments(mesh, uvz, adjacency)
    if segments.shape[0] == 0:
        dist = np.full((view.height, view.width), np.inf)
        seg_id = np.full((view.height, view.width), -1, dtype=np.int32)
    else:
        dist, seg_id = _segment_distance_field(segments, band, view.height, view.width)
    covered = raster.covered
    sign = np.where(covered, 1.0, -1.0)
    coverage = np.where(covered, 1.0, 0.0)
    in_band = dist <= band
    sd = sign[in_band] * dist[in_band] / tau
    coverage[in_band] = 1.0 / (1.0 + np.exp(-sd))
    return SoftSilhouette(coverage, tau, band, dist, seg_id, sign, segments, seg_verts, mesh, view, uvz)


def soft_silhouette_backward(sil: SoftSilhouette, d_coverage: np.ndarray) -> np.ndarray:
    """d(coverage)/d(vertex positions), through distance and projection."""
    in_band = sil.dist <= sil.band
    cov = sil.coverage
    d_dist = np.zeros_like(cov)
    d_dist[in_band] = d_coverage[in_band] * cov[in_band] * (1.0 - cov[in_band]) * sil.sign[in_band] / sil.tau
    d_segments = np.zeros_like(sil.segments)
    if sil.segments.shape[0]:
        _silhouette_backward_kernel(sil.segments, sil.dist, sil.seg_id, d_dist, sil.band, d_segments)
    d_uvz = np.zeros_like(sil.uvz)
    np.add.at(d_uvz[:, 0], sil.segment_vertices[:, 0], d_segments[:, 0])
    np.add.at(d_uvz[:, 1], sil.segment_vertices[:, 0], d_segments[:, 1])
    np.add.at(d_uvz[:, 0], sil.segment_vertices[:, 1], d_segments[:, 2])
    np.add.at(d_uvz[:, 1], sil.segment_vertices[:, 1], d_segments[:, 3])
    return projection_backward(sil.mesh, sil.view, d_uvz)
