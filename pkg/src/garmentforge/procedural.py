"""Procedural meshes used as fixtures, demo inputs and oracle targets."""

import numpy as np

from .mesh import TriMesh


def grid_sheet(nx: int = 10, ny: int = 10, size: float = 1.0, z: float = 0.0) -> TriMesh:
    """Flat (nx+1) x (ny+1) vertex sheet in the z-plane, CCW seen from +z."""
    xs = np.linspace(-size / 2, size / 2, nx + 1)
    ys = np.linspace(-size / 2, size / 2, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, float(z))], axis=1)
    faces = []
    for i in range(nx):
        for j in range(ny):
            a = i * (ny + 1) + j
            b = (i + 1) * (ny + 1) + j
            faces.append((a, b, b + 1))
            faces.append((a, b + 1, a + 1))
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def uv_sphere(rows: int = 16, cols: int = 32, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Closed lat-long sphere, outward orientation."""
    center = np.asarray(center, dtype=np.float64)
    verts = [center + np.array([0.0, radius, 0.0])]
    for r in range(1, rows):
        phi = np.pi * r / rows
        for c in range(cols):
            theta = 2 * np.pi * c / cols
            verts.append(
                center
                + radius * np.array([np.sin(phi) * np.cos(theta), np.cos(phi), np.sin(phi) * np.sin(theta)])
            )
    verts.append(center + np.array([0.0, -radius, 0.0]))
    top, bottom = 0, len(verts) - 1
    ring = lambda r, c: 1 + (r - 1) * cols + (c % cols)
    faces = []
    for c in range(cols):
        faces.append((top, ring(1, c + 1), ring(1, c)))
    for r in range(1, rows - 1):
        for c in range(cols):
            a, b = ring(r, c), ring(r, c + 1)
            d, e = ring(r + 1, c), ring(r + 1, c + 1)
            faces.append((a, b, e))
            faces.append((a, e, d))
    for c in range(cols):
        faces.append((bottom, ring(rows - 1, c), ring(rows - 1, c + 1)))
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))


def open_tube(
    rows: int = 12,
    cols: int = 24,
    radius: float = 0.5,
    height: float = 1.0,
    center=(0.0, 0.0, 0.0),
    with_uvs: bool = False,
) -> TriMesh:
    """Open cylinder wall (two boundary loops), outward orientation, +y axis."""
    center = np.asarray(center, dtype=np.float64)
    verts = np.empty(((rows + 1) * cols, 3), dtype=np.float64)
    for r in range(rows + 1):
        y = -height / 2 + height * r / rows
        for c in range(cols):
            theta = 2 * np.pi * c / cols
            verts[r * cols + c] = center + [radius * np.cos(theta), y, radius * np.sin(theta)]
    idx = lambda r, c: r * cols + (c % cols)
    faces = []
    for r in range(rows):
        for c in range(cols):
            a, b = idx(r, c), idx(r, c + 1)
            d, e = idx(r + 1, c), idx(r + 1, c + 1)
            faces.append((a, e, b))
            faces.append((a, d, e))
    mesh = TriMesh(verts, np.asarray(faces, dtype=np.int64))
    if with_uvs:
        mesh.uvs = _tube_uvs(rows, cols, mesh.faces)
    return mesh


def _tube_uvs(rows: int, cols: int, faces: np.ndarray) -> np.ndarray:
    # Cylindrical chart; the wrap seam duplicates u=1 at the per-corner level.
    uvs = np.empty((faces.shape[0], 3, 2), dtype=np.float64)
    for f in range(faces.shape[0]):
        cs = [(int(v) % cols, int(v) // cols) for v in faces[f]]
        raw_u = [c for c, _ in cs]
        wrap = max(raw_u) - min(raw_u) > cols / 2
        for k, (c, r) in enumerate(cs):
            u = c / cols
            if wrap and c < cols / 2:
                u += 1.0
            uvs[f, k, 0] = u / (1.0 + 1.0 / cols)
            uvs[f, k, 1] = r / rows
    return uvs


def disk(rings: int = 4, segments: int = 24, radius: float = 1.0) -> TriMesh:
    """Flat disk in z=0 with one boundary loop."""
    verts = [np.zeros(3)]
    for r in range(1, rings + 1):
        for s in range(segments):
            theta = 2 * np.pi * s / segments
            rr = radius * r / rings
            verts.append(np.array([rr * np.cos(theta), rr * np.sin(theta), 0.0]))
    ring = lambda r, s: 1 + (r - 1) * segments + (s % segments)
    faces = []
    for s in range(segments):
        faces.append((0, ring(1, s), ring(1, s + 1)))
    for r in range(1, rings):
        for s in range(segments):
            a, b = ring(r, s), ring(r, s + 1)
            d, e = ring(r + 1, s), ring(r + 1, s + 1)
            faces.append((a, e, b))
            faces.append((a, d, e))
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned closed box, 8 vertices / 12 faces, outward orientation."""
    sx, sy, sz = np.asarray(size, dtype=np.float64) / 2
    cx, cy, cz = center
    verts = np.array(
        [
            [cx - sx, cy - sy, cz - sz],
            [cx + sx, cy - sy, cz - sz],
            [cx + sx, cy + sy, cz - sz],
            [cx - sx, cy + sy, cz - sz],
            [cx - sx, cy - sy, cz + sz],
            [cx + sx, cy - sy, cz + sz],
            [cx + sx, cy + sy, cz + sz],
            [cx - sx, cy + sy, cz + sz],
        ]
    )
    faces = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # z-
            [4, 5, 6], [4, 6, 7],  # z+
            [0, 1, 5], [0, 5, 4],  # y-
            [3, 7, 6], [3, 6, 2],  # y+
            [0, 4, 7], [0, 7, 3],  # x-
            [1, 2, 6], [1, 6, 5],  # x+
        ],
        dtype=np.int64,
    )
    return TriMesh(verts, faces)


def skirt(
    rows: int = 48,
    cols: int = 72,
    waist_radius: float = 0.30,
    hem_radius: float = 0.55,
    height: float = 0.9,
    wrinkle_amp: float = 0.0,
    wrinkle_freq: int = 10,
    with_uvs: bool = False,
    seed: int = 0,
) -> TriMesh:
    """Flared open tube (waist + hem boundary loops) with optional sinusoidal
    wrinkles whose amplitude grows toward the hem."""
    verts = np.empty(((rows + 1) * cols, 3), dtype=np.float64)
    for r in range(rows + 1):
        t = r / rows  # 0 at hem (bottom), 1 at waist (top)
        y = -height / 2 + height * t
        base = hem_radius + (waist_radius - hem_radius) * t
        for c in range(cols):
            theta = 2 * np.pi * c / cols
            radial = base
            if wrinkle_amp > 0.0:
                radial += wrinkle_amp * (1.0 - t) * np.sin(wrinkle_freq * theta)
            verts[r * cols + c] = [radial * np.cos(theta), y, radial * np.sin(theta)]
    idx = lambda r, c: r * cols + (c % cols)
    faces = []
    for r in range(rows):
        for c in range(cols):
            a, b = idx(r, c), idx(r, c + 1)
            d, e = idx(r + 1, c), idx(r + 1, c + 1)
            faces.append((a, e, b))
            faces.append((a, d, e))
    mesh = TriMesh(verts, np.asarray(faces, dtype=np.int64))
    if with_uvs:
        mesh.uvs = _tube_uvs(rows, cols, mesh.faces)
    return mesh


def crumpled_sheet(nx: int = 24, ny: int = 24, size: float = 1.0, noise: float = 0.02, seed: int = 0, waves: int = 6) -> TriMesh:
    """Flat sheet crumpled by seeded random-phase bumps, amplitude `noise` x bbox.

    Smooth (band-limited) displacement rather than white noise: the surface
    stays near-developable so flattening it costs little membrane strain.
    """
    mesh = grid_sheet(nx, ny, size=size)
    rng = np.random.default_rng(seed)
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    z = np.zeros_like(x)
    for _ in range(waves):
        kx, ky = rng.uniform(-2.5, 2.5, 2) * 2 * np.pi / size
        phase = rng.uniform(0, 2 * np.pi)
        z += np.sin(kx * x + ky * y + phase)
    z *= noise * size / max(np.abs(z).max(), 1e-12)
    mesh.vertices[:, 2] += z
    return mesh


def checkerboard_texture(resolution: int = 256, squares: int = 8, dark=(0.1, 0.15, 0.5), light=(0.95, 0.9, 0.2)) -> np.ndarray:
    """(R, R, 3) float checkerboard in [0,1]."""
    ij = np.arange(resolution)
    cell = (ij * squares // resolution) % 2
    board = np.logical_xor(cell[:, None], cell[None, :])
    img = np.where(board[..., None], np.asarray(light), np.asarray(dark))
    return img.astype(np.float64)
