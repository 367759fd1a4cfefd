"""Indexed triangle meshes: OBJ I/O, adjacency, normals, boundary loops, metrics."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .spatial import TriangleBVH

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Invalid mesh topology or malformed mesh file."""


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64, world units
    faces: np.ndarray  # (F, 3) int64, CCW = outward
    uvs: Optional[np.ndarray] = None  # (F, 3, 2) float64 per-corner, in [0,1]^2

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.uvs is not None:
            self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def copy(self) -> "TriMesh":
        return TriMesh(
            self.vertices.copy(),
            self.faces.copy(),
            None if self.uvs is None else self.uvs.copy(),
        )

    def face_corners(self) -> np.ndarray:
        """Per-face corner positions, shape (F, 3, 3)."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        c = self.face_corners()
        cr = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def validate(self) -> None:
        """Check index bounds, degenerate faces, manifoldness and orientation."""
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.num_vertices):
            raise MeshError("face index out of range")
        same = (
            (self.faces[:, 0] == self.faces[:, 1])
            | (self.faces[:, 1] == self.faces[:, 2])
            | (self.faces[:, 0] == self.faces[:, 2])
        )
        if same.any():
            raise MeshError(f"face {int(np.nonzero(same)[0][0])} has repeated vertex indices")
        # Directed-edge census: an interior edge must be traversed once per
        # direction; >2 incident faces is non-manifold.
        directed = {}
        for f in range(self.num_faces):
            a, b, c = self.faces[f]
            for u, v in ((a, b), (b, c), (c, a)):
                key = (int(u), int(v))
                directed[key] = directed.get(key, 0) + 1
        for (u, v), n in directed.items():
            n_rev = directed.get((v, u), 0)
            if n + n_rev > 2:
                raise MeshError(f"non-manifold edge ({u}, {v}): {n + n_rev} incident faces")
            if n > 1:
                raise MeshError(f"inconsistent orientation across edge ({u}, {v})")


@dataclass
class AdjacencyIndex:
    """Edge/pair connectivity of a TriMesh, rebuilt explicitly after edits."""

    edges: np.ndarray  # (E, 2) int64, sorted vertex pairs
    edge_faces: np.ndarray  # (E, 2) int64, -1 when absent
    boundary_edge_mask: np.ndarray  # (E,) bool, exactly one incident face
    face_pairs: np.ndarray  # (N, 2) int64, faces across each interior edge
    face_pair_edges: np.ndarray  # (N,) int64, edge row backing each face pair
    vertex_pairs: np.ndarray  # (M, 2) int64, deduplicated adjacent vertices
    laplacian_weights: np.ndarray  # (M,) float64
    hinges: np.ndarray = field(default=None)  # (N, 4) int64: edge v0, v1, opposite v2 (face a), v3 (face b)
    vertex_neighbors_offsets: np.ndarray = field(default=None)  # CSR offsets (V+1,)
    vertex_neighbors: np.ndarray = field(default=None)  # CSR neighbor ids

    @property
    def num_interior_edges(self) -> int:
        return self.face_pairs.shape[0]


def build_adjacency(mesh: TriMesh, laplacian_weight: float = 1.0) -> AdjacencyIndex:
    """Build the edge/pair index. Uniform Laplacian weights by default."""
    faces = mesh.faces
    corner_edges = np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0
    )
    face_of_edge = np.tile(np.arange(mesh.num_faces, dtype=np.int64), 3)
    key = np.sort(corner_edges, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    key = key[order]
    face_of_edge = face_of_edge[order]

    uniq, start = np.unique(key, axis=0, return_index=True)
    counts = np.diff(np.append(start, key.shape[0]))
    if counts.size and counts.max() > 2:
        bad = int(np.argmax(counts))
        raise MeshError(f"non-manifold edge ({uniq[bad, 0]}, {uniq[bad, 1]})")

    E = uniq.shape[0]
    edge_faces = np.full((E, 2), -1, dtype=np.int64)
    edge_faces[:, 0] = face_of_edge[start]
    two = counts == 2
    edge_faces[two, 1] = face_of_edge[start[two] + 1]
    boundary = counts == 1

    face_pairs = edge_faces[two]
    face_pair_edges = np.nonzero(two)[0].astype(np.int64)

    # Hinge stencils: shared edge (v0, v1) plus the opposite vertex in each face.
    hinges = np.empty((face_pairs.shape[0], 4), dtype=np.int64)
    for i, (e_row, (fa, fb)) in enumerate(zip(face_pair_edges, face_pairs)):
        v0, v1 = uniq[e_row]
        hinges[i, 0] = v0
        hinges[i, 1] = v1
        hinges[i, 2] = _opposite_vertex(faces[fa], v0, v1)
        hinges[i, 3] = _opposite_vertex(faces[fb], v0, v1)

    weights = np.full(E, float(laplacian_weight), dtype=np.float64)

    # CSR vertex -> neighbor vertices from the unique edge list.
    V = mesh.num_vertices
    deg = np.zeros(V, dtype=np.int64)
    np.add.at(deg, uniq[:, 0], 1)
    np.add.at(deg, uniq[:, 1], 1)
    offsets = np.zeros(V + 1, dtype=np.int64)
    np.cumsum(deg, out=offsets[1:])
    neighbors = np.empty(offsets[-1], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for a, b in uniq:
        neighbors[cursor[a]] = b
        cursor[a] += 1
        neighbors[cursor[b]] = a
        cursor[b] += 1

    return AdjacencyIndex(
        edges=uniq,
        edge_faces=edge_faces,
        boundary_edge_mask=boundary,
        face_pairs=face_pairs,
        face_pair_edges=face_pair_edges,
        vertex_pairs=uniq,
        laplacian_weights=weights,
        hinges=hinges,
        vertex_neighbors_offsets=offsets,
        vertex_neighbors=neighbors,
    )


def _opposite_vertex(face: np.ndarray, v0: int, v1: int) -> int:
    for v in face:
        if v != v0 and v != v1:
            return int(v)
    raise MeshError(f"degenerate face {face} on edge ({v0}, {v1})")


# ---------------------------------------------------------------------------
# OBJ I/O

def load_obj(path) -> TriMesh:
    """Load an ASCII OBJ (v / vt / f). Quads are fan-triangulated at corner 0."""
    vertices = []
    uvs_pool = []
    face_indices = []
    face_uv_indices = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                elif tag == "vt":
                    uvs_pool.append([float(parts[1]), float(parts[2])])
                elif tag == "f":
                    vi, ti = [], []
                    for corner in parts[1:]:
                        fields = corner.split("/")
                        vi.append(int(fields[0]))
                        if len(fields) > 1 and fields[1]:
                            ti.append(int(fields[1]))
                    if len(vi) < 3:
                        raise MeshError(f"{path}:{lineno}: face with fewer than 3 corners")
                    if ti and len(ti) != len(vi):
                        raise MeshError(f"{path}:{lineno}: mixed v/vt corner formats")
                    for k in range(1, len(vi) - 1):
                        face_indices.append((vi[0], vi[k], vi[k + 1]))
                        if ti:
                            face_uv_indices.append((ti[0], ti[k], ti[k + 1]))
                        else:
                            face_uv_indices.append(None)
            except MeshError:
                raise
            except (ValueError, IndexError) as exc:
                raise MeshError(f"{path}:{lineno}: malformed record {line!r}") from exc

    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    nv = verts.shape[0]
    faces = np.empty((len(face_indices), 3), dtype=np.int64)
    for i, tri in enumerate(face_indices):
        for j, idx in enumerate(tri):
            faces[i, j] = idx - 1 if idx > 0 else nv + idx
    uvs = None
    if face_uv_indices and all(t is not None for t in face_uv_indices):
        pool = np.asarray(uvs_pool, dtype=np.float64).reshape(-1, 2)
        nt = pool.shape[0]
        uvs = np.empty((len(face_uv_indices), 3, 2), dtype=np.float64)
        for i, tri in enumerate(face_uv_indices):
            for j, idx in enumerate(tri):
                row = idx - 1 if idx > 0 else nt + idx
                if row < 0 or row >= nt:
                    raise MeshError(f"{path}: uv index {idx} out of range")
                uvs[i, j] = pool[row]

    mesh = TriMesh(verts, faces, uvs)
    mesh.validate()
    return mesh


def save_obj(mesh: TriMesh, path, mtl_name: str = None, texture_name: str = None) -> None:
    """Write ASCII OBJ with 9-significant-digit floats; vt records if UVs exist."""
    with open(path, "w") as fh:
        if mtl_name is not None:
            fh.write(f"mtllib {mtl_name}\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if mesh.uvs is not None:
            if mtl_name is not None:
                fh.write("usemtl material0\n")
            for f in range(mesh.num_faces):
                for c in range(3):
                    uv = mesh.uvs[f, c]
                    fh.write(f"vt {uv[0]:.9g} {uv[1]:.9g}\n")
            for f in range(mesh.num_faces):
                i, j, k = mesh.faces[f] + 1
                t = 3 * f + 1
                fh.write(f"f {i}/{t} {j}/{t + 1} {k}/{t + 2}\n")
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    if mtl_name is not None and texture_name is not None:
        from pathlib import Path

        mtl_path = Path(path).parent / mtl_name
        with open(mtl_path, "w") as fh:
            fh.write("newmtl material0\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\n")
            fh.write(f"map_Kd {texture_name}\n")


# ---------------------------------------------------------------------------
# Differential quantities

def degenerate_area_eps(mesh: TriMesh) -> float:
    """Faces below this area contribute zero gradient instead of erroring."""
    return 1e-12 * mesh.bbox_diagonal() ** 2


def face_normals(mesh: TriMesh, normalized: bool = True) -> np.ndarray:
    c = mesh.face_corners()
    cr = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    if not normalized:
        return cr
    norm = np.linalg.norm(cr, axis=1, keepdims=True)
    out = np.zeros_like(cr)
    ok = norm[:, 0] > 0
    out[ok] = cr[ok] / norm[ok]
    return out


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted unit vertex normals; isolated vertices get a zero normal."""
    cr = face_normals(mesh, normalized=False)  # magnitude = 2 * area
    acc = np.zeros((mesh.num_vertices, 3), dtype=np.float64)
    for c in range(3):
        np.add.at(acc, mesh.faces[:, c], cr)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    ok = norm[:, 0] > 1e-300
    if not ok.all():
        logger.warning("%d vertices have zero normals (isolated or degenerate)", int((~ok).sum()))
    out = np.zeros_like(acc)
    out[ok] = acc[ok] / norm[ok]
    return out


def vertex_normals_backward(mesh: TriMesh, d_normals: np.ndarray) -> np.ndarray:
    """Chain gradients w.r.t. unit vertex normals back to vertex positions."""
    cr = face_normals(mesh, normalized=False)
    acc = np.zeros((mesh.num_vertices, 3), dtype=np.float64)
    for c in range(3):
        np.add.at(acc, mesh.faces[:, c], cr)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    ok = norm[:, 0] > 1e-300
    nhat = np.zeros_like(acc)
    nhat[ok] = acc[ok] / norm[ok]
    # d/d(acc) of normalize: (I - n n^T) / |acc|
    d_acc = np.zeros_like(acc)
    d_acc[ok] = (d_normals[ok] - nhat[ok] * np.sum(d_normals[ok] * nhat[ok], axis=1, keepdims=True)) / norm[ok]
    # Each face cross product feeds the accumulators of its three corners.
    g_face = d_acc[mesh.faces[:, 0]] + d_acc[mesh.faces[:, 1]] + d_acc[mesh.faces[:, 2]]
    return cross_product_backward(mesh, g_face)


def cross_product_backward(mesh: TriMesh, g_face: np.ndarray) -> np.ndarray:
    """Scatter d/d(cross(e1, e2)) gradients to the face corner positions."""
    c = mesh.face_corners()
    a, b, d = c[:, 0], c[:, 1], c[:, 2]
    dA = np.cross(b - d, g_face)
    dB = np.cross(d - a, g_face)
    dC = np.cross(a - b, g_face)
    out = np.zeros((mesh.num_vertices, 3), dtype=np.float64)
    np.add.at(out, mesh.faces[:, 0], dA)
    np.add.at(out, mesh.faces[:, 1], dB)
    np.add.at(out, mesh.faces[:, 2], dC)
    return out


# ---------------------------------------------------------------------------
# Boundary loops

def boundary_loops(mesh: TriMesh, adjacency: AdjacencyIndex = None) -> list[np.ndarray]:
    """Closed vertex loops of boundary edges; [] for a watertight mesh."""
    # Boundary edges keep the orientation of their single incident face, so
    # following head -> tail successor links walks each loop once.
    directed = set()
    for f in mesh.faces:
        directed.add((int(f[0]), int(f[1])))
        directed.add((int(f[1]), int(f[2])))
        directed.add((int(f[2]), int(f[0])))
    succ: dict[int, list[int]] = {}
    n_boundary = 0
    for u, v in directed:
        if (v, u) not in directed:
            succ.setdefault(u, []).append(v)
            n_boundary += 1
    for u, outs in succ.items():
        if len(outs) > 1:
            logger.warning("non-manifold boundary vertex %d visited by %d loops", u, len(outs))
            outs.sort()

    loops = []
    visited = set()
    for start in sorted(succ):
        for first in succ[start]:
            if (start, first) in visited:
                continue
            loop = [start]
            u, v = start, first
            while True:
                visited.add((u, v))
                loop.append(v)
                nxt = [w for w in succ.get(v, []) if (v, w) not in visited]
                if not nxt:
                    break
                u, v = v, nxt[0]
            if loop[-1] == loop[0]:
                loop.pop()
            loops.append(np.asarray(loop, dtype=np.int64))
    assert sum(len(l) for l in loops) == n_boundary
    return loops


# ---------------------------------------------------------------------------
# Surface sampling and Chamfer distance

def sample_surface(mesh: TriMesh, count: int, seed: int = 0) -> np.ndarray:
    """Area-uniform surface samples, deterministic for a given seed."""
    if count < 1:
        raise ValueError("sample count must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise MeshError("cannot sample a zero-area mesh")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(mesh.num_faces, size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    c = mesh.vertices[mesh.faces[face_idx]]
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return w0[:, None] * c[:, 0] + w1[:, None] * c[:, 1] + w2[:, None] * c[:, 2]


def point_mesh_distances(points: np.ndarray, mesh: TriMesh, bvh: TriangleBVH = None) -> np.ndarray:
    """Exact unsigned distance from each point to the mesh surface."""
    if bvh is None:
        bvh = TriangleBVH.build(mesh.vertices, mesh.faces)
    return bvh.closest_distances(np.ascontiguousarray(points, dtype=np.float64))


def chamfer_distance(a: TriMesh, b: TriMesh, samples: int = 5000, seed: int = 0) -> float:
    """Symmetric mean point-to-surface distance over area-uniform samples."""
    if a.num_faces == 0 or b.num_faces == 0:
        raise MeshError("chamfer_distance needs non-empty meshes")
    pa = sample_surface(a, samples, seed=seed)
    pb = sample_surface(b, samples, seed=seed + 1)
    da = point_mesh_distances(pa, b)
    db = point_mesh_distances(pb, a)
    return 0.5 * (float(da.mean()) + float(db.mean()))
