"""Pinhole cameras, look-at view rings, and the cameras.json interchange format.

Camera frame convention: x right, y down, z forward (depth positive in front).
Pixel (row i, col j) has center at continuous coordinates (u, v) = (j+0.5, i+0.5).
"""

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraView:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.ascontiguousarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.ascontiguousarray(self.translation, dtype=np.float64))
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, c = -R^T t."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def normal_encode_matrix(self) -> np.ndarray:
        """World -> normal-map frame (x right, y up, +z toward camera)."""
        R = self.rotation
        return np.stack([R[0], -R[1], -R[2]])

    def matrix4(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def project_points(view: CameraView, points: np.ndarray):
    """Pinhole projection of (N, 3) world points.

    Returns (uv (N, 2), depth (N,)); depth <= 0 flags points behind the camera,
    where the returned uv is not meaningful and the caller decides clipping.
    """
    pts = np.atleast_2d(points)
    cam = view.world_to_camera(pts)
    z = cam[:, 2]
    safe = np.where(np.abs(z) > 1e-300, z, 1e-300)
    u = view.fx * cam[:, 0] / safe + view.cx
    v = view.fy * cam[:, 1] / safe + view.cy
    return np.stack([u, v], axis=1), z


def project_point(view: CameraView, p) -> tuple[np.ndarray, float]:
    uv, z = project_points(view, np.asarray(p, dtype=np.float64)[None])
    return uv[0], float(z[0])


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) looking from eye to target, image upright w.r.t. up."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    fn = np.linalg.norm(f)
    if fn < 1e-12:
        raise ValueError("eye and target coincide")
    f = f / fn
    up = np.asarray(up, dtype=np.float64)
    s = np.cross(f, up)
    sn = np.linalg.norm(s)
    if sn < 1e-9:  # looking along up: pick any orthogonal fallback
        alt = np.array([1.0, 0.0, 0.0]) if abs(f[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        s = np.cross(f, alt)
        sn = np.linalg.norm(s)
    s = s / sn
    d = np.cross(f, s)
    R = np.stack([s, d, f])
    t = -R @ eye
    return R, t


def make_camera(
    eye,
    target,
    width: int = 800,
    height: int = 800,
    fov_y_deg: float = 45.0,
    up=(0.0, 1.0, 0.0),
) -> CameraView:
    R, t = look_at(eye, target, up)
    fy = 0.5 * height / np.tan(np.deg2rad(fov_y_deg) / 2)
    return CameraView(width, height, fx=fy, fy=fy, cx=width / 2, cy=height / 2, rotation=R, translation=t)


def make_view_ring(
    count: int = 24,
    target=(0.0, 0.0, 0.0),
    radius: float = 2.0,
    elevations_deg=(-10.0, 15.0),
    width: int = 800,
    height: int = 800,
    fov_y_deg: float = 45.0,
) -> list[CameraView]:
    """`count` cameras looking at `target`, evenly spaced in azimuth, cycling
    through `elevations_deg` by view index."""
    if count < 1:
        raise ValueError("view count must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    target = np.asarray(target, dtype=np.float64)
    elevations = np.atleast_1d(np.asarray(elevations_deg, dtype=np.float64))
    views = []
    for i in range(count):
        az = 2 * np.pi * i / count
        el = np.deg2rad(elevations[i % len(elevations)])
        eye = target + radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        views.append(make_camera(eye, target, width, height, fov_y_deg))
    return views


def ring_for_mesh(mesh, count: int = 24, radius_scale: float = 1.5, width: int = 800, height: int = 800, elevations_deg=(-10.0, 15.0)) -> list[CameraView]:
    """Default guidance ring: radius = radius_scale x bbox diagonal, centered on the bbox."""
    lo, hi = mesh.bbox()
    center = 0.5 * (lo + hi)
    radius = radius_scale * mesh.bbox_diagonal()
    return make_view_ring(count, center, radius, elevations_deg, width, height)


# ---------------------------------------------------------------------------
# cameras.json

def save_cameras(views: list[CameraView], path) -> None:
    records = []
    for v in views:
        records.append(
            {
                "width": v.width,
                "height": v.height,
                "fx": v.fx,
                "fy": v.fy,
                "cx": v.cx,
                "cy": v.cy,
                "world_to_camera": [float(x) for x in v.matrix4().reshape(-1)],
            }
        )
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)


def load_cameras(path) -> list[CameraView]:
    with open(path) as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise ValueError(f"{path}: expected a JSON array of cameras")
    views = []
    for i, r in enumerate(records):
        try:
            M = np.asarray(r["world_to_camera"], dtype=np.float64).reshape(4, 4)
            views.append(
                CameraView(
                    int(r["width"]), int(r["height"]),
                    float(r["fx"]), float(r["fy"]), float(r["cx"]), float(r["cy"]),
                    rotation=M[:3, :3], translation=M[:3, 3],
                )
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: camera {i}: {exc}") from exc
    return views
