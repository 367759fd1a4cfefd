"""Guidance bundles: multi-view RGB / mask / normal images with cameras.

One directory layout serves every guidance source (splat renders, external
estimators, or the synthetic oracle below), so the deformer never knows where
its supervision came from. Normal maps live in the per-view frame with x
right, y up and +z toward the camera, encoded as c = round(255 * (n+1)/2).
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cameras import CameraView, load_cameras, save_cameras
from .images import (bilinear_sample, load_mask_png, load_normal_png, load_rgb_png,
                     save_mask_png, save_normal_png, save_rgb_png)
from .mesh import TriMesh, vertex_normals
from .raster import rasterize_attributes

logger = logging.getLogger(__name__)


@dataclass
class GuidanceBundle:
    views: list  # list[CameraView]
    rgb: list  # per view (H, W, 3) float in [0,1]
    masks: list  # per view (H, W) bool
    normals: Optional[list] = None  # per view (H, W, 3) float in [-1,1], None for coarse-only
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.views)

    def validate(self) -> None:
        if not (len(self.views) == len(self.rgb) == len(self.masks)):
            raise ValueError("bundle arrays must have one entry per view")
        if self.normals is not None and len(self.normals) != len(self.views):
            raise ValueError("normal maps must match the view count")
        for i, view in enumerate(self.views):
            shape = (view.height, view.width)
            if self.rgb[i].shape[:2] != shape:
                raise ValueError(f"view {i}: rgb shape {self.rgb[i].shape[:2]} != camera {shape}")
            if self.masks[i].shape != shape:
                raise ValueError(f"view {i}: mask shape {self.masks[i].shape} != camera {shape}")
            if self.masks[i].dtype != np.bool_:
                raise ValueError(f"view {i}: mask must be boolean")
            if self.normals is not None and self.normals[i].shape[:2] != shape:
                raise ValueError(f"view {i}: normal map shape mismatch")


def save_bundle(bundle: GuidanceBundle, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_cameras(bundle.views, out / "cameras.json")
    for i in range(len(bundle)):
        save_rgb_png(bundle.rgb[i], out / f"view_{i:03d}_rgb.png")
        save_mask_png(bundle.masks[i], out / f"view_{i:03d}_mask.png")
        if bundle.normals is not None:
            save_normal_png(bundle.normals[i], out / f"view_{i:03d}_normal.png")
    with open(out / "provenance.json", "w") as fh:
        json.dump(bundle.provenance or {"source": "external"}, fh, indent=1)


def load_bundle(directory) -> GuidanceBundle:
    src = Path(directory)
    cam_path = src / "cameras.json"
    if not cam_path.exists():
        raise FileNotFoundError(f"missing {cam_path}")
    views = load_cameras(cam_path)
    rgb, masks = [], []
    normals = []
    have_normals = (src / "view_000_normal.png").exists()
    for i in range(len(views)):
        for kind in ("rgb", "mask") + (("normal",) if have_normals else ()):
            p = src / f"view_{i:03d}_{kind}.png"
            if not p.exists():
                raise FileNotFoundError(f"missing view file {p}")
        rgb.append(load_rgb_png(src / f"view_{i:03d}_rgb.png"))
        masks.append(load_mask_png(src / f"view_{i:03d}_mask.png"))
        if have_normals:
            normals.append(load_normal_png(src / f"view_{i:03d}_normal.png"))
    provenance = {}
    if (src / "provenance.json").exists():
        with open(src / "provenance.json") as fh:
            provenance = json.load(fh)
    return GuidanceBundle(views, rgb, masks, normals if have_normals else None, provenance)


# ---------------------------------------------------------------------------
# Synthetic guidance oracle

def synth_guidance(
    target: TriMesh,
    views: list,
    texture: Optional[np.ndarray] = None,
    vertex_colors: Optional[np.ndarray] = None,
    base_color=(0.75, 0.75, 0.75),
    ambient: float = 0.35,
    background=(1.0, 1.0, 1.0),
) -> GuidanceBundle:
    """Render a known mesh into a guidance bundle: hard-raster RGB with
    headlight shading (`ambient`=1 disables shading), hard coverage masks,
    and analytically exact camera-frame normal maps."""
    if texture is not None and target.uvs is None:
        raise ValueError("textured synthesis needs per-corner UVs on the target")
    vnormals = vertex_normals(target)
    rgb_list, mask_list, normal_list = [], [], []
    bg = np.asarray(background, dtype=np.float64)
    for view in views:
        rast = rasterize_attributes(target, view, np.concatenate([target.vertices, vnormals], axis=1))
        covered = rast.covered
        pos = rast.attrs[..., :3][covered]
        nrm = rast.attrs[..., 3:][covered]
        nn = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = nrm / np.where(nn > 1e-12, nn, 1.0)

        if texture is not None:
            uv = rast.interpolate_corners(target.uvs)[covered]
            albedo = bilinear_sample(texture, uv)
        elif vertex_colors is not None:
            albedo = rast.interpolate(vertex_colors)[covered]
        else:
            albedo = np.broadcast_to(np.asarray(base_color, dtype=np.float64), pos.shape).copy()

        d = pos - view.center
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        shade = ambient + (1.0 - ambient) * np.maximum(0.0, -np.sum(nrm * d, axis=1))
        img = np.empty(covered.shape + (3,), dtype=np.float64)
        img[:] = bg
        img[covered] = np.clip(albedo * shade[:, None], 0.0, 1.0)

        enc = view.normal_encode_matrix()
        nimg = np.zeros(covered.shape + (3,), dtype=np.float64)
        nimg[covered] = nrm @ enc.T

        rgb_list.append(img)
        mask_list.append(covered)
        normal_list.append(nimg)
    return GuidanceBundle(
        list(views), rgb_list, mask_list, normal_list,
        provenance={
            "source": "synthetic-oracle",
            "ambient": ambient,
            "textured": texture is not None,
        },
    )
