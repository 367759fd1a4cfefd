"""8-bit PNG I/O and small image utilities shared by guidance and texturing."""

import numpy as np
from PIL import Image


def save_rgb_png(img: np.ndarray, path) -> None:
    """Float [0,1] (H, W, 3) -> 8-bit RGB PNG."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_rgb_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_mask_png(mask: np.ndarray, path) -> None:
    """Boolean (H, W) -> 8-bit gray PNG, 255 = foreground."""
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 255))):
        raise ValueError(f"{path}: mask is not binary (values {values[:8].tolist()})")
    return arr == 255


def save_normal_png(normals: np.ndarray, path) -> None:
    """Unit normals in [-1,1] -> c = round(255 * (n+1)/2)."""
    enc = np.clip(np.round(255.0 * (np.asarray(normals) + 1.0) / 2.0), 0, 255).astype(np.uint8)
    Image.fromarray(enc, mode="RGB").save(path)


def load_normal_png(path, renormalize: bool = False) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    n = 2.0 * arr / 255.0 - 1.0
    if renormalize:
        norm = np.linalg.norm(n, axis=2, keepdims=True)
        n = np.where(norm > 1e-9, n / np.where(norm > 1e-9, norm, 1.0), n)
    return n


def bilinear_sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at UV in [0,1]^2; v=0 is the bottom row, clamped edges."""
    H, W = image.shape[:2]
    u = np.clip(uv[:, 0], 0.0, 1.0) * W - 0.5
    v = (1.0 - np.clip(uv[:, 1], 0.0, 1.0)) * H - 0.5
    j0 = np.clip(np.floor(u).astype(np.int64), 0, W - 1)
    i0 = np.clip(np.floor(v).astype(np.int64), 0, H - 1)
    j1 = np.minimum(j0 + 1, W - 1)
    i1 = np.minimum(i0 + 1, H - 1)
    fu = np.clip(u - j0, 0.0, 1.0)[:, None]
    fv = np.clip(v - i0, 0.0, 1.0)[:, None]
    top = image[i0, j0] * (1 - fu) + image[i0, j1] * fu
    bot = image[i1, j0] * (1 - fu) + image[i1, j1] * fu
    return top * (1 - fv) + bot * fv


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray = None) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, optionally masked."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if mask is not None:
        diff = diff[mask]
    mse = float(np.mean(diff**2))
    if mse <= 0:
        return float("inf")
    return -10.0 * np.log10(mse)
