"""Forward renderer for 3D Gaussian kernels.

Kernels are projected with the perspective EWA approximation, globally
sorted by camera-space depth of their means, and alpha-blended front to
back. Colors come from degree-3 spherical harmonics evaluated along the
camera-to-kernel direction. No optimization happens here; kernels arrive
from a PLY file in the de facto splat interchange layout.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

# real SH basis constants, degrees 0..3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

LOW_PASS = 0.3  # px^2 added to the projected covariance diagonal
ALPHA_CUTOFF_SIGMA = 3.0  # kernel evaluation radius in standard deviations
MASK_COVERAGE_CUTOFF = 0.5  # accumulated alpha above this marks foreground


@dataclass
class GaussianCloud:
    means: np.ndarray  # (K, 3)
    opacities: np.ndarray  # (K,) in [0, 1]
    scales: np.ndarray  # (K, 3) positive
    rotations: np.ndarray  # (K, 4) unit quaternions, (w, x, y, z)
    sh: np.ndarray  # (K, 3, 16) per-channel SH coefficients, degree 0..3

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float64)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64)
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacities must lie in [0, 1]")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("rotations must be unit quaternions")

    def __len__(self) -> int:
        return self.means.shape[0]

    def covariances(self) -> np.ndarray:
        """World covariances R diag(scale^2) R^T, SPD by construction."""
        R = quaternion_matrices(self.rotations)
        S2 = self.scales**2
        return np.einsum("kij,kj,klj->kil", R, S2, R)

    def subset(self, mask: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(
            self.means[mask], self.opacities[mask], self.scales[mask],
            self.rotations[mask], self.sh[mask],
        )


def quaternion_matrices(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def sh_eval(coeffs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """RGB from (3, 16) SH coefficients along a unit direction, clamped [0,1]."""
    out = sh_eval_many(coeffs[None], np.asarray(direction, dtype=np.float64)[None])
    return out[0]


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """(N, 16) real SH basis values, degrees 0..3."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    B = np.empty((dirs.shape[0], 16), dtype=np.float64)
    B[:, 0] = SH_C0
    B[:, 1] = -SH_C1 * y
    B[:, 2] = SH_C1 * z
    B[:, 3] = -SH_C1 * x
    B[:, 4] = SH_C2[0] * xy
    B[:, 5] = SH_C2[1] * yz
    B[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    B[:, 7] = SH_C2[3] * xz
    B[:, 8] = SH_C2[4] * (xx - yy)
    B[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    B[:, 10] = SH_C3[1] * xy * z
    B[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    B[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    B[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    B[:, 14] = SH_C3[5] * z * (xx - yy)
    B[:, 15] = SH_C3[6] * x * (xx - yy)
    return B


def sh_eval_many(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Batched SH evaluation with the interchange 0.5 DC offset."""
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("directions must be unit length")
    colors = np.einsum("ncb,nb->nc", coeffs, sh_basis(dirs)) + 0.5
    return np.clip(colors, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PLY I/O (binary little-endian splat interchange)

_PLY_FIELDS = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def load_gaussian_ply(path) -> GaussianCloud:
    """Read splat kernels: logistic-decoded opacity, exp-decoded scales."""
    with open(path, "rb") as fh:
        header = []
        while True:
            line = fh.readline().decode("ascii", errors="replace").strip()
            header.append(line)
            if line == "end_header":
                break
            if len(header) > 200:
                raise ValueError(f"{path}: PLY header not terminated")
        if header[0] != "ply":
            raise ValueError(f"{path}: not a PLY file")
        if not any(l.startswith("format binary_little_endian") for l in header):
            raise ValueError(f"{path}: expected binary_little_endian PLY")
        count = None
        props = []
        for line in header:
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line.startswith("element ") and count is not None and props:
                break
            elif line.startswith("property"):
                parts = line.split()
                if parts[1] != "float":
                    raise ValueError(f"{path}: unsupported property type {parts[1]}")
                props.append(parts[2])
        if count is None:
            raise ValueError(f"{path}: missing vertex element")
        for name in _PLY_FIELDS:
            if name not in props:
                raise ValueError(f"{path}: missing field {name}")
        data = np.frombuffer(fh.read(count * len(props) * 4), dtype="<f4")
        if data.size != count * len(props):
            raise ValueError(f"{path}: element count mismatch (expected {count})")
        data = data.reshape(count, len(props)).astype(np.float64)

    col = {name: data[:, i] for i, name in enumerate(props)}
    for name in _PLY_FIELDS:
        if not np.isfinite(col[name]).all():
            raise ValueError(f"{path}: NaN values in field {name}")
    means = np.stack([col["x"], col["y"], col["z"]], axis=1)
    opacities = 1.0 / (1.0 + np.exp(-col["opacity"]))
    scales = np.exp(np.stack([col[f"scale_{i}"] for i in range(3)], axis=1))
    rots = np.stack([col[f"rot_{i}"] for i in range(4)], axis=1)
    rots /= np.linalg.norm(rots, axis=1, keepdims=True)
    sh = np.zeros((count, 3, 16), dtype=np.float64)
    for c in range(3):
        sh[:, c, 0] = col[f"f_dc_{c}"]
        for b in range(15):  # f_rest is channel-major: index = channel*15 + band
            sh[:, c, b + 1] = col[f"f_rest_{c * 15 + b}"]
    return GaussianCloud(means, opacities, scales, rots, sh)


def save_gaussian_ply(cloud: GaussianCloud, path) -> None:
    K = len(cloud)
    data = np.empty((K, len(_PLY_FIELDS)), dtype="<f4")
    data[:, 0:3] = cloud.means
    data[:, 3:6] = cloud.sh[:, :, 0]
    for c in range(3):
        data[:, 6 + c * 15 : 6 + (c + 1) * 15] = cloud.sh[:, c, 1:]
    p = np.clip(cloud.opacities, 1e-9, 1 - 1e-9)
    data[:, 51] = np.log(p / (1 - p))
    data[:, 52:55] = np.log(cloud.scales)
    data[:, 55:59] = cloud.rotations
    with open(path, "wb") as fh:
        fh.write(b"ply\nformat binary_little_endian 1.0\n")
        fh.write(f"element vertex {K}\n".encode())
        for name in _PLY_FIELDS:
            fh.write(f"property float {name}\n".encode())
        fh.write(b"end_header\n")
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# Rendering

def project_cloud(cloud: GaussianCloud, view) -> tuple:
    """EWA projection: per-kernel 2D mean, 2D covariance (+ low pass), depth."""
    cam = cloud.means @ view.rotation.T + view.translation
    z = cam[:, 2]
    live = z > 1e-6
    zs = np.where(live, z, 1.0)
    uv = np.empty((len(cloud), 2), dtype=np.float64)
    uv[:, 0] = view.fx * cam[:, 0] / zs + view.cx
    uv[:, 1] = view.fy * cam[:, 1] / zs + view.cy
    J = np.zeros((len(cloud), 2, 3), dtype=np.float64)
    J[:, 0, 0] = view.fx / zs
    J[:, 0, 2] = -view.fx * cam[:, 0] / zs**2
    J[:, 1, 1] = view.fy / zs
    J[:, 1, 2] = -view.fy * cam[:, 1] / zs**2
    JW = J @ view.rotation
    cov2 = np.einsum("kij,kjl,kml->kim", JW, cloud.covariances(), JW)
    cov2[:, 0, 0] += LOW_PASS
    cov2[:, 1, 1] += LOW_PASS
    return uv, cov2, z, live


@njit(cache=True)
def _blend_kernel(order, uv, cov2, colors, alphas_base, height, width, cutoff_sq, bg, out, alpha_acc):
    T = np.ones((height, width), dtype=np.float64)
    for o in range(order.shape[0]):
        k = order[o]
        a = cov2[k, 0, 0]
        b = cov2[k, 0, 1]
        c = cov2[k, 1, 1]
        det = a * c - b * b
        if det <= 0.0:
            continue
        ia = c / det
        ib = -b / det
        ic = a / det
        # bbox radius from the largest eigenvalue
        mid = 0.5 * (a + c)
        lam = mid + np.sqrt(max(mid * mid - det, 0.0))
        r = np.sqrt(cutoff_sq * lam)
        ux, uy = uv[k, 0], uv[k, 1]
        jlo = max(0, int(np.floor(ux - r - 0.5)))
        jhi = min(width - 1, int(np.ceil(ux + r - 0.5)))
        ilo = max(0, int(np.floor(uy - r - 0.5)))
        ihi = min(height - 1, int(np.ceil(uy + r - 0.5)))
        op = alphas_base[k]
        for i in range(ilo, ihi + 1):
            dy = (i + 0.5) - uy
            for j in range(jlo, jhi + 1):
                t = T[i, j]
                if t < 1e-7:
                    continue
                dx = (j + 0.5) - ux
                q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                if q > cutoff_sq:
                    continue
                alpha = op * np.exp(-0.5 * q)
                w = t * alpha
                out[i, j, 0] += w * colors[k, 0]
                out[i, j, 1] += w * colors[k, 1]
                out[i, j, 2] += w * colors[k, 2]
                alpha_acc[i, j] += w
                T[i, j] = t * (1.0 - alpha)
    for i in range(height):
        for j in range(width):
            t = T[i, j]
            out[i, j, 0] += t * bg[0]
            out[i, j, 1] += t * bg[1]
            out[i, j, 2] += t * bg[2]


def _render(cloud: GaussianCloud, view, background):
    uv, cov2, z, live = project_cloud(cloud, view)
    centers = np.broadcast_to(view.center, (len(cloud), 3))
    dirs = cloud.means - centers
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = dirs / np.where(norms > 1e-300, norms, 1.0)
    colors = sh_eval_many(cloud.sh, dirs)
    idx = np.nonzero(live)[0]
    order = idx[np.argsort(z[idx], kind="stable")]
    out = np.zeros((view.height, view.width, 3), dtype=np.float64)
    alpha_acc = np.zeros((view.height, view.width), dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    _blend_kernel(order, uv, cov2, colors, cloud.opacities, view.height, view.width,
                  ALPHA_CUTOFF_SIGMA**2, bg, out, alpha_acc)
    return out, alpha_acc


def render_rgb(cloud: GaussianCloud, view, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """(H, W, 3) float image; residual transmittance multiplies the background."""
    if len(cloud) == 0:
        bg = np.asarray(background, dtype=np.float64)
        return np.broadcast_to(bg, (view.height, view.width, 3)).copy()
    return _render(cloud, view, background)[0]


def render_mask(cloud: GaussianCloud, view, threshold: float = 0.5) -> np.ndarray:
    """Binary coverage of kernels whose opacity passes the step threshold."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must lie in [0, 1]")
    keep = cloud.opacities >= threshold
    if not keep.any():
        return np.zeros((view.height, view.width), dtype=bool)
    sub = cloud.subset(keep)
    _, alpha_acc = _render(sub, view, (0.0, 0.0, 0.0))
    return alpha_acc > MASK_COVERAGE_CUTOFF


def render_alpha(cloud: GaussianCloud, view) -> np.ndarray:
    """Accumulated alpha in [0, 1] of the full cloud."""
    if len(cloud) == 0:
        return np.zeros((view.height, view.width), dtype=np.float64)
    return _render(cloud, view, (0.0, 0.0, 0.0))[1]
