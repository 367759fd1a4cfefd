"""Two-stage garment deformation against multi-view guidance.

The coarse stage fits the silhouette (mask MSE) under normal-consistency and
Laplacian regularization. The fine stage adds shaded RGB, normal-map and
hole-preservation terms, jointly optimizing vertices and the neural shader.
Connectivity is never edited; all randomness is seeded; gradients are
accumulated in fixed view order so a rerun is bit-identical.
"""

import logging
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .guidance import GuidanceBundle
from .mesh import (AdjacencyIndex, TriMesh, build_adjacency, boundary_loops,
                   cross_product_backward, degenerate_area_eps, face_normals,
                   vertex_normals, vertex_normals_backward)
from .nets import AdamState, MLPParams, NumericalAbort, adam_step, shader_backward, shader_forward
from .raster import (RasterOutput, rasterize_attributes, rasterize_backward,
                     soft_silhouette, soft_silhouette_backward)

logger = logging.getLogger(__name__)


@dataclass
class StageWeights:
    w_mask: float = 1.0
    w_normal_consistency: float = 0.1
    w_laplacian: float = 40.0
    w_rgb: float = 0.0
    w_normal: float = 0.0
    w_hole: float = 0.0
    iterations: int = 500
    vertex_lr: Optional[float] = None  # None -> 1e-3 x bbox diagonal
    # Smoothness terms dominate early, then decay exponentially to this
    # fraction of their initial weight by the end of the stage.
    reg_decay: float = 0.02

    def __post_init__(self):
        for name in ("w_mask", "w_normal_consistency", "w_laplacian", "w_rgb", "w_normal", "w_hole"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def default_coarse_weights() -> StageWeights:
    return StageWeights(w_mask=1.0, w_normal_consistency=0.1, w_laplacian=40.0, iterations=500)


def default_fine_weights() -> StageWeights:
    return StageWeights(
        w_mask=1.0, w_normal_consistency=0.05, w_laplacian=20.0,
        w_rgb=1.0, w_normal=1.0, w_hole=10.0, iterations=1000,
    )


@dataclass
class DeformConfig:
    coarse: StageWeights = field(default_factory=default_coarse_weights)
    fine: StageWeights = field(default_factory=default_fine_weights)
    tau: float = 1.0  # silhouette temperature in px; halved at each third of the coarse stage
    band: float = 12.0  # silhouette distance band in px (at least ~10 tau to avoid saturation cliffs)
    seed: int = 0
    views_per_iter: int = 0  # 0 = all views every iteration, else round-robin subsets
    rgb_pixel_samples: int = 8192  # 0 = every covered pixel
    shader_lr: float = 1e-3
    warmup_frac: float = 0.1  # linear vertex-lr ramp over this fraction of each stage

    def as_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "DeformConfig":
        cfg = DeformConfig()
        for stage in ("coarse", "fine"):
            if stage in data:
                base = getattr(cfg, stage)
                for k, v in data[stage].items():
                    if not hasattr(base, k):
                        raise ValueError(f"unknown {stage} weight field {k!r}")
                    setattr(base, k, v)
        for k in ("tau", "band", "seed", "views_per_iter", "rgb_pixel_samples", "shader_lr"):
            if k in data:
                setattr(cfg, k, data[k])
        return cfg


@dataclass
class HoleMaskSet:
    """Per-view back-face masks frozen at the start of the fine stage."""

    views: list
    masks: list  # (H, W) bool per view

    def __post_init__(self):
        if len(self.views) != len(self.masks):
            raise ValueError("one hole mask per view required")
        for v, m in zip(self.views, self.masks):
            if m.shape != (v.height, v.width):
                raise ValueError("hole mask dimensions must match the camera")


# ---------------------------------------------------------------------------
# Individual losses (value + analytic gradients)

def loss_mask(mesh: TriMesh, bundle: GuidanceBundle, tau: float = 1.0, band: float = 12.0,
              adjacency: Optional[AdjacencyIndex] = None):
    """Mean over views of image-wide MSE between soft silhouette and guidance mask."""
    if adjacency is None:
        adjacency = build_adjacency(mesh)
    total = 0.0
    grad = np.zeros_like(mesh.vertices)
    for i, view in enumerate(bundle.views):
        sil = soft_silhouette(mesh, view, tau=tau, band=band, adjacency=adjacency)
        ref = bundle.masks[i].astype(np.float64)
        diff = sil.coverage - ref
        total += float(np.mean(diff**2))
        d_cov = 2.0 * diff / (diff.size * len(bundle))
        grad += soft_silhouette_backward(sil, d_cov)
    return total / len(bundle), grad


def loss_normal_consistency(mesh: TriMesh, adjacency: Optional[AdjacencyIndex] = None):
    """(1/N) sum over adjacent face pairs of (1 - n_a . n_b)^2."""
    if adjacency is None:
        adjacency = build_adjacency(mesh)
    pairs = adjacency.face_pairs
    if pairs.shape[0] == 0:
        return 0.0, np.zeros_like(mesh.vertices)
    m = face_normals(mesh, normalized=False)
    lens = np.linalg.norm(m, axis=1)
    eps = 2.0 * degenerate_area_eps(mesh)
    nhat = np.zeros_like(m)
    ok = lens > eps
    nhat[ok] = m[ok] / lens[ok, None]
    a, b = pairs[:, 0], pairs[:, 1]
    live = ok[a] & ok[b]
    c = np.sum(nhat[a] * nhat[b], axis=1)
    c = np.where(live, c, 1.0)
    N = pairs.shape[0]
    value = float(np.sum((1.0 - c) ** 2) / N)
    coef = 2.0 * (1.0 - c) * live / N
    d_nhat = np.zeros_like(m)
    np.add.at(d_nhat, a, -coef[:, None] * nhat[b])
    np.add.at(d_nhat, b, -coef[:, None] * nhat[a])
    d_m = np.zeros_like(m)
    d_m[ok] = (d_nhat[ok] - nhat[ok] * np.sum(d_nhat[ok] * nhat[ok], axis=1, keepdims=True)) / lens[ok, None]
    return value, cross_product_backward(mesh, d_m)


def loss_laplacian(mesh: TriMesh, adjacency: Optional[AdjacencyIndex] = None):
    """(1/M) sum over adjacent vertex pairs of w_jk |v_j - v_k|^2."""
    if adjacency is None:
        adjacency = build_adjacency(mesh)
    pairs = adjacency.vertex_pairs
    if pairs.shape[0] == 0:
        return 0.0, np.zeros_like(mesh.vertices)
    w = adjacency.laplacian_weights
    d = mesh.vertices[pairs[:, 0]] - mesh.vertices[pairs[:, 1]]
    M = pairs.shape[0]
    value = float(np.sum(w * np.sum(d * d, axis=1)) / M)
    coef = (2.0 / M) * w[:, None] * d
    grad = np.zeros_like(mesh.vertices)
    np.add.at(grad, pairs[:, 0], coef)
    np.add.at(grad, pairs[:, 1], -coef)
    return value, grad


def _surface_raster(mesh: TriMesh, view, vnormals: np.ndarray) -> RasterOutput:
    attrs = np.concatenate([mesh.vertices, vnormals], axis=1)
    return rasterize_attributes(mesh, view, attrs)


def _finish_surface_backward(mesh: TriMesh, rast: RasterOutput, d_attr_img: np.ndarray) -> np.ndarray:
    """Backward through the 6-channel (position, normal) surface raster."""
    d_attrs, d_verts = rasterize_backward(rast, d_attr_img)
    d_verts = d_verts + d_attrs[:, :3]
    d_verts += vertex_normals_backward(mesh, d_attrs[:, 3:])
    return d_verts


def loss_rgb(mesh: TriMesh, shader: MLPParams, bundle: GuidanceBundle,
             pixel_samples: int = 0, rng: Optional[np.random.Generator] = None,
             vnormals: Optional[np.ndarray] = None):
    """Mean-per-view L1 between the shaded surface and guidance RGB.

    Returns (value, d_vertices, (d_weights, d_biases)). Covered pixels only;
    `pixel_samples` > 0 subsamples them with the provided generator.
    """
    if vnormals is None:
        vnormals = vertex_normals(mesh)
    grad = np.zeros_like(mesh.vertices)
    dW = [np.zeros_like(w) for w in shader.weights]
    dB = [np.zeros_like(b) for b in shader.biases]
    total = 0.0
    for i, view in enumerate(bundle.views):
        rast = _surface_raster(mesh, view, vnormals)
        value = _rgb_view_term(mesh, shader, rast, bundle.rgb[i], view, 1.0 / len(bundle),
                               pixel_samples, rng, grad, dW, dB)
        total += value
    return total / len(bundle), grad, (dW, dB)


def _rgb_view_term(mesh, shader, rast, guide_img, view, view_weight, pixel_samples, rng, grad, dW, dB):
    covered = rast.covered
    px = np.argwhere(covered)
    if px.shape[0] == 0:
        return 0.0
    if pixel_samples and px.shape[0] > pixel_samples:
        if rng is None:
            raise ValueError("pixel subsampling needs a seeded generator")
        px = px[rng.choice(px.shape[0], size=pixel_samples, replace=False)]
    pos = rast.attrs[px[:, 0], px[:, 1], :3]
    nraw = rast.attrs[px[:, 0], px[:, 1], 3:]
    nlen = np.linalg.norm(nraw, axis=1, keepdims=True)
    nlen = np.where(nlen > 1e-12, nlen, 1.0)
    nhat = nraw / nlen
    u = pos - view.center
    ulen = np.linalg.norm(u, axis=1, keepdims=True)
    ulen = np.where(ulen > 1e-12, ulen, 1.0)
    dhat = u / ulen
    rgb, cache = shader_forward(shader, pos, nhat, dhat)
    target = guide_img[px[:, 0], px[:, 1]]
    diff = rgb - target
    value = float(np.mean(np.abs(diff)))
    d_rgb = np.sign(diff) / diff.size * view_weight
    (gw, gb), d_x, d_n, d_d = shader_backward(shader, cache, d_rgb)
    for k in range(len(dW)):
        dW[k] += gw[k]
        dB[k] += gb[k]
    # view direction normalization: u / |u|
    d_u = (d_d - dhat * np.sum(d_d * dhat, axis=1, keepdims=True)) / ulen
    d_pos = d_x + d_u
    d_nraw = (d_n - nhat * np.sum(d_n * nhat, axis=1, keepdims=True)) / nlen
    d_attr_img = np.zeros(rast.attrs.shape, dtype=np.float64)
    d_attr_img[px[:, 0], px[:, 1], :3] = d_pos
    d_attr_img[px[:, 0], px[:, 1], 3:] = d_nraw
    grad += _finish_surface_backward(mesh, rast, d_attr_img)
    return value


def loss_normal(mesh: TriMesh, bundle: GuidanceBundle, vnormals: Optional[np.ndarray] = None):
    """Mean-per-view L1 between rasterized camera-frame normals and guidance,
    both as vectors in [-1, 1], channel-averaged over covered pixels."""
    if bundle.normals is None:
        raise ValueError("bundle has no normal maps")
    if vnormals is None:
        vnormals = vertex_normals(mesh)
    grad = np.zeros_like(mesh.vertices)
    total = 0.0
    for i, view in enumerate(bundle.views):
        rast = _surface_raster(mesh, view, vnormals)
        total += _normal_view_term(mesh, rast, bundle.normals[i], view, 1.0 / len(bundle), grad)
    return total / len(bundle), grad


def _normal_view_term(mesh, rast, guide_n, view, view_weight, grad):
    covered = rast.covered
    px = np.argwhere(covered)
    if px.shape[0] == 0:
        return 0.0
    nraw = rast.attrs[px[:, 0], px[:, 1], 3:]
    enc = view.normal_encode_matrix()
    m = nraw @ enc.T
    mlen = np.linalg.norm(m, axis=1, keepdims=True)
    mlen = np.where(mlen > 1e-12, mlen, 1.0)
    nhat = m / mlen
    target = guide_n[px[:, 0], px[:, 1]]
    diff = nhat - target
    value = float(np.mean(np.abs(diff)))
    d_nhat = np.sign(diff) / diff.size * view_weight
    d_m = (d_nhat - nhat * np.sum(d_nhat * nhat, axis=1, keepdims=True)) / mlen
    d_nraw = d_m @ enc
    d_attr_img = np.zeros(rast.attrs.shape, dtype=np.float64)
    d_attr_img[px[:, 0], px[:, 1], 3:] = d_nraw
    grad += _finish_surface_backward(mesh, rast, d_attr_img)
    return value


def detect_hole_mask(mesh: TriMesh, view, rast: Optional[RasterOutput] = None,
                     vnormals: Optional[np.ndarray] = None) -> np.ndarray:
    """True where the visible surface faces away from the camera (a back face
    seen through an opening); background pixels are False."""
    if rast is None:
        if vnormals is None:
            vnormals = vertex_normals(mesh)
        rast = _surface_raster(mesh, view, vnormals)
    covered = rast.covered
    pos = rast.attrs[..., :3]
    nrm = rast.attrs[..., 3:]
    dot = np.sum(nrm * (pos - view.center), axis=2)
    return covered & (dot > 0.0)


def capture_hole_masks(mesh: TriMesh, views: list) -> HoleMaskSet:
    vnormals = vertex_normals(mesh)
    return HoleMaskSet(list(views), [detect_hole_mask(mesh, v, vnormals=vnormals) for v in views])


def loss_hole(mesh: TriMesh, holes: HoleMaskSet, vnormals: Optional[np.ndarray] = None):
    """Mean over views of image-wide MSE between current and reference hole
    masks. The binarization gradient is skipped (straight-through): the MSE
    gradient is applied to the visibility dot product directly."""
    if vnormals is None:
        vnormals = vertex_normals(mesh)
    grad = np.zeros_like(mesh.vertices)
    total = 0.0
    for i, view in enumerate(holes.views):
        rast = _surface_raster(mesh, view, vnormals)
        total += _hole_view_term(mesh, rast, holes.masks[i], view, 1.0 / len(holes.views), grad)
    return total / len(holes.views), grad


def _hole_view_term(mesh, rast, ref_mask, view, view_weight, grad):
    covered = rast.covered
    pos = rast.attrs[..., :3]
    nrm = rast.attrs[..., 3:]
    dot = np.sum(nrm * (pos - view.center), axis=2)
    current = (covered & (dot > 0.0)).astype(np.float64)
    ref = ref_mask.astype(np.float64)
    diff = current - ref
    value = float(np.mean(diff**2))
    d_dot = np.where(covered, 2.0 * diff / diff.size * view_weight, 0.0)
    d_attr_img = np.zeros(rast.attrs.shape, dtype=np.float64)
    d_attr_img[..., :3] = d_dot[..., None] * nrm
    d_attr_img[..., 3:] = d_dot[..., None] * (pos - view.center)
    grad += _finish_surface_backward(mesh, rast, d_attr_img)
    return value


# ---------------------------------------------------------------------------
# Stage loops

LOG_COLUMNS = ("stage", "iteration", "lr", "tau", "total", "mask", "normal_consistency",
               "laplacian", "rgb", "normal", "hole")


@dataclass
class DeformReport:
    log_rows: list = field(default_factory=list)
    boundary_loops_before: int = 0
    boundary_loops_after: int = 0


def _view_schedule(n_views: int, per_iter: int, iteration: int) -> list:
    if per_iter <= 0 or per_iter >= n_views:
        return list(range(n_views))
    start = (iteration * per_iter) % n_views
    return [(start + j) % n_views for j in range(per_iter)]


def _stage_loop(stage: str, mesh: TriMesh, bundle: GuidanceBundle, weights: StageWeights,
                config: DeformConfig, shader: Optional[MLPParams], holes: Optional[HoleMaskSet],
                tau_for_iter, report: DeformReport) -> TriMesh:
    out = mesh.copy()
    adjacency = build_adjacency(out)
    n_views = len(bundle)
    lr0 = weights.vertex_lr if weights.vertex_lr is not None else 1e-3 * out.bbox_diagonal()
    vert_adam = AdamState.for_params([out.vertices], lr=lr0)
    use_shader = shader is not None and weights.w_rgb > 0
    if use_shader:
        shader_adam = AdamState.for_params(shader.blocks, lr=config.shader_lr)
    needs_surface = weights.w_rgb > 0 or weights.w_normal > 0 or weights.w_hole > 0
    lr_scale = 1.0
    window: list = []
    prev_window_mean = None

    for it in range(weights.iterations):
        tau = tau_for_iter(it)
        rng = np.random.default_rng((config.seed + 1) * 1000003 + it)
        view_ids = _view_schedule(n_views, config.views_per_iter, it)
        vw = 1.0 / len(view_ids)
        terms = {"mask": 0.0, "rgb": 0.0, "normal": 0.0, "hole": 0.0}
        grad = np.zeros_like(out.vertices)
        if use_shader:
            dW = [np.zeros_like(w) for w in shader.weights]
            dB = [np.zeros_like(b) for b in shader.biases]
        vnormals = vertex_normals(out) if needs_surface else None

        for i in view_ids:
            view = bundle.views[i]
            rast = _surface_raster(out, view, vnormals) if needs_surface else rasterize_attributes(out, view)
            if weights.w_mask > 0:
                sil = soft_silhouette(out, view, tau=tau, band=config.band, adjacency=adjacency, raster=rast)
                diff = sil.coverage - bundle.masks[i]
                terms["mask"] += float(np.mean(diff**2)) * vw
                d_cov = 2.0 * diff / diff.size * (weights.w_mask * vw)
                grad += soft_silhouette_backward(sil, d_cov)
            if needs_surface:
                d_attr_img = np.zeros(rast.attrs.shape, dtype=np.float64)
                if weights.w_rgb > 0:
                    gtmp = np.zeros_like(grad)
                    v = _rgb_view_term(out, shader, rast, bundle.rgb[i], view, 1.0,
                                       config.rgb_pixel_samples, rng, gtmp, dW, dB)
                    terms["rgb"] += v * vw
                    grad += weights.w_rgb * vw * gtmp
                if weights.w_normal > 0:
                    gtmp = np.zeros_like(grad)
                    v = _normal_view_term(out, rast, bundle.normals[i], view, 1.0, gtmp)
                    terms["normal"] += v * vw
                    grad += weights.w_normal * vw * gtmp
                if weights.w_hole > 0:
                    gtmp = np.zeros_like(grad)
                    v = _hole_view_term(out, rast, holes.masks[i], view, 1.0, gtmp)
                    terms["hole"] += v * vw
                    grad += weights.w_hole * vw * gtmp

        frac = it / max(weights.iterations - 1, 1)
        reg_scale = weights.reg_decay**frac
        w_nc = weights.w_normal_consistency * reg_scale
        w_lap = weights.w_laplacian * reg_scale
        nc_val, nc_grad = (0.0, None)
        lap_val, lap_grad = (0.0, None)
        if w_nc > 0:
            nc_val, nc_grad = loss_normal_consistency(out, adjacency)
            grad += w_nc * nc_grad
        if w_lap > 0:
            lap_val, lap_grad = loss_laplacian(out, adjacency)
            grad += w_lap * lap_grad

        total = (weights.w_mask * terms["mask"] + w_nc * nc_val
                 + w_lap * lap_val + weights.w_rgb * terms["rgb"]
                 + weights.w_normal * terms["normal"] + weights.w_hole * terms["hole"])
        if not np.isfinite(total):
            raise NumericalAbort(f"{stage} stage: NaN loss at iteration {it}")

        # cosine-decayed vertex rate, halved when a 50-iteration window regresses
        cos_decay = 0.5 * (1.0 + np.cos(np.pi * it / max(weights.iterations, 1)))
        window.append(total)
        if len(window) == 50:
            mean_now = float(np.mean(window))
            if prev_window_mean is not None and mean_now > prev_window_mean:
                lr_scale *= 0.5
                logger.warning("%s stage: loss increased over a 50-iteration window at %d, halving lr", stage, it)
            prev_window_mean = mean_now
            window = []

        rate = lr0 * cos_decay * lr_scale
        adam_step(vert_adam, [out.vertices], [grad], names=["vertices"], lr=rate)
        if use_shader:
            for k in range(len(dW)):
                dW[k] *= weights.w_rgb * vw
                dB[k] *= weights.w_rgb * vw
            adam_step(shader_adam, shader.blocks, _interleave(dW, dB), names=shader.block_names())
        report.log_rows.append((stage, it, rate, tau, total, terms["mask"], nc_val,
                                lap_val, terms["rgb"], terms["normal"], terms["hole"]))
    return out


def _interleave(dW: list, dB: list) -> list:
    out = []
    for w, b in zip(dW, dB):
        out.append(w)
        out.append(b)
    return out


def coarse_stage(template: TriMesh, bundle: GuidanceBundle, weights: Optional[StageWeights] = None,
                 config: Optional[DeformConfig] = None, report: Optional[DeformReport] = None) -> TriMesh:
    """Contour optimization: Adam on w_M L_M + w_NC L_NC + w_L L_L."""
    config = config or DeformConfig()
    weights = weights or config.coarse
    report = report if report is not None else DeformReport()
    bundle.validate()
    loops_before = len(boundary_loops(template))
    report.boundary_loops_before = loops_before

    def tau_for_iter(it: int) -> float:
        third = max(weights.iterations, 1) / 3.0
        return config.tau * 0.5 ** min(int(it / third), 2)

    out = _stage_loop("coarse", template, bundle, weights, config, None, None, tau_for_iter, report)
    loops_after = len(boundary_loops(out))
    report.boundary_loops_after = loops_after
    if loops_after != loops_before:
        logger.warning("boundary loop count changed %d -> %d (should be impossible)", loops_before, loops_after)
    else:
        logger.info("coarse stage preserved %d boundary loops", loops_after)
    return out


def final_coarse_tau(config: DeformConfig) -> float:
    return config.tau * 0.25


def fine_stage(coarse: TriMesh, bundle: GuidanceBundle, shader: MLPParams,
               weights: Optional[StageWeights] = None, config: Optional[DeformConfig] = None,
               holes: Optional[HoleMaskSet] = None, report: Optional[DeformReport] = None):
    """Detail carving: joint Adam over vertices and shader parameters with
    mask, smoothness, RGB, normal and hole terms. Hole masks are captured
    from the input mesh before the first step unless provided."""
    config = config or DeformConfig()
    weights = weights or config.fine
    report = report if report is not None else DeformReport()
    bundle.validate()
    if weights.w_normal > 0 and bundle.normals is None:
        raise ValueError("fine stage needs normal maps in the bundle (or w_normal=0)")
    if holes is None:
        holes = capture_hole_masks(coarse, bundle.views)
    tau_fine = final_coarse_tau(config)
    out = _stage_loop("fine", coarse, bundle, weights, config, shader, holes,
                      lambda it: tau_fine, report)
    return out, shader


def deform(template: TriMesh, bundle: GuidanceBundle, shader: MLPParams,
           config: Optional[DeformConfig] = None):
    """Full coarse + fine pipeline; returns (mesh, shader, report, holes)."""
    config = config or DeformConfig()
    report = DeformReport()
    coarse = coarse_stage(template, bundle, config.coarse, config, report)
    holes = capture_hole_masks(coarse, bundle.views)
    fine, shader = fine_stage(coarse, bundle, shader, config.fine, config, holes, report)
    return fine, shader, report, holes
