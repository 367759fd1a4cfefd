"""Quasi-static shell smoothing: zero-rest-angle hinge bending plus a 2D
Neo-Hookean membrane, minimized by line-searched gradient descent.

The rest state is the input geometry with every hinge's rest dihedral forced
to zero, so minimization flattens high-frequency wrinkles while the membrane
term pins the characteristic shape.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .mesh import AdjacencyIndex, TriMesh, build_adjacency

logger = logging.getLogger(__name__)


def hinge_angles(positions: np.ndarray, hinges: np.ndarray):
    """Dihedral deviation from flat per hinge (v0, v1 shared edge; v2, v3
    opposite corners). Returns (theta, valid, geometry cache)."""
    x0 = positions[hinges[:, 0]]
    x1 = positions[hinges[:, 1]]
    x2 = positions[hinges[:, 2]]
    x3 = positions[hinges[:, 3]]
    e = x1 - x0
    elen = np.linalg.norm(e, axis=1)
    m1 = np.cross(x1 - x0, x2 - x0)
    m2 = np.cross(x0 - x1, x3 - x1)
    l1 = np.linalg.norm(m1, axis=1)
    l2 = np.linalg.norm(m2, axis=1)
    valid = (elen > 1e-300) & (l1 > 1e-300) & (l2 > 1e-300)
    safe = lambda a: np.where(a > 1e-300, a, 1.0)
    ehat = e / safe(elen)[:, None]
    n1 = m1 / safe(l1)[:, None]
    n2 = m2 / safe(l2)[:, None]
    c = np.sum(n1 * n2, axis=1)
    s = np.sum(np.cross(n1, n2) * ehat, axis=1)
    theta = np.arctan2(s, c)
    theta[~valid] = 0.0
    return theta, valid, (x0, x1, x2, x3, ehat, n1, n2, l1, l2, c, s)


def hinge_angle_gradients(cache, valid: np.ndarray) -> np.ndarray:
    """d theta / d(x0, x1, x2, x3) per hinge, shape (H, 4, 3).

    Both face normals are orthogonal to the shared edge, so the edge-direction
    term of d(atan2) vanishes identically and only the normal terms remain.
    """
    x0, x1, x2, x3, ehat, n1, n2, l1, l2, c, s = cache
    g_n1 = c[:, None] * np.cross(n2, ehat) - s[:, None] * n2
    g_n2 = c[:, None] * np.cross(ehat, n1) - s[:, None] * n1
    # through normalization: (I - n n^T) / |m|
    g_m1 = (g_n1 - n1 * np.sum(g_n1 * n1, axis=1, keepdims=True)) / l1[:, None]
    g_m2 = (g_n2 - n2 * np.sum(g_n2 * n2, axis=1, keepdims=True)) / l2[:, None]
    # m1 = (x1-x0) x (x2-x0), m2 = (x0-x1) x (x3-x1)
    a1 = x1 - x0
    b1 = x2 - x0
    a2 = x0 - x1
    b2 = x3 - x1
    d1_a = np.cross(b1, g_m1)  # coefficient of d(a1)
    d1_b = np.cross(g_m1, a1)  # coefficient of d(b1)
    d2_a = np.cross(b2, g_m2)
    d2_b = np.cross(g_m2, a2)
    grads = np.zeros((cache[0].shape[0], 4, 3), dtype=np.float64)
    grads[:, 1] += d1_a
    grads[:, 0] -= d1_a
    grads[:, 2] += d1_b
    grads[:, 0] -= d1_b
    grads[:, 0] += d2_a
    grads[:, 1] -= d2_a
    grads[:, 3] += d2_b
    grads[:, 1] -= d2_b
    grads[~valid] = 0.0
    return grads


@dataclass
class ShellEnergyConfig:
    """Stiffnesses plus the captured rest state of one input mesh."""

    k_bend: float = 0.02
    youngs: float = 100.0
    poisson: float = 0.3
    tolerance: float = None  # gradient max-norm; default 1e-6 * k_bend * bbox
    max_iterations: int = 2000
    hinges: np.ndarray = field(default=None, repr=False)
    hinge_weights: np.ndarray = field(default=None, repr=False)  # rest |e| / h_e
    faces: np.ndarray = field(default=None, repr=False)
    dm_inv: np.ndarray = field(default=None, repr=False)  # (F, 2, 2)
    rest_areas: np.ndarray = field(default=None, repr=False)
    valid_faces: np.ndarray = field(default=None, repr=False)
    bbox_diagonal: float = 0.0

    def __post_init__(self):
        if self.k_bend <= 0 or self.youngs <= 0:
            raise ValueError("stiffnesses must be positive")
        if not (0.0 <= self.poisson < 0.5):
            raise ValueError("poisson ratio must be in [0, 0.5)")

    @property
    def mu(self) -> float:
        return self.youngs / (2.0 * (1.0 + self.poisson))

    @property
    def lam(self) -> float:
        # plane-stress Lame lambda
        return self.youngs * self.poisson / (1.0 - self.poisson**2)


def make_shell_config(
    mesh: TriMesh,
    adjacency: AdjacencyIndex = None,
    k_bend: float = 0.02,
    youngs: float = 100.0,
    poisson: float = 0.3,
    tolerance: float = None,
    max_iterations: int = 2000,
) -> ShellEnergyConfig:
    """Capture the rest state (current geometry, zero rest dihedrals)."""
    if adjacency is None:
        adjacency = build_adjacency(mesh)
    cfg = ShellEnergyConfig(
        k_bend=k_bend, youngs=youngs, poisson=poisson,
        tolerance=tolerance, max_iterations=max_iterations,
    )
    pos = mesh.vertices
    hinges = adjacency.hinges
    e = pos[hinges[:, 1]] - pos[hinges[:, 0]]
    elen = np.linalg.norm(e, axis=1)
    a1 = 0.5 * np.linalg.norm(np.cross(e, pos[hinges[:, 2]] - pos[hinges[:, 0]]), axis=1)
    a2 = 0.5 * np.linalg.norm(np.cross(e, pos[hinges[:, 3]] - pos[hinges[:, 0]]), axis=1)
    ok = (a1 + a2) > 1e-300
    weights = np.zeros_like(elen)
    weights[ok] = elen[ok] ** 2 / (a1 + a2)[ok]
    cfg.hinges = hinges
    cfg.hinge_weights = weights

    corners = mesh.face_corners()
    r1 = corners[:, 1] - corners[:, 0]
    r2 = corners[:, 2] - corners[:, 0]
    nrm = np.cross(r1, r2)
    area2 = np.linalg.norm(nrm, axis=1)
    valid = area2 > 1e-300
    t1 = np.zeros_like(r1)
    t1[valid] = r1[valid] / np.linalg.norm(r1[valid], axis=1, keepdims=True)
    t2 = np.cross(nrm, t1)
    t2n = np.linalg.norm(t2, axis=1, keepdims=True)
    t2[valid] = t2[valid] / t2n[valid]
    dm = np.zeros((mesh.num_faces, 2, 2))
    dm[:, 0, 0] = np.sum(r1 * t1, axis=1)
    dm[:, 0, 1] = np.sum(r2 * t1, axis=1)
    dm[:, 1, 1] = np.sum(r2 * t2, axis=1)
    det = dm[:, 0, 0] * dm[:, 1, 1]
    valid &= np.abs(det) > 1e-300
    dm_inv = np.zeros_like(dm)
    d = np.where(valid, det, 1.0)
    dm_inv[:, 0, 0] = dm[:, 1, 1] / d
    dm_inv[:, 0, 1] = -dm[:, 0, 1] / d
    dm_inv[:, 1, 1] = dm[:, 0, 0] / d
    cfg.faces = mesh.faces
    cfg.dm_inv = dm_inv
    cfg.rest_areas = 0.5 * area2
    cfg.valid_faces = valid
    cfg.bbox_diagonal = mesh.bbox_diagonal()
    if not valid.all():
        logger.warning("%d degenerate rest faces excluded from the membrane", int((~valid).sum()))
    return cfg


def bending_energy(mesh: TriMesh, config: ShellEnergyConfig):
    """Sum over hinges of k_b * theta^2 * |e|/h_e with rest-state weights."""
    pos = mesh.vertices
    theta, valid, cache = hinge_angles(pos, config.hinges)
    w = config.hinge_weights * valid
    energy = float(config.k_bend * np.sum(w * theta**2))
    coef = 2.0 * config.k_bend * w * theta
    grads = hinge_angle_gradients(cache, valid) * coef[:, None, None]
    grad = np.zeros_like(pos)
    for k in range(4):
        np.add.at(grad, config.hinges[:, k], grads[:, k])
    return energy, grad


def membrane_energy(mesh: TriMesh, config: ShellEnergyConfig):
    """2D Neo-Hookean energy of the in-plane deformation gradient vs rest."""
    pos = mesh.vertices
    f = config.faces
    a1 = pos[f[:, 1]] - pos[f[:, 0]]
    a2 = pos[f[:, 2]] - pos[f[:, 0]]
    ds = np.stack([a1, a2], axis=2)  # (F, 3, 2)
    F = ds @ config.dm_inv
    C = np.einsum("fik,fil->fkl", F, F)
    i1 = C[:, 0, 0] + C[:, 1, 1]
    det = C[:, 0, 0] * C[:, 1, 1] - C[:, 0, 1] * C[:, 1, 0]
    valid = config.valid_faces & (det > 1e-300)
    if (config.valid_faces & ~valid).any():
        return float("inf"), np.zeros_like(pos)
    lnj = 0.5 * np.log(np.where(valid, det, 1.0))
    mu, lam = config.mu, config.lam
    psi = 0.5 * mu * (i1 - 2.0) - mu * lnj + 0.5 * lam * lnj**2
    psi = np.where(valid, psi, 0.0)
    area = np.where(valid, config.rest_areas, 0.0)
    energy = float(np.sum(area * psi))

    cinv = np.zeros_like(C)
    d = np.where(valid, det, 1.0)
    cinv[:, 0, 0] = C[:, 1, 1] / d
    cinv[:, 0, 1] = -C[:, 0, 1] / d
    cinv[:, 1, 0] = -C[:, 1, 0] / d
    cinv[:, 1, 1] = C[:, 0, 0] / d
    fcinv = F @ cinv
    P = mu * F + (lam * lnj - mu)[:, None, None] * fcinv
    d_ds = area[:, None, None] * (P @ np.transpose(config.dm_inv, (0, 2, 1)))
    grad = np.zeros_like(pos)
    np.add.at(grad, f[:, 1], d_ds[:, :, 0])
    np.add.at(grad, f[:, 2], d_ds[:, :, 1])
    np.add.at(grad, f[:, 0], -(d_ds[:, :, 0] + d_ds[:, :, 1]))
    return energy, grad


def total_energy(mesh: TriMesh, config: ShellEnergyConfig):
    eb, gb = bending_energy(mesh, config)
    em, gm = membrane_energy(mesh, config)
    return eb + em, gb + gm


@dataclass
class SmootherReport:
    energies: list
    converged: bool
    iterations: int
    grad_norm: float
    line_search_failures: int


def smooth_quasistatic(mesh: TriMesh, config: ShellEnergyConfig = None, return_report: bool = False):
    """Descend the shell energy with a backtracking line search (Armijo).

    Accepted steps never increase the energy; stops at the gradient tolerance,
    the iteration cap, or after 20 consecutive line-search failures.
    """
    if config is None:
        config = make_shell_config(mesh)
    out = mesh.copy()
    tol = config.tolerance
    if tol is None:
        tol = 1e-6 * config.k_bend * config.bbox_diagonal
    energy, grad = total_energy(out, config)
    energies = [energy]
    gnorm = float(np.abs(grad).max())
    alpha = 1e-3 * config.bbox_diagonal / max(gnorm, 1e-12)
    prev_x = None
    prev_g = None
    failures = 0
    it = 0
    converged = gnorm < tol
    while it < config.max_iterations and not converged:
        it += 1
        # Barzilai-Borwein first guess, Armijo backtracking keeps it monotone.
        if prev_x is not None:
            dx = out.vertices - prev_x
            dg = grad - prev_g
            denom = float(np.sum(dg * dg))
            if denom > 1e-300:
                bb = float(np.sum(dx * dg)) / denom
                if bb > 0:
                    alpha = bb
        g2 = float(np.sum(grad * grad))
        accepted = False
        for _ in range(20):
            trial = TriMesh(out.vertices - alpha * grad, out.faces, out.uvs)
            e_new, g_new = total_energy(trial, config)
            if np.isfinite(e_new) and e_new <= energy - 1e-4 * alpha * g2:
                accepted = True
                break
            alpha *= 0.5
            failures += 1
        if accepted:
            prev_x = out.vertices
            prev_g = grad
            out = trial
            energy, grad = e_new, g_new
            energies.append(energy)
            failures = 0
            gnorm = float(np.abs(grad).max())
            converged = gnorm < tol
        else:
            logger.warning("smoother: 20 line-search failures, stopping at iteration %d", it)
            break
    report = SmootherReport(energies, converged, it, gnorm, failures)
    if not converged and failures < 20 and it >= config.max_iterations:
        logger.info("smoother: iteration cap reached, |grad|=%.3g", gnorm)
    det_check = membrane_energy(out, config)[0]
    if not np.isfinite(det_check):
        logger.warning("smoother: inverted membrane elements at solve end")
    if return_report:
        return out, report
    return out
