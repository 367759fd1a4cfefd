"""Small neural networks with hand-derived reverse passes, plus Adam.

Two fixed architectures: the shading field mapping (position, normal, view
direction) to RGB, and the hash-encoded texture field mapping position to
RGB. No general autodiff; every backward here is written out and checked
against finite differences in the test suite.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


class NumericalAbort(RuntimeError):
    """Non-finite value encountered mid-optimization."""


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericalAbort(f"non-finite values in {name}")


def silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class MLPParams:
    """Fully-connected stack: hidden layers use SiLU, output uses sigmoid."""

    weights: list  # list of (in, out) float64
    biases: list  # list of (out,) float64
    enc_octaves: int = 0  # sin/cos octaves applied to the first 3 inputs
    enc_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    enc_scale: float = 1.0

    @property
    def blocks(self) -> list:
        out = []
        for k in range(len(self.weights)):
            out.append(self.weights[k])
            out.append(self.biases[k])
        return out

    def block_names(self) -> list:
        names = []
        for k in range(len(self.weights)):
            names.append(f"layer{k}.weight")
            names.append(f"layer{k}.bias")
        return names

    def set_blocks(self, blocks: list) -> None:
        n = len(self.weights)
        self.weights = [blocks[2 * k] for k in range(n)]
        self.biases = [blocks[2 * k + 1] for k in range(n)]


def make_mlp(sizes: list, seed: int = 0, enc_octaves: int = 0, enc_center=None, enc_scale: float = 1.0) -> MLPParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    center = np.zeros(3) if enc_center is None else np.asarray(enc_center, dtype=np.float64)
    return MLPParams(weights, biases, enc_octaves, center, float(enc_scale))


def positional_encode(x: np.ndarray, octaves: int, center: np.ndarray, scale: float):
    """[sin(2^k pi x̂), cos(2^k pi x̂)] for k < octaves on normalized coords."""
    xh = (x - center) / scale
    freqs = (2.0 ** np.arange(octaves)) * np.pi
    ang = xh[:, None, :] * freqs[None, :, None]  # (B, K, 3)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(x.shape[0], -1)
    return enc, ang


def positional_encode_backward(d_enc: np.ndarray, ang: np.ndarray, octaves: int, scale: float) -> np.ndarray:
    B = ang.shape[0]
    d = d_enc.reshape(B, octaves, 6)
    d_sin = d[:, :, :3]
    d_cos = d[:, :, 3:]
    freqs = (2.0 ** np.arange(octaves)) * np.pi
    d_ang = d_sin * np.cos(ang) - d_cos * np.sin(ang)
    return (d_ang * freqs[None, :, None]).sum(axis=1) / scale


def _mlp_forward(params: MLPParams, inputs: np.ndarray):
    acts = [inputs]
    pre = []
    h = inputs
    n = len(params.weights)
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        _check_finite(f"layer{k}.weight", W)
        _check_finite(f"layer{k}.bias", b)
        z = h @ W + b
        pre.append(z)
        h = sigmoid(z) if k == n - 1 else silu(z)
        acts.append(h)
    return h, (acts, pre)


def _mlp_backward(params: MLPParams, cache, d_out: np.ndarray):
    acts, pre = cache
    n = len(params.weights)
    d_weights = [None] * n
    d_biases = [None] * n
    g = d_out
    for k in range(n - 1, -1, -1):
        z = pre[k]
        if k == n - 1:
            s = sigmoid(z)
            dz = g * s * (1.0 - s)
        else:
            dz = g * silu_grad(z)
        d_weights[k] = acts[k].T @ dz
        d_biases[k] = dz.sum(axis=0)
        g = dz @ params.weights[k].T
    return d_weights, d_biases, g  # g = gradient w.r.t. the input row


def make_shader(seed: int = 0, hidden: int = 128, octaves: int = 6, center=None, scale: float = 1.0) -> MLPParams:
    """Shading field S(x, n, d): encoded position plus raw normal and view dir."""
    in_dim = 6 * octaves + 6
    return make_mlp([in_dim, hidden, hidden, 3], seed=seed, enc_octaves=octaves, enc_center=center, enc_scale=scale)


def shader_forward(params: MLPParams, x: np.ndarray, n: np.ndarray, d: np.ndarray):
    """RGB in [0,1] for query positions x with unit normals n and view dirs d."""
    enc, ang = positional_encode(x, params.enc_octaves, params.enc_center, params.enc_scale)
    inputs = np.concatenate([enc, n, d], axis=1)
    rgb, cache = _mlp_forward(params, inputs)
    return rgb, (cache, ang)


def shader_backward(params: MLPParams, cache, d_rgb: np.ndarray):
    mlp_cache, ang = cache
    d_weights, d_biases, d_in = _mlp_backward(params, mlp_cache, d_rgb)
    enc_dim = 6 * params.enc_octaves
    d_x = positional_encode_backward(d_in[:, :enc_dim], ang, params.enc_octaves, params.enc_scale)
    d_n = d_in[:, enc_dim : enc_dim + 3]
    d_d = d_in[:, enc_dim + 3 :]
    return (d_weights, d_biases), d_x, d_n, d_d


# ---------------------------------------------------------------------------
# Multiresolution hash grid

@dataclass
class HashGridParams:
    tables: list  # per level (T_l, F) float64
    resolutions: np.ndarray  # (L,) int64, strictly increasing
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    head: MLPParams

    @property
    def levels(self) -> int:
        return len(self.tables)

    @property
    def features(self) -> int:
        return self.tables[0].shape[1]


def make_hashgrid(
    bbox_min,
    bbox_max,
    levels: int = 12,
    features: int = 2,
    base_resolution: int = 16,
    finest_resolution: int = 2048,
    log2_table_size: int = 19,
    head_hidden: int = 64,
    seed: int = 0,
) -> HashGridParams:
    rng = np.random.default_rng(seed)
    growth = np.exp((np.log(finest_resolution) - np.log(base_resolution)) / max(levels - 1, 1))
    resolutions = np.unique(np.floor(base_resolution * growth ** np.arange(levels)).astype(np.int64))
    if resolutions.shape[0] != levels:  # collisions only at tiny level counts
        resolutions = base_resolution + np.arange(levels, dtype=np.int64)
    table_size = 1 << log2_table_size
    tables = []
    for r in resolutions:
        n = min((int(r) + 1) ** 3, table_size)
        tables.append(rng.uniform(-1e-4, 1e-4, size=(n, features)))
    head = make_mlp([levels * features, head_hidden, head_hidden, 3], seed=seed + 1)
    return HashGridParams(
        tables,
        resolutions,
        np.asarray(bbox_min, dtype=np.float64),
        np.asarray(bbox_max, dtype=np.float64),
        head,
    )


def _corner_indices(cell: np.ndarray, res: int, table_size: int) -> np.ndarray:
    """Table rows for the 8 cell corners; dense indexing when the level fits."""
    offs = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]],
        dtype=np.int64,
    )
    corner = cell[:, None, :] + offs[None, :, :]  # (B, 8, 3)
    n_dense = (res + 1) ** 3
    if n_dense <= table_size:
        return corner[..., 0] + (res + 1) * (corner[..., 1] + (res + 1) * corner[..., 2])
    h = corner.astype(np.uint64)
    mixed = (h[..., 0] * HASH_PRIMES[0]) ^ (h[..., 1] * HASH_PRIMES[1]) ^ (h[..., 2] * HASH_PRIMES[2])
    return (mixed % np.uint64(table_size)).astype(np.int64)


def netf_forward(params: HashGridParams, x: np.ndarray):
    """Texture field RGB for positions x (clamped into the field bbox)."""
    B = x.shape[0]
    span = params.bbox_max - params.bbox_min
    xh = np.clip((x - params.bbox_min) / span, 0.0, 1.0)
    feats = np.empty((B, params.levels * params.features), dtype=np.float64)
    level_cache = []
    for l, res in enumerate(params.resolutions):
        table = params.tables[l]
        _check_finite(f"hash_level{l}", table)
        g = xh * res
        cell = np.minimum(np.floor(g), res - 1).astype(np.int64)
        frac = g - cell
        idx = _corner_indices(cell, int(res), table.shape[0])  # (B, 8)
        w = _trilinear_weights(frac)  # (B, 8)
        gathered = table[idx]  # (B, 8, F)
        feats[:, l * params.features : (l + 1) * params.features] = (w[..., None] * gathered).sum(axis=1)
        level_cache.append((idx, w))
    rgb, mlp_cache = _mlp_forward(params.head, feats)
    return rgb, (level_cache, mlp_cache)


def _trilinear_weights(frac: np.ndarray) -> np.ndarray:
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    return np.stack(
        [gx * gy * gz, fx * gy * gz, gx * fy * gz, fx * fy * gz,
         gx * gy * fz, fx * gy * fz, gx * fy * fz, fx * fy * fz],
        axis=1,
    )


def netf_backward(params: HashGridParams, cache, d_rgb: np.ndarray):
    level_cache, mlp_cache = cache
    d_head_w, d_head_b, d_feats = _mlp_backward(params.head, mlp_cache, d_rgb)
    d_tables = []
    F = params.features
    for l, (idx, w) in enumerate(level_cache):
        dt = np.zeros_like(params.tables[l])
        contrib = w[..., None] * d_feats[:, None, l * F : (l + 1) * F]  # (B, 8, F)
        np.add.at(dt, idx.reshape(-1), contrib.reshape(-1, F))
        d_tables.append(dt)
    return d_tables, (d_head_w, d_head_b)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @staticmethod
    def for_params(params: list, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15) -> "AdamState":
        return AdamState(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(state: AdamState, params: list, grads: list, names: Optional[list] = None, lr: Optional[float] = None) -> list:
    """Bias-corrected Adam update, in place. Returns the parameter list."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    rate = state.lr if lr is None else lr
    for k, (p, g) in enumerate(zip(params, grads)):
        if not np.isfinite(g).all():
            label = names[k] if names else f"param{k}"
            raise NumericalAbort(f"NaN gradient for {label}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        p -= rate * mhat / (np.sqrt(vhat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Checkpointing

_MAGIC = b"GFNT"
_VERSION = 1


def save_netf(params: HashGridParams, path) -> None:
    """Versioned binary blob: magic, JSON spec header, raw float64 tables."""
    header = {
        "levels": params.levels,
        "features": params.features,
        "resolutions": [int(r) for r in params.resolutions],
        "table_rows": [t.shape[0] for t in params.tables],
        "bbox_min": params.bbox_min.tolist(),
        "bbox_max": params.bbox_max.tolist(),
        "head_sizes": [params.head.weights[0].shape[0]]
        + [w.shape[1] for w in params.head.weights],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for t in params.tables:
            fh.write(np.ascontiguousarray(t).tobytes())
        for W, b in zip(params.head.weights, params.head.biases):
            fh.write(np.ascontiguousarray(W).tobytes())
            fh.write(np.ascontiguousarray(b).tobytes())


def load_netf(path) -> HashGridParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a texture-field checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        F = header["features"]
        tables = []
        for rows in header["table_rows"]:
            tables.append(np.frombuffer(fh.read(rows * F * 8), dtype=np.float64).reshape(rows, F).copy())
        sizes = header["head_sizes"]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(np.frombuffer(fh.read(fan_in * fan_out * 8), dtype=np.float64).reshape(fan_in, fan_out).copy())
            biases.append(np.frombuffer(fh.read(fan_out * 8), dtype=np.float64).copy())
    head = MLPParams(weights, biases)
    return HashGridParams(
        tables,
        np.asarray(header["resolutions"], dtype=np.int64),
        np.asarray(header["bbox_min"], dtype=np.float64),
        np.asarray(header["bbox_max"], dtype=np.float64),
        head,
    )
