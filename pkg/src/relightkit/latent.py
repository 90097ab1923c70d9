"""Latent codes, the conditional displacement network, and generators.

The editing network is 18 independent single-hidden-layer MLPs (ReLU), one
per 512-wide latent block. Each block sees its own latent slice plus the
shared conditioning (450 env values, 3 Euler pose angles, the pose-change
flag p and optionally the illumination-change flag q) and emits an additive
displacement, so zero weights mean the identity edit.

Forward and backward are written out explicitly; backward is the exact
reverse-mode transpose of forward (ReLU subgradient at 0 taken as 0), which
the tests pin against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.fft import dct, idct

from .olat import CameraPose, StructuralError

N_BLOCKS = 18
BLOCK_DIM = 512
ENV_DIM = 450
POSE_DIM = 3


class CapabilityError(RuntimeError):
    """Generator lacks an operation (typically: no encoder)."""


def new_latent(n_blocks: int = N_BLOCKS, block_dim: int = BLOCK_DIM) -> np.ndarray:
    return np.zeros((n_blocks, block_dim), np.float32)


def check_latent(latent: np.ndarray, n_blocks: int, block_dim: int) -> np.ndarray:
    latent = np.asarray(latent)
    if latent.shape != (n_blocks, block_dim):
        raise StructuralError(
            f"latent shape {latent.shape}, expected {(n_blocks, block_dim)}"
        )
    if not np.isfinite(latent).all():
        raise ValueError("latent contains non-finite values")
    return latent


@dataclass
class ConditionVector:
    """Target illumination + pose conditioning shared by all blocks."""

    env: np.ndarray  # (env_dim,) nonnegative
    pose: CameraPose
    p: int
    q: Optional[int] = None

    def __post_init__(self):
        env = np.asarray(self.env, np.float64).reshape(-1)
        if not np.isfinite(env).all():
            raise ValueError("env vector must be finite")
        if (env < 0).any():
            raise ValueError("env vector must be nonnegative")
        if self.p not in (0, 1):
            raise ValueError(f"p must be 0 or 1, got {self.p}")
        if self.q is not None and self.q not in (0, 1):
            raise ValueError(f"q must be 0 or 1, got {self.q}")
        self.env = env

    def vector(self, use_q: bool, dtype=np.float32) -> np.ndarray:
        """Concatenated conditioning: env, yaw, pitch, roll, p[, q]."""
        tail = [self.p]
        if use_q:
            if self.q is None:
                raise ValueError("network expects the q flag but cond.q is None")
            tail.append(self.q)
        return np.concatenate(
            [self.env, self.pose.vector(), np.asarray(tail, np.float64)]
        ).astype(dtype)


@dataclass
class EditNetConfig:
    n_blocks: int = N_BLOCKS
    block_dim: int = BLOCK_DIM
    hidden_dim: int = BLOCK_DIM
    env_dim: int = ENV_DIM
    use_q: bool = False
    seed: int = 0
    dtype: str = "float32"

    @property
    def cond_dim(self) -> int:
        return self.env_dim + POSE_DIM + 1 + (1 if self.use_q else 0)

    @property
    def in_dim(self) -> int:
        return self.block_dim + self.cond_dim

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dict(vars(self))


def _carve_views(obj):
    """Split obj.flat into the w1/b1/w2/b2 views shared by params and grads."""
    cfg = obj.config
    if obj.flat.shape != (param_count(cfg),):
        raise StructuralError(
            f"flat buffer has {obj.flat.shape}, expected ({param_count(cfg)},)"
        )
    b, h, d, o = cfg.n_blocks, cfg.hidden_dim, cfg.in_dim, cfg.block_dim
    sizes = [b * h * d, b * h, b * o * h, b * o]
    offs = np.cumsum([0] + sizes)
    obj.w1 = obj.flat[offs[0]:offs[1]].reshape(b, h, d)
    obj.b1 = obj.flat[offs[1]:offs[2]].reshape(b, h)
    obj.w2 = obj.flat[offs[2]:offs[3]].reshape(b, o, h)
    obj.b2 = obj.flat[offs[3]:offs[4]].reshape(b, o)


@dataclass
class EditNetParams:
    """Per-block weights in one flat buffer with structured views.

    Views: w1 (B, hidden, in_dim), b1 (B, hidden), w2 (B, block, hidden),
    b2 (B, block). `version` bumps on every in-place update so stale forward
    caches can be detected.
    """

    config: EditNetConfig
    flat: np.ndarray
    version: int = 0
    w1: np.ndarray = field(init=False, repr=False)
    b1: np.ndarray = field(init=False, repr=False)
    w2: np.ndarray = field(init=False, repr=False)
    b2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        _carve_views(self)

    def copy(self) -> "EditNetParams":
        return EditNetParams(self.config, self.flat.copy(), self.version)


def param_count(cfg: EditNetConfig) -> int:
    b, h, d, o = cfg.n_blocks, cfg.hidden_dim, cfg.in_dim, cfg.block_dim
    return b * (h * d + h + o * h + o)


def init_params(cfg: EditNetConfig) -> EditNetParams:
    """He-style fan-in uniform for the hidden layer; output layer zeroed so
    step 0 is the identity edit."""
    rng = np.random.default_rng(cfg.seed)
    flat = np.zeros(param_count(cfg), cfg.np_dtype)
    params = EditNetParams(cfg, flat)
    bound = np.sqrt(6.0 / cfg.in_dim)
    params.w1[:] = rng.uniform(-bound, bound, size=params.w1.shape)
    return params


def random_params(cfg: EditNetConfig, scale: float = 0.1) -> EditNetParams:
    """Fully random parameters (nonzero output layer); used by tests."""
    rng = np.random.default_rng(cfg.seed)
    flat = (rng.standard_normal(param_count(cfg)) * scale).astype(cfg.np_dtype)
    return EditNetParams(cfg, flat)


@dataclass
class ForwardCache:
    x: np.ndarray  # (B, in_dim) block inputs
    z1: np.ndarray  # (B, hidden) pre-activations
    h: np.ndarray  # (B, hidden) post-ReLU
    params_version: int
    params_id: int


def forward(params: EditNetParams, source: np.ndarray, cond: ConditionVector):
    """Apply the displacement network: returns (edited latent, cache)."""
    cfg = params.config
    src = check_latent(source, cfg.n_blocks, cfg.block_dim)
    dtype = cfg.np_dtype
    src = src.astype(dtype, copy=False)
    cvec = cond.vector(cfg.use_q, dtype)
    if cvec.shape != (cfg.cond_dim,):
        raise StructuralError(
            f"cond vector is {cvec.shape}, expected ({cfg.cond_dim},)"
        )
    if not np.isfinite(cvec).all():
        raise ValueError("conditioning contains non-finite values")
    x = np.concatenate(
        [src, np.broadcast_to(cvec, (cfg.n_blocks, cfg.cond_dim))], axis=1
    ).astype(dtype)
    z1 = np.matmul(params.w1, x[:, :, None])[:, :, 0] + params.b1
    h = np.maximum(z1, 0)
    delta = np.matmul(params.w2, h[:, :, None])[:, :, 0] + params.b2
    out = src + delta
    cache = ForwardCache(x, z1, h, params.version, id(params))
    return out, cache


@dataclass
class EditNetGrads:
    config: EditNetConfig
    flat: np.ndarray
    w1: np.ndarray = field(init=False, repr=False)
    b1: np.ndarray = field(init=False, repr=False)
    w2: np.ndarray = field(init=False, repr=False)
    b2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        _carve_views(self)


def zero_grads(cfg: EditNetConfig) -> EditNetGrads:
    return EditNetGrads(cfg, np.zeros(param_count(cfg), cfg.np_dtype))


def backward(params: EditNetParams, cache: ForwardCache, grad_out: np.ndarray):
    """Exact reverse-mode gradients of `forward`.

    Returns (grads, d_source, d_cond) where d_cond covers the concatenated
    conditioning vector (env, pose, p[, q]) summed over blocks.
    """
    cfg = params.config
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise StructuralError("forward cache is stale for these parameters")
    g = np.asarray(grad_out, cfg.np_dtype)
    if g.shape != (cfg.n_blocks, cfg.block_dim):
        raise StructuralError(f"grad_out shape {g.shape} mismatches latent")

    grads = zero_grads(cfg)
    grads.b2[:] = g
    np.multiply(g[:, :, None], cache.h[:, None, :], out=grads.w2)
    dh = np.matmul(params.w2.transpose(0, 2, 1), g[:, :, None])[:, :, 0]
    dz1 = dh * (cache.z1 > 0)  # ReLU subgradient at 0 is 0
    grads.b1[:] = dz1
    np.multiply(dz1[:, :, None], cache.x[:, None, :], out=grads.w1)
    dx = np.matmul(params.w1.transpose(0, 2, 1), dz1[:, :, None])[:, :, 0]
    d_source = g + dx[:, : cfg.block_dim]
    d_cond = dx[:, cfg.block_dim:].sum(axis=0)
    return grads, d_source, d_cond


# --- generators -------------------------------------------------------------


class Generator:
    """Decoder from latent space to images, optionally invertible.

    decode() wraps the raster as a float32 HdrImage; decode_array() keeps the
    computation dtype for gradient checks.
    """

    has_encoder = False
    has_pullback = False  # analytic transpose-Jacobian of decode available
    latent_shape = (N_BLOCKS, BLOCK_DIM)
    native_size = None

    def decode_array(self, latent: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, latent: np.ndarray):
        from .radiometry import HdrImage

        return HdrImage(self.decode_array(latent).astype(np.float32))

    def encode(self, image) -> np.ndarray:
        raise CapabilityError("generator has no encoder")

    def pullback(self, image_grad: np.ndarray) -> np.ndarray:
        """Apply the transpose-Jacobian of decode to an image-space gradient."""
        raise NotImplementedError


class ToyGenerator(Generator):
    """Exactly invertible linear stand-in for a pretrained image generator.

    decode(L) = T(vec(L)) + bias where T places the latent coordinates at
    seeded random positions/signs of an orthonormal cosine-transform spectrum.
    Columns are orthonormal, so encode = transpose is an exact left inverse
    and pullback = encode without the bias shift.
    """

    has_encoder = True
    has_pullback = True

    def __init__(self, seed: int = 0, image_size: int = 64,
                 n_blocks: int = N_BLOCKS, block_dim: int = BLOCK_DIM,
                 bias: float = 0.5, dtype=np.float32):
        n_lat = n_blocks * block_dim
        n_img = image_size * image_size * 3
        if n_img < n_lat:
            raise ValueError(
                f"image {image_size}x{image_size} too small for {n_lat} latents"
            )
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.latent_shape = (n_blocks, block_dim)
        self.native_size = image_size
        self.n_latent = n_lat
        self.n_image = n_img
        self.bias = float(bias)
        self.dtype = np.dtype(dtype)
        self._slots = rng.permutation(n_img)[:n_lat]  # spectrum positions
        self._signs = rng.choice(np.array([-1.0, 1.0]), size=n_lat)

    def decode_array(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent)
        if latent.shape != self.latent_shape:
            raise StructuralError(
                f"latent shape {latent.shape}, expected {self.latent_shape}"
            )
        spec = np.zeros(self.n_image, np.float64)
        spec[self._slots] = latent.reshape(-1).astype(np.float64) * self._signs
        img = idct(spec, norm="ortho") + self.bias
        s = self.native_size
        out_dtype = latent.dtype if latent.dtype == np.float64 else self.dtype
        return img.reshape(s, s, 3).astype(out_dtype)

    def encode(self, image) -> np.ndarray:
        px = (image.pixels if hasattr(image, "pixels") else np.asarray(image))
        if px.shape != (self.native_size, self.native_size, 3):
            raise StructuralError(
                f"image shape {px.shape}, expected "
                f"({self.native_size}, {self.native_size}, 3)"
            )
        spec = dct(px.reshape(-1).astype(np.float64) - self.bias, norm="ortho")
        lat = spec[self._slots] * self._signs
        out_dtype = px.dtype if px.dtype == np.float64 else self.dtype
        return lat.reshape(self.latent_shape).astype(out_dtype)

    def pullback(self, image_grad: np.ndarray) -> np.ndarray:
        g = np.asarray(image_grad)
        spec = dct(g.reshape(-1).astype(np.float64), norm="ortho")
        lat = spec[self._slots] * self._signs
        out_dtype = g.dtype if g.dtype == np.float64 else self.dtype
        return lat.reshape(self.latent_shape).astype(out_dtype)


def edit(generator: Generator, params: EditNetParams, source, cond: ConditionVector):
    """Full edit: (latent or image) + target conditions -> rendered image."""
    if hasattr(source, "pixels") or (
        isinstance(source, np.ndarray) and source.ndim == 3
    ):
        if not generator.has_encoder:
            raise CapabilityError("image input requires an encoder-capable generator")
        latent = generator.encode(source)
    else:
        latent = np.asarray(source)
    out, _ = forward(params, latent, cond)
    return generator.decode(out)
