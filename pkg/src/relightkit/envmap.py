"""Lat-long environment maps, the discrete light basis, and resampling.

Direction convention (y-up, fixed everywhere): for azimuth phi = 2*pi*u and
polar angle theta = pi*v measured from +Y,

    d = (sin(theta)*cos(phi), cos(theta), sin(theta)*sin(phi))

so v=0 is the north pole (0,1,0) and (u=0, v=0.5) is (1,0,0).
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .radiometry import HdrImage, _as_pixels

FULL_SPHERE = 4.0 * np.pi


@dataclass
class LatLongEnvMap:
    """Equirectangular radiance map; u wraps in azimuth, v spans pole to pole."""

    image: HdrImage

    def __post_init__(self):
        if self.image.width < 2 or self.image.height < 1:
            raise ValueError("environment map must be at least 2x1")

    @property
    def pixels(self) -> np.ndarray:
        return self.image.pixels


@dataclass
class LightBasis:
    """Discrete light directions with per-light cell solid angles."""

    directions: np.ndarray  # (n, 3) float64 unit vectors
    solid_angles: np.ndarray  # (n,) float64 steradians

    def __post_init__(self):
        d = np.asarray(self.directions, np.float64)
        w = np.asarray(self.solid_angles, np.float64)
        if d.ndim != 2 or d.shape[1] != 3 or d.shape[0] < 2:
            raise ValueError(f"bad directions shape {d.shape}")
        if w.shape != (d.shape[0],):
            raise ValueError("solid_angles length must match directions")
        norms = np.linalg.norm(d, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("directions must be unit length (tol 1e-6)")
        if (w <= 0).any() or not np.isfinite(w).all():
            raise ValueError("solid angles must be positive and finite")
        # pairwise distinct: no two cells may share a direction
        dots = d @ d.T
        np.fill_diagonal(dots, -1.0)
        if dots.max() > 1.0 - 1e-12:
            raise ValueError("duplicate light directions")
        self.directions = d
        self.solid_angles = w

    def __len__(self) -> int:
        return self.directions.shape[0]

    def fingerprint(self) -> str:
        return hashlib.sha1(
            self.directions.tobytes() + self.solid_angles.tobytes()
        ).hexdigest()


@dataclass
class LightWeights:
    """Per-light RGB radiant intensity integrated over each light's cell."""

    values: np.ndarray  # (n, 3) float64, nonnegative

    def __post_init__(self):
        v = np.asarray(self.values, np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"bad weights shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("weights must be finite")
        if (v < 0).any():
            raise ValueError("weights must be nonnegative")
        self.values = v

    def __len__(self) -> int:
        return self.values.shape[0]

    def vector(self) -> np.ndarray:
        """Flatten light-major: light 0 r,g,b; light 1 r,g,b; ..."""
        return self.values.reshape(-1)

    @classmethod
    def from_vector(cls, vec) -> "LightWeights":
        vec = np.asarray(vec, np.float64)
        if vec.ndim != 1 or vec.size % 3 != 0:
            raise ValueError(f"flat weights must be length 3n, got {vec.shape}")
        return cls(vec.reshape(-1, 3))


def fibonacci_basis(n: int = 150) -> LightBasis:
    """Spherical-Fibonacci lattice with uniform cell solid angles 4*pi/n."""
    if n < 2:
        raise ValueError(f"need at least 2 lights, got {n}")
    i = np.arange(n, dtype=np.float64)
    y = 1.0 - 2.0 * (i + 0.5) / n  # even steps in cos(theta), poles excluded
    r = np.sqrt(1.0 - y * y)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * i
    dirs = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return LightBasis(dirs, np.full(n, FULL_SPHERE / n))


def load_basis(text: str) -> LightBasis:
    """Parse a light-basis file: per line ``x y z [omega]``, ``#`` comments.

    If omega is omitted on every line, cells get the uniform 4*pi/n.
    Mixing lines with and without omega is rejected.
    """
    dirs, omegas = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ValueError(f"line {lineno}: expected 'x y z [omega]'")
        try:
            nums = [float(p) for p in parts]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: non-numeric field") from exc
        dirs.append(nums[:3])
        omegas.append(nums[3] if len(nums) == 4 else None)
    if not dirs:
        raise ValueError("empty basis file")
    has_omega = [o is not None for o in omegas]
    if any(has_omega) and not all(has_omega):
        raise ValueError("either all lines carry omega or none do")
    n = len(dirs)
    w = np.array(omegas, np.float64) if all(has_omega) else np.full(n, FULL_SPHERE / n)
    return LightBasis(np.asarray(dirs, np.float64), w)


def format_basis(basis: LightBasis) -> str:
    lines = ["# light basis: x y z omega_steradians"]
    for d, w in zip(basis.directions, basis.solid_angles):
        lines.append(f"{d[0]:.17g} {d[1]:.17g} {d[2]:.17g} {w:.17g}")
    return "\n".join(lines) + "\n"


def uv_to_direction(u, v) -> np.ndarray:
    """Map (u, v) in [0,1) x [0,1] to a unit direction (y-up convention)."""
    u = np.asarray(u, np.float64)
    v = np.asarray(v, np.float64)
    theta = np.pi * v
    phi = 2.0 * np.pi * u
    st = np.sin(theta)
    return np.stack(
        [st * np.cos(phi), np.cos(theta), st * np.sin(phi)], axis=-1
    )


def direction_to_uv(d) -> tuple:
    """Inverse of uv_to_direction away from the poles."""
    d = np.asarray(d, np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.abs(norm - 1.0).max() > 1e-4:
        raise ValueError("direction must be unit length (tol 1e-4)")
    theta = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
    phi = np.arctan2(d[..., 2], d[..., 0])
    u = (phi / (2.0 * np.pi)) % 1.0
    v = theta / np.pi
    return u, v


def texel_directions(width: int, height: int) -> np.ndarray:
    """(H, W, 3) unit directions at texel centers."""
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return uv_to_direction(uu, vv)


def texel_solid_angles(width: int, height: int) -> np.ndarray:
    """(H, W) solid angle of each texel: (2pi/W)(pi/H) sin(theta)."""
    v = (np.arange(height) + 0.5) / height
    sin_theta = np.sin(np.pi * v)
    cell = (2.0 * np.pi / width) * (np.pi / height)
    return np.repeat((cell * sin_theta)[:, None], width, axis=1)


# texel -> nearest light assignment depends only on (W, H, basis); cache it
_ASSIGN_CACHE: dict = {}
_ASSIGN_LOCK = threading.Lock()
_ASSIGN_CACHE_MAX = 8


def _texel_assignment(width: int, height: int, basis: LightBasis) -> np.ndarray:
    key = (width, height, basis.fingerprint())
    with _ASSIGN_LOCK:
        if key in _ASSIGN_CACHE:
            return _ASSIGN_CACHE[key]
    dirs = texel_directions(width, height).reshape(-1, 3)
    assign = np.empty(dirs.shape[0], np.int64)
    # chunked argmax keeps the (texels x lights) dot matrix small
    step = 65536
    for i in range(0, dirs.shape[0], step):
        assign[i:i + step] = np.argmax(dirs[i:i + step] @ basis.directions.T, axis=1)
    with _ASSIGN_LOCK:
        if len(_ASSIGN_CACHE) >= _ASSIGN_CACHE_MAX:
            _ASSIGN_CACHE.pop(next(iter(_ASSIGN_CACHE)))
        _ASSIGN_CACHE[key] = assign
    return assign


def resample_to_basis(env: LatLongEnvMap, basis: LightBasis) -> LightWeights:
    """Integrate env radiance over each light's spherical Voronoi cell.

    Every texel contributes radiance * dOmega to exactly one light (nearest
    direction), so summed weights partition the texelwise sphere integral.
    """
    px = env.pixels
    h, w = px.shape[:2]
    assign = _texel_assignment(w, h, basis)
    domega = texel_solid_angles(w, h).reshape(-1)
    contrib = px.reshape(-1, 3).astype(np.float64) * domega[:, None]
    n = len(basis)
    weights = np.stack(
        [np.bincount(assign, weights=contrib[:, c], minlength=n) for c in range(3)],
        axis=1,
    )
    return LightWeights(weights)


def rotate_env(env: LatLongEnvMap, yaw: float) -> LatLongEnvMap:
    """Rotate about +Y: output at azimuth phi samples input at phi - yaw.

    Bilinear in u with wraparound; rows (polar angle) are unchanged.
    """
    px = env.pixels
    h, w = px.shape[:2]
    x = np.arange(w, dtype=np.float64)
    src = x - yaw / (2.0 * np.pi) * w
    x0 = np.floor(src)
    frac = src - x0
    i0 = (x0.astype(np.int64)) % w
    i1 = (i0 + 1) % w
    out = px[:, i0, :] * (1.0 - frac)[None, :, None] + px[:, i1, :] * frac[None, :, None]
    return LatLongEnvMap(HdrImage(out.astype(np.float32)))


def constant_env(value, width: int = 16, height: int = 8) -> LatLongEnvMap:
    """Uniform radiance map; value is a scalar or per-channel triple."""
    px = np.empty((height, width, 3), np.float32)
    px[:] = np.asarray(value, np.float32)
    return LatLongEnvMap(HdrImage(px))
