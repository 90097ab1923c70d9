"""One-light-at-a-time stacks, relighting, synthetic fixtures and datasets.

Relighting is the weighted sum of the 150 per-light images with the resampled
environment weights; light transport linearity makes this exact for distant
illumination.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envmap as em
from ._kernels import accumulate_weighted
from .radiometry import HdrImage, read_radiance_hdr, write_radiance_hdr

N_LIGHTS = 150


def _wrap_angle(a: float) -> float:
    """Normalize to (-pi, pi]."""
    r = math.remainder(float(a), 2.0 * math.pi)
    return math.pi if r == -math.pi else r


@dataclass(frozen=True)
class CameraPose:
    """Intrinsic Y-X-Z Euler rotation (yaw, then pitch, then roll), radians."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        for name in ("yaw", "pitch", "roll"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, _wrap_angle(v))

    def vector(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll], np.float64)

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation matrix."""
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
        rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
        return ry @ rx @ rz


class StructuralError(ValueError):
    """Shapes or counts inside a stack/weights pairing do not line up."""


@dataclass
class OlatStack:
    """All per-light images of one identity from one camera.

    images is (N_LIGHTS, H, W, 3) float32, index-aligned with the LightBasis.
    """

    identity_id: str
    camera_id: str
    pose: CameraPose
    images: np.ndarray

    def __post_init__(self):
        imgs = np.asarray(self.images)
        if imgs.ndim != 4 or imgs.shape[3] != 3:
            raise StructuralError(f"expected (L, H, W, 3) images, got {imgs.shape}")
        if imgs.shape[0] != N_LIGHTS:
            raise StructuralError(
                f"expected exactly {N_LIGHTS} light images, got {imgs.shape[0]}"
            )
        if imgs.dtype != np.float32:
            imgs = imgs.astype(np.float32)
        self.images = np.ascontiguousarray(imgs)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def light(self, i: int) -> HdrImage:
        return HdrImage(self.images[i])

    @classmethod
    def from_images(cls, identity_id, camera_id, pose, images) -> "OlatStack":
        arrs = [img.pixels if hasattr(img, "pixels") else np.asarray(img) for img in images]
        shapes = {a.shape for a in arrs}
        if len(shapes) != 1:
            raise StructuralError(f"light images disagree on shape: {shapes}")
        return cls(identity_id, camera_id, pose, np.stack(arrs).astype(np.float32))


def relight(stack: OlatStack, weights: em.LightWeights) -> HdrImage:
    """Weighted sum of the OLAT images, one weight triple per light.

    Accumulates in float64 in light-index order per pixel (so the result is
    bitwise identical to a naive per-pixel loop), stores float32.
    """
    if len(weights) != stack.images.shape[0]:
        raise StructuralError(
            f"{len(weights)} weights for {stack.images.shape[0]} lights"
        )
    h, w = stack.images.shape[1:3]
    flat = stack.images.reshape(stack.images.shape[0], h * w, 3)
    out = np.empty((h * w, 3), np.float32)
    accumulate_weighted(flat, weights.values, out)
    return HdrImage(out.reshape(h, w, 3))


def indicator_weights(light: int, value=1.0, n: int = N_LIGHTS) -> em.LightWeights:
    """Weights that switch on a single basis light."""
    vals = np.zeros((n, 3), np.float64)
    vals[light] = np.asarray(value, np.float64)
    return em.LightWeights(vals)


# --- synthetic Lambertian fixture -----------------------------------------


@dataclass
class SphereScene:
    """Ground truth for a rendered sphere: per-pixel albedo/normals + mask."""

    albedo: np.ndarray  # (H, W, 3) float32, zero off the sphere
    normals: np.ndarray  # (H, W, 3) float32 world-space, zero off the sphere
    mask: np.ndarray  # (H, W) bool

    albedo_texture: np.ndarray = field(default=None, repr=False)  # (th, tw, 3)


def _sample_latlong(texture: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a lat-long texture at unit directions (N, 3)."""
    th, tw = texture.shape[:2]
    u, v = em.direction_to_uv(dirs)
    x = u * tw - 0.5
    y = np.clip(v * th - 0.5, 0.0, th - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x0m = x0 % tw
    x1m = (x0 + 1) % tw
    y0c = np.clip(y0, 0, th - 1)
    y1c = np.clip(y0 + 1, 0, th - 1)
    t00 = texture[y0c, x0m]
    t01 = texture[y0c, x1m]
    t10 = texture[y1c, x0m]
    t11 = texture[y1c, x1m]
    top = t00 * (1 - fx) + t01 * fx
    bot = t10 * (1 - fx) + t11 * fx
    return top * (1 - fy) + bot * fy


def synth_lambertian_world(
    seed: int,
    resolution: int,
    basis: em.LightBasis,
    pose: CameraPose = CameraPose(),
    identity_id: str = "sphere",
    camera_id: str = "cam0",
):
    """Render an orthographic unit sphere with a seeded random albedo texture.

    The image for light i holds albedo * max(0, n . d_i) * omega_i per pixel,
    with world-space normals, so camera poses rotate the view of a fixed
    surface. Returns (OlatStack, SphereScene).
    """
    if resolution < 16:
        raise ValueError(f"resolution must be >= 16, got {resolution}")
    rng = np.random.default_rng(seed)
    texture = rng.uniform(0.1, 0.9, size=(32, 64, 3))

    r = resolution
    xs = 2.0 * (np.arange(r) + 0.5) / r - 1.0
    ys = 1.0 - 2.0 * (np.arange(r) + 0.5) / r
    xx, yy = np.meshgrid(xs, ys)
    rr = xx * xx + yy * yy
    mask = rr < 1.0
    zz = np.zeros_like(xx)
    zz[mask] = np.sqrt(1.0 - rr[mask])

    n_cam = np.stack([xx[mask], yy[mask], zz[mask]], axis=1)  # (P, 3)
    rot = pose.rotation()
    n_world = n_cam @ rot.T

    albedo_flat = _sample_latlong(texture, n_world)
    cosines = np.clip(n_world @ basis.directions.T, 0.0, None)  # (P, L)
    shading = cosines * basis.solid_angles[None, :]

    nlights = len(basis)
    images = np.zeros((nlights, r, r, 3), np.float32)
    px = (albedo_flat[:, None, :] * shading[:, :, None]).astype(np.float32)  # (P, L, 3)
    images[:, mask, :] = px.transpose(1, 0, 2)

    albedo = np.zeros((r, r, 3), np.float32)
    albedo[mask] = albedo_flat.astype(np.float32)
    normals = np.zeros((r, r, 3), np.float32)
    normals[mask] = n_world.astype(np.float32)

    stack = OlatStack(identity_id, camera_id, pose, images)
    scene = SphereScene(albedo, normals, mask, texture.astype(np.float32))
    return stack, scene


def synth_envmap(seed: int, width: int = 64, height: int = 32) -> em.LatLongEnvMap:
    """Seeded random HDR environment: ambient floor plus a few bright lobes."""
    rng = np.random.default_rng(seed)
    dirs = em.texel_directions(width, height)
    px = np.full((height, width, 3), rng.uniform(0.02, 0.15), np.float64)
    for _ in range(rng.integers(2, 5)):
        center = rng.normal(size=3)
        center /= np.linalg.norm(center)
        sharp = rng.uniform(8.0, 60.0)
        color = rng.uniform(0.5, 6.0, size=3)
        px += color * np.exp(sharp * (dirs @ center - 1.0))[:, :, None]
    return em.LatLongEnvMap(HdrImage(px.astype(np.float32)))


def auto_exposure_ldr(
    img, percentile: float = 99.0, target: float = 0.95, gamma: float = 2.2
) -> np.ndarray:
    """Float LDR in [0,1] for network-facing use: scale the given luminance
    percentile to `target`, clamp, gamma-encode."""
    px = (img.pixels if hasattr(img, "pixels") else np.asarray(img)).astype(np.float64)
    lum = 0.2126 * px[..., 0] + 0.7152 * px[..., 1] + 0.0722 * px[..., 2]
    ref = np.percentile(lum, percentile)
    scale = target / ref if ref > 0 else 1.0
    return (np.clip(px * scale, 0.0, 1.0) ** (1.0 / gamma)).astype(np.float32)


# --- dataset manifests ------------------------------------------------------


class ConfigurationError(ValueError):
    """Manifest is missing something a requested operation needs."""


@dataclass
class CameraRecord:
    id: str
    pose: CameraPose
    olat_dir: str


@dataclass
class IdentityRecord:
    id: str
    cameras: list


@dataclass
class DatasetManifest:
    root: Path
    basis_file: str
    identities: list
    envmaps: list  # [{"id": ..., "path": ...}]
    split: dict  # {"train": [...], "test": [...]}

    def __post_init__(self):
        train = set(self.split.get("train", []))
        test = set(self.split.get("test", []))
        overlap = train & test
        if overlap:
            raise ValueError(f"train/test splits overlap: {sorted(overlap)}")
        known = {i.id for i in self.identities}
        missing = (train | test) - known
        if missing:
            raise ValueError(f"split references unknown identities: {sorted(missing)}")

    def identity(self, identity_id: str) -> IdentityRecord:
        for rec in self.identities:
            if rec.id == identity_id:
                return rec
        raise KeyError(identity_id)

    def camera(self, identity_id: str, camera_id: str) -> CameraRecord:
        for cam in self.identity(identity_id).cameras:
            if cam.id == camera_id:
                return cam
        raise KeyError((identity_id, camera_id))

    def envmap_path(self, env_id: str) -> Path:
        for rec in self.envmaps:
            if rec["id"] == env_id:
                return self.root / rec["path"]
        raise KeyError(env_id)

    def env_ids(self) -> list:
        return [rec["id"] for rec in self.envmaps]

    def camera_ids(self, identity_id: str) -> list:
        return [c.id for c in self.identity(identity_id).cameras]


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "basis_file": manifest.basis_file,
        "identities": [
            {
                "id": ident.id,
                "cameras": [
                    {
                        "id": cam.id,
                        "pose": {
                            "yaw": cam.pose.yaw,
                            "pitch": cam.pose.pitch,
                            "roll": cam.pose.roll,
                        },
                        "olat_dir": cam.olat_dir,
                    }
                    for cam in ident.cameras
                ],
            }
            for ident in manifest.identities
        ],
        "envmaps": manifest.envmaps,
        "split": manifest.split,
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    root = path.parent
    identities = [
        IdentityRecord(
            id=ident["id"],
            cameras=[
                CameraRecord(
                    id=cam["id"],
                    pose=CameraPose(**cam["pose"]),
                    olat_dir=cam["olat_dir"],
                )
                for cam in ident["cameras"]
            ],
        )
        for ident in doc["identities"]
    ]
    manifest = DatasetManifest(
        root=root,
        basis_file=doc["basis_file"],
        identities=identities,
        envmaps=doc["envmaps"],
        split=doc["split"],
    )
    missing = []
    if not (root / manifest.basis_file).exists():
        missing.append(manifest.basis_file)
    for rec in manifest.envmaps:
        if not (root / rec["path"]).exists():
            missing.append(rec["path"])
    for ident in identities:
        for cam in ident.cameras:
            d = root / cam.olat_dir
            if not d.is_dir():
                missing.append(cam.olat_dir)
            elif not (d / "light_000.hdr").exists():
                missing.append(f"{cam.olat_dir}/light_000.hdr")
    if missing:
        raise FileNotFoundError(f"manifest references missing files: {missing[:5]}")
    return manifest


def save_stack(stack: OlatStack, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(stack.images.shape[0]):
        data = write_radiance_hdr(HdrImage(stack.images[i]))
        (directory / f"light_{i:03d}.hdr").write_bytes(data)


def load_stack(
    directory,
    identity_id: str = "",
    camera_id: str = "",
    pose: CameraPose = CameraPose(),
) -> OlatStack:
    directory = Path(directory)
    images = []
    for i in range(N_LIGHTS):
        p = directory / f"light_{i:03d}.hdr"
        if not p.exists():
            raise FileNotFoundError(p)
        images.append(read_radiance_hdr(p.read_bytes()).pixels)
    return OlatStack(identity_id, camera_id, pose, np.stack(images))


def synth_dataset(
    out_dir,
    seed: int = 0,
    n_identities: int = 3,
    n_cameras: int = 4,
    n_envmaps: int = 16,
    resolution: int = 64,
    n_test_identities: int = 0,
) -> DatasetManifest:
    """Write a full synthetic dataset: stacks, env maps, basis, manifest.

    The last n_test_identities go into the test split, the rest into train.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    basis = em.fibonacci_basis(N_LIGHTS)
    (out_dir / "basis.txt").write_text(em.format_basis(basis))

    # frontal-arc camera poses, fixed layout like a stage
    yaws = np.linspace(-0.7, 0.7, n_cameras) if n_cameras > 1 else [0.0]
    pitches = [0.1 * ((i % 3) - 1) for i in range(n_cameras)]
    poses = [CameraPose(float(y), float(p), 0.0) for y, p in zip(yaws, pitches)]

    identities = []
    for i in range(n_identities):
        ident_id = f"id{i:02d}"
        cams = []
        for j, pose in enumerate(poses):
            cam_id = f"cam{j}"
            stack, _ = synth_lambertian_world(
                seed=seed * 1000 + i,
                resolution=resolution,
                basis=basis,
                pose=pose,
                identity_id=ident_id,
                camera_id=cam_id,
            )
            rel = f"olat/{ident_id}/{cam_id}"
            save_stack(stack, out_dir / rel)
            cams.append(CameraRecord(cam_id, pose, rel))
        identities.append(IdentityRecord(ident_id, cams))

    envmaps = []
    env_dir = out_dir / "envmaps"
    env_dir.mkdir(exist_ok=True)
    for k in range(n_envmaps):
        env = synth_envmap(seed * 7777 + k)
        rel = f"envmaps/env{k:03d}.hdr"
        (out_dir / rel).write_bytes(write_radiance_hdr(env.image))
        envmaps.append({"id": f"env{k:03d}", "path": rel})

    ids = [i.id for i in identities]
    n_test = min(n_test_identities, n_identities)
    split = {"train": ids[: n_identities - n_test], "test": ids[n_identities - n_test:]}
    manifest = DatasetManifest(out_dir, "basis.txt", identities, envmaps, split)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


# --- training / evaluation pairs -------------------------------------------


@dataclass(frozen=True)
class PairEnd:
    identity: str
    camera: str
    env: str


@dataclass(frozen=True)
class TrainingPair:
    source: PairEnd
    target: PairEnd
    p: int  # 1 iff target camera differs from source
    q: int  # 1 iff target env differs from source

    def __post_init__(self):
        if self.source.identity != self.target.identity:
            raise ValueError("pair must keep the same identity")
        if (self.p == 0) != (self.source.camera == self.target.camera):
            raise ValueError("p flag inconsistent with cameras")
        if (self.q == 0) != (self.source.env == self.target.env):
            raise ValueError("q flag inconsistent with env maps")


def _make_pair(identity, cam_s, env_s, cam_t, env_t) -> TrainingPair:
    return TrainingPair(
        PairEnd(identity, cam_s, env_s),
        PairEnd(identity, cam_t, env_t),
        p=int(cam_t != cam_s),
        q=int(env_t != env_s),
    )


def make_training_pairs(
    manifest: DatasetManifest, count_per_identity: int = 300, rng_seed: int = 0
) -> list:
    """Per train identity: ceil(count/4) same-camera pairs (p=0), the rest
    with a different target camera drawn uniformly; env maps uniform."""
    train_ids = manifest.split.get("train", [])
    env_ids = manifest.env_ids()
    if not train_ids:
        raise ConfigurationError("manifest has no train identities")
    if not env_ids:
        raise ConfigurationError("manifest has no environment maps")
    rng = np.random.default_rng(rng_seed)
    pairs = []
    for ident in train_ids:
        cams = manifest.camera_ids(ident)
        if not cams:
            raise ConfigurationError(f"identity {ident} has no cameras")
        n_same = math.ceil(count_per_identity / 4)
        for k in range(count_per_identity):
            cam_s = cams[rng.integers(len(cams))]
            if k < n_same or len(cams) == 1:
                cam_t = cam_s
            else:
                others = [c for c in cams if c != cam_s]
                cam_t = others[rng.integers(len(others))]
            env_s = env_ids[rng.integers(len(env_ids))]
            env_t = env_ids[rng.integers(len(env_ids))]
            pairs.append(_make_pair(ident, cam_s, env_s, cam_t, env_t))
    return pairs


def make_eval_sets(
    manifest: DatasetManifest, rng_seed: int = 0, pairs_per_identity: int = 8
) -> tuple:
    """(Set1, Set2) over test identities: Set1 fixes the viewpoint and varies
    the env map, Set2 fixes the env map and varies the viewpoint."""
    test_ids = manifest.split.get("test", [])
    env_ids = manifest.env_ids()
    if not test_ids:
        raise ConfigurationError("manifest has no test identities")
    if len(env_ids) < 2:
        raise ConfigurationError("Set1 needs at least two environment maps")
    rng = np.random.default_rng(rng_seed)
    set1, set2 = [], []
    for ident in test_ids:
        cams = manifest.camera_ids(ident)
        if len(cams) < 2:
            raise ConfigurationError("Set2 needs at least two cameras")
        for _ in range(pairs_per_identity):
            cam = cams[rng.integers(len(cams))]
            e1, e2 = rng.choice(len(env_ids), size=2, replace=False)
            set1.append(_make_pair(ident, cam, env_ids[e1], cam, env_ids[e2]))

            env = env_ids[rng.integers(len(env_ids))]
            c1, c2 = rng.choice(len(cams), size=2, replace=False)
            set2.append(_make_pair(ident, cams[c1], env, cams[c2], env))
    return set1, set2


def pairs_to_json(pairs) -> str:
    return json.dumps(
        [
            {
                "source": vars(p.source),
                "target": vars(p.target),
                "p": p.p,
                "q": p.q,
            }
            for p in pairs
        ],
        indent=1,
    )


def pairs_from_json(text: str) -> list:
    return [
        TrainingPair(PairEnd(**d["source"]), PairEnd(**d["target"]), d["p"], d["q"])
        for d in json.loads(text)
    ]
