"""Loss terms, the pyramid feature extractor, Adam, and the training loop.

The objective is the equally-weighted sum of a latent-space L2 term and a
feature-space L2 term over the decoded image (weights configurable). Only the
displacement network trains; the generator stays frozen.
"""

from __future__ import annotations

import csv
import io
import json
import struct
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import envmap as em
from . import latent as lt
from . import metrics as mx
from . import olat
from ._kernels import adam_update


class NumericError(RuntimeError):
    """Non-finite values where the math requires finite ones."""


# --- losses ------------------------------------------------------------------


def latent_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared difference over all latent elements."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"latent shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff))


def latent_loss_grad(pred: np.ndarray, target: np.ndarray):
    loss = latent_loss(pred, target)
    diff = pred.astype(np.float64) - target.astype(np.float64)
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype)


_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Circular 5-tap binomial blur along one axis (self-adjoint)."""
    out = _BINOMIAL5[2] * x
    for k, wk in ((1, _BINOMIAL5[1]), (2, _BINOMIAL5[0])):
        out = out + wk * (np.roll(x, k, axis=axis) + np.roll(x, -k, axis=axis))
    return out


def _blur(x: np.ndarray) -> np.ndarray:
    return _blur_axis(_blur_axis(x, 0), 1)


def _downsample(x: np.ndarray) -> np.ndarray:
    return x[::2, ::2]


def _downsample_adjoint(g: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, g.dtype)
    out[::2, ::2] = g
    return out


class PyramidExtractor:
    """Self-contained perceptual features: a binomial blur/downsample pyramid.

    Level 0 is the image itself; each next level is a circular 5-tap binomial
    blur followed by 2x decimation. Linear, so the adjoint used for gradients
    is exact.
    """

    def __init__(self, levels: int = 4):
        if levels < 1:
            raise ValueError("need at least one level")
        self.levels = levels
        self.descriptor = f"binomial-pyramid-{levels}"

    def _check(self, image: np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
        if min(image.shape[:2]) < 16:
            raise ValueError("image must be at least 16x16")

    def extract(self, image) -> list:
        image = np.asarray(image.pixels if hasattr(image, "pixels") else image)
        self._check(image)
        feats = [image]
        for _ in range(self.levels - 1):
            feats.append(_downsample(_blur(feats[-1])))
        return feats

    def backprop(self, level_grads: list, image_shape) -> np.ndarray:
        """Exact adjoint: pull per-level gradients back to the image."""
        grad = np.zeros(image_shape, np.float64)
        for lvl, g in enumerate(level_grads):
            cur = np.asarray(g, np.float64)
            shapes = [image_shape]
            for _ in range(lvl):
                prev = shapes[-1]
                shapes.append(((prev[0] + 1) // 2, (prev[1] + 1) // 2, prev[2]))
            for back in range(lvl, 0, -1):
                cur = _blur(_downsample_adjoint(cur, shapes[back - 1]))
            grad += cur
        return grad


def perceptual_loss(pred, target, extractor=None) -> float:
    """Sum over pyramid levels of the mean squared feature difference."""
    extractor = extractor or PyramidExtractor()
    pa = np.asarray(pred.pixels if hasattr(pred, "pixels") else pred)
    ta = np.asarray(target.pixels if hasattr(target, "pixels") else target)
    if pa.shape != ta.shape:
        raise ValueError(f"image shapes differ: {pa.shape} vs {ta.shape}")
    fa = extractor.extract(pa)
    fb = extractor.extract(ta)
    total = 0.0
    for a, b in zip(fa, fb):
        d = a.astype(np.float64) - b.astype(np.float64)
        total += float(np.mean(d * d))
    return total


def perceptual_loss_grad(pred, target, extractor=None):
    """(loss, d loss / d pred) via the extractor's exact adjoint."""
    extractor = extractor or PyramidExtractor()
    pa = np.asarray(pred.pixels if hasattr(pred, "pixels") else pred)
    ta = np.asarray(target.pixels if hasattr(target, "pixels") else target)
    if pa.shape != ta.shape:
        raise ValueError(f"image shapes differ: {pa.shape} vs {ta.shape}")
    fa = extractor.extract(pa)
    fb = extractor.extract(ta)
    total = 0.0
    level_grads = []
    for a, b in zip(fa, fb):
        d = a.astype(np.float64) - b.astype(np.float64)
        total += float(np.mean(d * d))
        level_grads.append((2.0 / d.size) * d)
    grad = extractor.backprop(level_grads, pa.shape).astype(pa.dtype)
    return total, grad


def total_loss(pred_latent, target_latent, pred_image, target_image,
               extractor=None, weights=(1.0, 1.0)):
    """Weighted sum of the two terms; returns value, components, and the
    gradients w.r.t. the predicted latent and predicted image."""
    w_l, w_p = weights
    lat, d_lat = latent_loss_grad(pred_latent, target_latent)
    perc, d_img = perceptual_loss_grad(pred_image, target_image, extractor)
    total = w_l * lat + w_p * perc
    return total, lat, perc, (w_l * d_lat).astype(d_lat.dtype), (w_p * d_img).astype(d_img.dtype)


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_params(cls, params: lt.EditNetParams) -> "AdamState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), 0)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1
    max_steps: int = 5000
    seed: int = 0
    env_normalization: str = "none"  # or "unit_energy"
    loss_weights: tuple = (1.0, 1.0)
    use_q: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0  # 0 = only at the end

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.env_normalization not in ("none", "unit_energy"):
            raise ValueError(f"unknown env_normalization {self.env_normalization!r}")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


def adam_step(params: lt.EditNetParams, grads: lt.EditNetGrads, state: AdamState,
              config: TrainConfig, check_finite: bool = True) -> None:
    """Standard bias-corrected Adam update, in place; bumps params.version.

    With check_finite=False the caller is responsible for having validated
    the gradients (the training loop guards the small upstream tensors).
    """
    if grads.flat.shape != params.flat.shape:
        raise lt.StructuralError("gradient buffer mismatches parameters")
    if check_finite and not np.isfinite(grads.flat).all():
        raise NumericError("non-finite gradients; aborting the step")
    state.t += 1
    c1 = 1.0 / (1.0 - config.beta1 ** state.t)
    c2 = 1.0 / (1.0 - config.beta2 ** state.t)
    adam_update(params.flat, grads.flat, state.m, state.v,
                config.lr, config.beta1, config.beta2, config.eps, c1, c2)
    params.version += 1


# --- dataset cache -----------------------------------------------------------


class ToyWorldData:
    """Renders and caches everything training needs from a manifest.

    Latents, network-ready LDR images, and per-env light weights are computed
    once per (identity, camera, env) / env key and reused across steps.
    """

    def __init__(self, manifest: olat.DatasetManifest, generator: lt.Generator,
                 env_normalization: str = "none"):
        self.manifest = manifest
        self.generator = generator
        self.env_normalization = env_normalization
        self.basis = em.load_basis((manifest.root / manifest.basis_file).read_text())
        self._stacks: dict = {}
        self._envs: dict = {}
        self._weights: dict = {}
        self._cond_env: dict = {}
        self._images: dict = {}
        self._latents: dict = {}

    def stack(self, identity: str, camera: str) -> olat.OlatStack:
        key = (identity, camera)
        if key not in self._stacks:
            cam = self.manifest.camera(identity, camera)
            self._stacks[key] = olat.load_stack(
                self.manifest.root / cam.olat_dir, identity, camera, cam.pose
            )
        return self._stacks[key]

    def envmap(self, env_id: str) -> em.LatLongEnvMap:
        if env_id not in self._envs:
            from .radiometry import read_radiance_hdr

            data = self.manifest.envmap_path(env_id).read_bytes()
            self._envs[env_id] = em.LatLongEnvMap(read_radiance_hdr(data))
        return self._envs[env_id]

    def weights(self, env_id: str) -> em.LightWeights:
        if env_id not in self._weights:
            self._weights[env_id] = em.resample_to_basis(self.envmap(env_id), self.basis)
        return self._weights[env_id]

    def cond_env(self, env_id: str) -> np.ndarray:
        if env_id not in self._cond_env:
            vec = self.weights(env_id).vector()
            if self.env_normalization == "unit_energy":
                total = vec.sum()
                if total > 0:
                    vec = vec / total
            self._cond_env[env_id] = vec
        return self._cond_env[env_id]

    def pose(self, identity: str, camera: str) -> olat.CameraPose:
        return self.manifest.camera(identity, camera).pose

    def image(self, identity: str, camera: str, env_id: str) -> np.ndarray:
        key = (identity, camera, env_id)
        if key not in self._images:
            hdr = olat.relight(self.stack(identity, camera), self.weights(env_id))
            self._images[key] = olat.auto_exposure_ldr(hdr)
        return self._images[key]

    def latent(self, identity: str, camera: str, env_id: str) -> np.ndarray:
        key = (identity, camera, env_id)
        if key not in self._latents:
            self._latents[key] = self.generator.encode(self.image(*key))
        return self._latents[key]

    def cond_for(self, pair: olat.TrainingPair, use_q: bool) -> lt.ConditionVector:
        t = pair.target
        return lt.ConditionVector(
            env=self.cond_env(t.env),
            pose=self.pose(t.identity, t.camera),
            p=pair.p,
            q=pair.q if use_q else None,
        )


# --- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    params: lt.EditNetParams
    state: AdamState
    config: TrainConfig
    loss_log: list  # rows of (step, latent_loss, perceptual_loss, total)
    checkpoints: list = field(default_factory=list)  # (step, bytes)


def train(pairs, generator: lt.Generator, data: ToyWorldData,
          config: TrainConfig, net_config: lt.EditNetConfig = None,
          extractor=None, on_step=None) -> TrainResult:
    """Optimize the displacement network on rendered pair latents/images.

    Iterates seeded reshuffles of `pairs`; one Adam step per batch (default
    batch size 1). The generator is used read-only.
    """
    if not pairs:
        raise olat.ConfigurationError("no training pairs")
    nb, bd = generator.latent_shape
    if net_config is None:
        net_config = lt.EditNetConfig(
            n_blocks=nb, block_dim=bd, use_q=config.use_q, seed=config.seed
        )
    if net_config.use_q != config.use_q:
        raise ValueError("net_config.use_q disagrees with train config")
    params = lt.init_params(net_config)
    state = AdamState.for_params(params)
    extractor = extractor or PyramidExtractor()
    rng = np.random.default_rng(config.seed)

    grads_acc = lt.zero_grads(net_config) if config.batch_size > 1 else None
    loss_log = []
    checkpoints = []
    order = []
    step = 0
    take = min(config.batch_size, len(pairs))
    while step < config.max_steps:
        while len(order) < take:
            order = list(rng.permutation(len(pairs))) + order
        batch = [pairs[order.pop()] for _ in range(take)]
        if grads_acc is not None:
            grads_acc.flat[:] = 0
        lat_sum = perc_sum = tot_sum = 0.0
        for pair in batch:
            src = data.latent(pair.source.identity, pair.source.camera, pair.source.env)
            tgt_lat = data.latent(pair.target.identity, pair.target.camera, pair.target.env)
            tgt_img = data.image(pair.target.identity, pair.target.camera, pair.target.env)
            cond = data.cond_for(pair, net_config.use_q)
            out, cache = lt.forward(params, src, cond)
            pred_img = generator.decode_array(out)
            total, lat, perc, d_lat, d_img = total_loss(
                out, tgt_lat, pred_img, tgt_img, extractor, config.loss_weights
            )
            if not np.isfinite(total):
                raise NumericError(
                    f"loss diverged at step {step}: latent={lat} perceptual={perc}"
                )
            d_out = d_lat + generator.pullback(d_img)
            if not np.isfinite(d_out).all():
                raise NumericError(f"non-finite latent gradient at step {step}")
            grads, _, _ = lt.backward(params, cache, d_out)
            if grads_acc is not None:
                grads_acc.flat += grads.flat
            lat_sum += lat
            perc_sum += perc
            tot_sum += total
        n = len(batch)
        if grads_acc is not None:
            grads_acc.flat /= n
            step_grads = grads_acc
        else:
            step_grads = grads
        adam_step(params, step_grads, state, config, check_finite=False)
        step += 1
        loss_log.append((step, lat_sum / n, perc_sum / n, tot_sum / n))
        if on_step is not None:
            on_step(step, loss_log[-1])
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            checkpoints.append((step, save_checkpoint(params, state, config)))
    return TrainResult(params, state, config, loss_log, checkpoints)


def loss_log_csv(loss_log) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "latent_loss", "perceptual_loss", "total"])
    for row in loss_log:
        writer.writerow([row[0], f"{row[1]:.9g}", f"{row[2]:.9g}", f"{row[3]:.9g}"])
    return buf.getvalue()


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"PANV1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: lt.EditNetParams, state: AdamState,
                    config: TrainConfig, generator_info: dict = None) -> bytes:
    """Little-endian binary: magic, JSON header, param/moment blocks, CRC."""
    header = {
        "version": 1,
        "net": params.config.to_dict(),
        "train": {**asdict(config), "loss_weights": list(config.loss_weights)},
        "adam_t": state.t,
        "generator": generator_info or {},
    }
    hjson = json.dumps(header).encode()
    body = bytearray()
    body.extend(struct.pack("<I", len(hjson)))
    body.extend(hjson)
    for arr in (params.flat, state.m, state.v):
        raw = np.ascontiguousarray(arr, dtype="<f4" if arr.dtype == np.float32 else "<f8")
        body.extend(struct.pack("<BQ", 8 if raw.dtype.itemsize == 8 else 4, raw.size))
        body.extend(raw.tobytes())
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return _MAGIC + bytes(body) + struct.pack("<I", crc)


def load_checkpoint(data: bytes, expected_use_q: bool = None):
    """Returns (params, state, train_config, generator_info)."""
    if len(data) < len(_MAGIC) + 8 or data[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, tail = data[len(_MAGIC):-4], data[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", tail)[0]:
        raise CheckpointError("checkpoint corrupt (CRC mismatch)")
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("checkpoint truncated")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen))
    if header.get("version") != 1:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    net_cfg = lt.EditNetConfig(**header["net"])
    if expected_use_q is not None and net_cfg.use_q != expected_use_q:
        raise CheckpointError(
            f"checkpoint use_q={net_cfg.use_q} incompatible with use_q={expected_use_q}"
        )
    tcfg_dict = dict(header["train"])
    tcfg_dict["loss_weights"] = tuple(tcfg_dict.get("loss_weights", (1.0, 1.0)))
    tcfg = TrainConfig(**tcfg_dict)
    arrays = []
    for _ in range(3):
        itemsize, size = struct.unpack("<BQ", take(9))
        dt = "<f8" if itemsize == 8 else "<f4"
        arrays.append(np.frombuffer(take(int(size) * itemsize), dtype=dt).copy())
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    expected = lt.param_count(net_cfg)
    if any(a.size != expected for a in arrays):
        raise CheckpointError("parameter block size mismatches config")
    params = lt.EditNetParams(net_cfg, arrays[0].astype(net_cfg.np_dtype, copy=False))
    state = AdamState(arrays[1], arrays[2], int(header["adam_t"]))
    return params, state, tcfg, header.get("generator", {})


# --- evaluation harness -------------------------------------------------------


def evaluate_pairs(pairs, generator: lt.Generator, params: lt.EditNetParams,
                   data: ToyWorldData, label: str = "") -> mx.EvalReport:
    """Run edits for (source -> target) pairs and score against ground truth."""
    preds, gts = [], []
    for pair in pairs:
        src = data.latent(pair.source.identity, pair.source.camera, pair.source.env)
        cond = data.cond_for(pair, params.config.use_q)
        out, _ = lt.forward(params, src, cond)
        pred = np.clip(generator.decode_array(out), 0.0, 1.0)
        gt = data.image(pair.target.identity, pair.target.camera, pair.target.env)
        preds.append(pred)
        gts.append(gt)
    return mx.evaluate(list(zip(preds, gts)), label)
