"""Command-line entry point; every subcommand is a thin wrapper over the
library modules. Exit codes: 0 ok, 2 usage error (argparse), 1 runtime error
with the message on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import envmap as em
from . import latent as lt
from . import metrics as mx
from . import olat
from . import training as tr
from ._kernels import set_threads
from .radiometry import HdrImage, read_radiance_hdr, tonemap, write_png, write_radiance_hdr


def _load_env(path) -> em.LatLongEnvMap:
    return em.LatLongEnvMap(read_radiance_hdr(Path(path).read_bytes()))


def _load_basis(path) -> em.LightBasis:
    if path is None:
        return em.fibonacci_basis(olat.N_LIGHTS)
    return em.load_basis(Path(path).read_text())


def _write_image(img: HdrImage, out: Path, exposure: float, gamma: float):
    out = Path(out)
    if out.suffix.lower() == ".png":
        out.write_bytes(write_png(tonemap(img, exposure, gamma)))
    elif out.suffix.lower() == ".hdr":
        out.write_bytes(write_radiance_hdr(img))
    else:
        raise ValueError(f"unknown image extension: {out.suffix} (use .hdr or .png)")


def _apply_threads(args):
    n = getattr(args, "threads", None)
    if n:
        set_threads(n)
        mx.max_workers = n


def cmd_relight(args) -> int:
    stack = olat.load_stack(args.stack)
    basis = _load_basis(args.basis)
    weights = em.resample_to_basis(_load_env(args.env), basis)
    out = olat.relight(stack, weights)
    _write_image(out, args.out, args.exposure, args.gamma)
    return 0


def cmd_resample(args) -> int:
    basis = _load_basis(args.basis)
    weights = em.resample_to_basis(_load_env(args.env), basis)
    Path(args.out).write_text(
        json.dumps({"n_lights": len(basis), "weights": weights.vector().tolist()})
    )
    return 0


def cmd_synth_world(args) -> int:
    manifest = olat.synth_dataset(
        args.out,
        seed=args.seed,
        n_identities=args.identities,
        n_cameras=args.cameras,
        n_envmaps=args.envmaps,
        resolution=args.size,
        n_test_identities=args.test_identities,
    )
    print(f"wrote dataset with {len(manifest.identities)} identities to {args.out}")
    return 0


def cmd_make_pairs(args) -> int:
    manifest = olat.load_manifest(args.manifest)
    pairs = olat.make_training_pairs(manifest, args.count, args.seed)
    Path(args.out).write_text(olat.pairs_to_json(pairs))
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    manifest = olat.load_manifest(args.manifest)
    pairs = olat.pairs_from_json(Path(args.pairs).read_text())
    config = (
        tr.TrainConfig.from_json(Path(args.config).read_text())
        if args.config
        else tr.TrainConfig()
    )
    if args.max_steps is not None:
        config.max_steps = args.max_steps
    gen = lt.ToyGenerator(seed=args.gen_seed, image_size=args.gen_size)
    data = tr.ToyWorldData(manifest, gen, config.env_normalization)
    result = tr.train(pairs, gen, data, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gen_info = {"seed": args.gen_seed, "image_size": args.gen_size}
    ckpt = tr.save_checkpoint(result.params, result.state, config, gen_info)
    tmp = out / "checkpoint.bin.tmp"
    tmp.write_bytes(ckpt)
    tmp.replace(out / "checkpoint.bin")  # atomic publish
    (out / "loss_log.csv").write_text(tr.loss_log_csv(result.loss_log))
    last = result.loss_log[-1]
    print(f"trained {last[0]} steps; final total loss {last[3]:.6g}")
    return 0


def _generator_from_info(info: dict) -> lt.ToyGenerator:
    return lt.ToyGenerator(
        seed=int(info.get("seed", 0)), image_size=int(info.get("image_size", 64))
    )


def cmd_edit(args) -> int:
    params, _, config, gen_info = tr.load_checkpoint(Path(args.checkpoint).read_bytes())
    gen = _generator_from_info(gen_info)
    inp = Path(args.input)
    if inp.suffix.lower() == ".npy":
        source = np.load(inp)
    elif inp.suffix.lower() == ".hdr":
        hdr = read_radiance_hdr(inp.read_bytes())
        source = olat.auto_exposure_ldr(hdr)
    else:
        raise ValueError("edit input must be a .npy latent or a .hdr image")
    basis = em.fibonacci_basis(olat.N_LIGHTS)
    weights = em.resample_to_basis(_load_env(args.env), basis)
    env_vec = weights.vector()
    if config.env_normalization == "unit_energy" and env_vec.sum() > 0:
        env_vec = env_vec / env_vec.sum()
    cond = lt.ConditionVector(
        env=env_vec,
        pose=olat.CameraPose(args.yaw, args.pitch, args.roll),
        p=args.p,
        q=args.q if params.config.use_q else None,
    )
    out = lt.edit(gen, params, source, cond)
    _write_image(out, args.out, args.exposure, 1.0)  # decoded images are display-ready
    return 0


def cmd_eval(args) -> int:
    params, _, config, gen_info = tr.load_checkpoint(Path(args.checkpoint).read_bytes())
    gen = _generator_from_info(gen_info)
    manifest = olat.load_manifest(args.manifest)
    data = tr.ToyWorldData(manifest, gen, config.env_normalization)
    set1, set2 = olat.make_eval_sets(manifest, args.seed, args.pairs_per_identity)
    pairs, label = (set1, "set1") if args.set == "set1" else (set2, "set2")
    report = tr.evaluate_pairs(pairs, gen, params, data, label)
    out = Path(args.out)
    if out.suffix.lower() == ".csv":
        out.write_text(report.to_csv())
    else:
        out.write_text(report.to_json())
    print(
        f"{label}: si_mse {report.si_mse_mean:.6g} (sigma {report.si_mse_sigma:.3g}), "
        f"ssim {report.ssim_mean:.6g} (sigma {report.ssim_sigma:.3g})"
    )
    return 0


def cmd_serve(args) -> int:
    from .service import run_server

    run_server(
        checkpoint=args.checkpoint,
        manifest=args.manifest,
        port=args.port,
        ui_dir=args.ui_dir,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relightkit",
        description="OLAT relighting and latent appearance editing toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_threads(p):
        p.add_argument("--threads", type=int, default=None, help="cap worker threads")

    p = sub.add_parser("relight", help="relight an OLAT stack with an env map")
    p.add_argument("--stack", required=True, help="directory with light_###.hdr")
    p.add_argument("--env", required=True, help="lat-long .hdr environment map")
    p.add_argument("--basis", default=None, help="light basis text file")
    p.add_argument("--out", required=True, help="output .hdr or .png")
    p.add_argument("--exposure", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=2.2)
    add_threads(p)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("resample", help="project an env map onto the light basis")
    p.add_argument("--env", required=True)
    p.add_argument("--basis", default=None)
    p.add_argument("--out", required=True, help="output JSON (flat light-major weights)")
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("synth-world", help="write a synthetic OLAT dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="image resolution")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=3)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--envmaps", type=int, default=16)
    p.add_argument("--test-identities", type=int, default=0)
    p.set_defaults(func=cmd_synth_world)

    p = sub.add_parser("make-pairs", help="draw training pairs from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--count", type=int, default=300, help="pairs per train identity")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("train", help="train the latent displacement network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--config", default=None, help="JSON mirroring TrainConfig")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-steps", type=int, default=None, help="override config")
    p.add_argument("--gen-seed", type=int, default=0)
    p.add_argument("--gen-size", type=int, default=64)
    add_threads(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="edit a latent/.hdr input with target conditions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".npy latent or .hdr image")
    p.add_argument("--env", required=True)
    p.add_argument("--yaw", type=float, default=0.0)
    p.add_argument("--pitch", type=float, default=0.0)
    p.add_argument("--roll", type=float, default=0.0)
    p.add_argument("--p", type=int, choices=(0, 1), default=1)
    p.add_argument("--q", type=int, choices=(0, 1), default=1)
    p.add_argument("--exposure", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="score a checkpoint on Set1 or Set2")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--set", choices=("set1", "set2"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs-per-identity", type=int, default=8)
    p.add_argument("--out", required=True, help="report .json or .csv")
    add_threads(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the interactive editing service")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--ui-dir", default=None, help="static files to serve at /")
    add_threads(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args)
    try:
        return args.func(args)
    except BrokenPipeError:
        raise
    except Exception as exc:  # runtime failure -> exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
