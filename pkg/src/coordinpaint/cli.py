"""Command-line interface.

Every command exits 0 on success. On failure it prints one JSON line
``{"error": <type>, "message": <text>}`` to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as cio
from .pipeline import (
    DirectoryPairs,
    PipelineConfig,
    dump_intermediates,
    evaluate,
    infer,
    load_pipeline,
    make_pairs,
    train_stage1,
    train_stage2,
    transfer_garment,
)
from .synth import SceneConfig, generate_subject, identity_mask, render, uv_map


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return cfg.with_overrides(overrides)


def _add_config_args(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")
    p.add_argument("--seed", type=int, required=seed_required, help="run seed")


def cmd_gen_synthetic(args) -> dict:
    scene = SceneConfig(**json.loads(args.scene)) if args.scene else SceneConfig()
    overrides = {"image_size": args.image_size, "tex_size": args.tex_size, "shape": args.shape}
    scene = SceneConfig(**{**scene.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    written = 0
    for s in range(args.subjects):
        sid = f"s{s:05d}"
        texture, geometry, _ = generate_subject(int(rng.integers(1 << 31)), scene)
        cio.write_png(out / f"{sid}_texture.png", texture)
        start = rng.uniform(0, 360)
        for p in range(args.poses):
            yaw = start + 360.0 * p / args.poses
            m = uv_map(geometry, yaw, scene.image_size)
            cio.write_png(out / f"{sid}_p{p}.png", render(texture, m))
            cio.write_uvm(out / f"{sid}_p{p}.uvm", m)
            cio.write_mask_png(out / f"{sid}_p{p}.identity.png", identity_mask(m, scene.head_fraction))
            written += 1
    (out / "scene.json").write_text(json.dumps(scene.to_dict(), indent=2))
    return {"views": written, "pairs": len(cio.dataset_index(out)), "out": str(out)}


def cmd_train_inpainter(args) -> dict:
    cfg = _load_config(args)
    res = train_stage1(cfg, args.out)
    last = res.log[-1] if res.log else {}
    return {"checkpoint": str(res.checkpoint), "steps": len(res.log), "seconds": round(res.seconds, 2), "last": last}


def cmd_train_refiner(args) -> dict:
    cfg = _load_config(args)
    if cfg.ablation != "no_textures" and not args.stage1:
        raise FileNotFoundError("--stage1 checkpoint is required for this ablation")
    if args.stage1 and not Path(args.stage1).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.stage1}")
    res = train_stage2(cfg, args.stage1, args.out)
    last = res.log[-1] if res.log else {}
    return {"checkpoint": str(res.checkpoint), "steps": len(res.log), "seconds": round(res.seconds, 2), "last": last}


def _pipeline(args):
    if not Path(args.stage2).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.stage2}")
    if args.stage1 and not Path(args.stage1).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.stage1}")
    return load_pipeline(args.stage2, args.stage1)


def _write_output(path, image) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cio.write_png(path, image)


def cmd_infer(args) -> dict:
    pipe = _pipeline(args)
    source = cio.read_png(args.source)
    smap, tmap = cio.read_uvm(args.source_uvm), cio.read_uvm(args.target_uvm)
    ident = None
    if pipe.config.garment_transfer:
        if args.identity_image is None:
            raise ValueError("garment model: --identity-image (and optionally --identity-mask) is required")
        img = cio.read_png(args.identity_image)
        mask = cio.read_mask_png(args.identity_mask) if args.identity_mask else identity_mask(tmap, pipe.config.data.scene.head_fraction)
        ident = img * mask[None]
    out, inter = infer(pipe, source, smap, tmap, ident)
    _write_output(args.out, out)
    if args.dump_intermediates:
        dump_intermediates(args.dump_intermediates, inter, (source.shape[2], source.shape[1]))
    return {"out": args.out}


def cmd_transfer(args) -> dict:
    pipe = _pipeline(args)
    person, pmap = cio.read_png(args.person), cio.read_uvm(args.person_uvm)
    cloth, cmap = cio.read_png(args.cloth), cio.read_uvm(args.cloth_uvm)
    if args.identity_mask:
        mask = cio.read_mask_png(args.identity_mask)
    else:
        mask = identity_mask(pmap, pipe.config.data.scene.head_fraction)
    out = transfer_garment(pipe, person, pmap, cloth, cmap, mask)
    _write_output(args.out, out)
    return {"out": args.out}


def cmd_eval(args) -> dict:
    pipe = _pipeline(args)
    if args.data:
        pairs = DirectoryPairs(args.data, args.split)
    else:
        pairs = make_pairs(pipe.config, "test")
    report = evaluate(pipe, pairs, args.csv)
    return {k: v for k, v in report.items() if k != "rows"}


def cmd_gradcheck(args) -> dict:
    from .gradsuite import run_suite

    results = run_suite(seed=args.seed or 0, ops=args.ops)
    failed = [f"{r.op}{r.shape}" for r in results if not r.ok]
    summary = {
        "cases": len(results),
        "worst_normwise": max(r.error[0] for r in results),
        "worst_elementwise": max(r.error[1] for r in results),
        "failed": failed,
    }
    if failed:
        raise ArithmeticError(f"gradient check failed for {', '.join(failed)}")
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coordinpaint", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--poses", type=int, default=4)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--image-size", type=int)
    p.add_argument("--tex-size", type=int)
    p.add_argument("--shape", choices=("cylinder", "ellipsoid"))
    p.add_argument("--scene", help="JSON scene configuration")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train-inpainter", help="stage 1: train the texture inpainter")
    _add_config_args(p, seed_required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_inpainter)

    p = sub.add_parser("train-refiner", help="stage 2: train refiner and discriminator")
    _add_config_args(p, seed_required=True)
    p.add_argument("--stage1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_refiner)

    def checkpoints(p):
        p.add_argument("--stage1", help="stage-1 checkpoint (not needed for no_textures)")
        p.add_argument("--stage2", required=True, help="stage-2 checkpoint")

    p = sub.add_parser("infer", help="render a new view")
    checkpoints(p)
    p.add_argument("--source", required=True)
    p.add_argument("--source-uvm", required=True)
    p.add_argument("--target-uvm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--identity-image", help="image providing identity conditioning (garment models)")
    p.add_argument("--identity-mask", help="mask PNG for the identity image")
    p.add_argument("--dump-intermediates", metavar="DIR")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("transfer", help="garment transfer from a cloth view onto a person view")
    checkpoints(p)
    p.add_argument("--person", required=True)
    p.add_argument("--person-uvm", required=True)
    p.add_argument("--cloth", required=True)
    p.add_argument("--cloth-uvm", required=True)
    p.add_argument("--identity-mask", help="mask PNG; defaults to the head band of the person uv map")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="SSIM / L1 report on held-out pairs")
    checkpoints(p)
    p.add_argument("--data", help="dataset directory (default: synthetic test split of the run config)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--csv", help="write per-pair rows here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all differentiable ops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops", nargs="*")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - surfaced as a machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
