"""Command-line entry point: data generation, the two training stages,
evaluation, gradient diagnostics, and mask inspection artifacts."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import workflows
from .config import RunConfig, load_config
from .data import generate_scene, read_scene, read_split_csv, write_tensors
from .errors import ConfigError, SsmaeError
from .masking import SPATIAL, SPECTRAL, apply_spatial_mask, apply_spectral_mask, sample_mask
from .pipelines import load_checkpoint


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="flat JSON config document")
        p.add_argument("--seed", type=int, default=None, help="master seed for the whole run")
        p.add_argument("--out", type=Path, default=Path("runs"), help="artifact directory")

    gen = sub.add_parser("gen-data", help="write a synthetic scene and split manifest")
    common(gen)

    pre = sub.add_parser("pretrain", help="self-supervised reconstruction stage")
    common(pre)
    pre.add_argument("--data", type=Path, default=None, help="scene container (default <out>/scene.mst)")
    pre.add_argument("--steps", type=int, default=None, help="override pretrain_steps")
    pre.add_argument("--ratio-spatial", type=float, default=None, help="spatial masking ratio")
    pre.add_argument("--ratio-spectral", type=float, default=None, help="spectral masking ratio")

    train = sub.add_parser("train", help="supervised classification stage")
    common(train)
    train.add_argument("--data", type=Path, default=None)
    train.add_argument("--splits", type=Path, default=None, help="split manifest CSV (default <out>/splits.csv)")
    train.add_argument("--steps", type=int, default=None, help="override train_steps")
    train.add_argument("--from-pretrained", type=Path, default=None, help="pretraining checkpoint to start from")

    ev = sub.add_parser("eval", help="metrics report, confusion CSV, predicted map")
    common(ev)
    ev.add_argument("--data", type=Path, default=None)
    ev.add_argument("--splits", type=Path, default=None)
    ev.add_argument("--checkpoint", type=Path, default=None, help="trained model (default <out>/model.mst)")

    grad = sub.add_parser("grad-check", help="gradient suite over all ops and micro-model paths")
    common(grad)
    grad.add_argument("--trials", type=int, default=20, help="random shapes per op")

    demo = sub.add_parser("mask-demo", help="write reassembled masked images for plotting")
    common(demo)
    demo.add_argument("--data", type=Path, default=None, help="scene container (generated on the fly if absent)")
    demo.add_argument("--ratio-spatial", type=float, default=None)
    demo.add_argument("--ratio-spectral", type=float, default=None)

    return parser


def _run_config(args) -> RunConfig:
    overrides = {"seed": args.seed}
    if getattr(args, "ratio_spatial", None) is not None:
        overrides["spatial_ratio"] = args.ratio_spatial
    if getattr(args, "ratio_spectral", None) is not None:
        overrides["spectral_ratio"] = args.ratio_spectral
    if getattr(args, "steps", None) is not None:
        if args.command == "pretrain":
            overrides["pretrain_steps"] = args.steps
        else:
            overrides["train_steps"] = args.steps
    return load_config(args.config, overrides)


def _load_scene(args, cfg: RunConfig):
    path = args.data if args.data is not None else args.out / "scene.mst"
    if not Path(path).exists():
        raise ConfigError(f"data: scene file not found at {path}")
    return read_scene(path)


def _load_splits(args):
    path = args.splits if args.splits is not None else args.out / "splits.csv"
    if not Path(path).exists():
        raise ConfigError(f"splits: manifest not found at {path}")
    return read_split_csv(path)


def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    scene = workflows.run_gen_data(cfg, args.out)
    print(f"scene {cfg.height}x{cfg.width}, {cfg.num_classes} classes -> {args.out}")
    counts = np.bincount(scene.gt.reshape(-1))[1:]
    print("labeled pixels per class:", " ".join(str(int(c)) for c in counts))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    scene = _load_scene(args, cfg)
    _, history = workflows.run_pretrain(scene, cfg, args.out)
    first, last = history[0]["total"], history[-1]["total"]
    print(f"pretrained {cfg.pretrain_steps} steps: loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {args.out / 'pretrained.mst'}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    scene = _load_scene(args, cfg)
    manifest = _load_splits(args)
    if args.from_pretrained is not None and not args.from_pretrained.exists():
        raise ConfigError(f"from_pretrained: checkpoint not found at {args.from_pretrained}")
    _, history = workflows.run_train(scene, manifest, cfg, args.out, args.from_pretrained)
    print(f"trained {cfg.train_steps} steps: loss {history[0]['loss']:.4f} -> {history[-1]['loss']:.4f}")
    print(f"checkpoint: {args.out / 'model.mst'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    scene = _load_scene(args, cfg)
    manifest = _load_splits(args)
    checkpoint = args.checkpoint if args.checkpoint is not None else args.out / "model.mst"
    if not Path(checkpoint).exists():
        raise ConfigError(f"checkpoint: model file not found at {checkpoint}")
    model = load_checkpoint(checkpoint)
    result = workflows.run_eval(scene, manifest, model, cfg, args.out)
    print(f"OA {result.oa:.4f}  AA {result.aa:.4f}  Kappa {result.kappa:.4f}")
    print(f"report: {args.out / 'report.txt'}")
    return 0


def cmd_grad_check(args) -> int:
    from .diagnostics import run_full_suite

    results, passed = run_full_suite(args.trials)
    for result in results:
        print(result.line())
    print("gradient suite:", "all checks passed" if passed else "FAILURES above")
    return 0 if passed else 1


def cmd_mask_demo(args) -> int:
    cfg = _run_config(args)
    data_path = args.data if args.data is not None else args.out / "scene.mst"
    scene = read_scene(data_path) if Path(data_path).exists() else generate_scene(cfg.scene_config(), cfg.seed)
    aux, hsi = workflows.prepare_inputs(scene, cfg)
    center = (scene.gt.shape[0] // 2, scene.gt.shape[1] // 2)
    x1, x2, _ = workflows.assemble_patches(aux, hsi, scene.gt, [center], cfg.patch_size)[0]
    image = np.concatenate([x1, x2], axis=0)
    channels, p = image.shape[0], cfg.patch_size
    protected = range(cfg.aux_bands) if cfg.aux_bands == 1 else ()
    spa_spec = sample_mask(p * p, cfg.spatial_ratio, cfg.seed, mode=SPATIAL)
    spe_spec = sample_mask(channels, cfg.spectral_ratio, cfg.seed, protected=protected, mode=SPECTRAL)
    spatial_masked = apply_spatial_mask(image, spa_spec).reassemble()
    spectral_masked = apply_spectral_mask(image, spe_spec).reassemble()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensors(
        out / "mask_demo.mst",
        {"input": image, "masked_spatial": spatial_masked, "masked_spectral": spectral_masked},
    )
    from . import plots

    bands = (0, cfg.aux_bands, channels - 1)
    plots.save_mask_planes(image, spatial_masked, spectral_masked, out / "mask_demo.png", bands)
    print(f"masked {len(spa_spec.masked)}/{p * p} pixels, {len(spe_spec.masked)}/{channels} bands")
    print(f"artifacts: {out / 'mask_demo.mst'}, {out / 'mask_demo.png'}")
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "mask-demo": cmd_mask_demo,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code) if exc.code is not None else 0
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SsmaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
