"""Run orchestration shared by the CLI and the acceptance suite.

Everything here is a pure function of (scene, config, master seed) so that
two runs with the same seed produce byte-identical artifacts.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import plots, seeds
from .config import RunConfig
from .data import (
    Scene,
    SplitManifest,
    extract_patch,
    pca_apply,
    pca_fit,
    read_scene,
    split_samples,
    standardize_channels,
    write_scene,
    write_split_csv,
    write_tensors,
)
from .errors import ConfigError
from .metrics import confusion, format_report, metrics, write_confusion_csv
from .pipelines import (
    Adam,
    ModelParams,
    build_pretraining_model,
    build_training_model,
    classify,
    finetuning_parameters,
    load_pretrained_branches,
    pretrain_step,
    pretraining_parameters,
    save_checkpoint,
    train_step,
)

PRETRAIN_STAGE = 0
TRAIN_STAGE = 1


def worker_count() -> int:
    """Batch-assembly concurrency cap from SSMAE_THREADS (default serial)."""
    raw = os.environ.get("SSMAE_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"SSMAE_THREADS: not an integer ({raw!r})") from exc


def prepare_inputs(scene: Scene, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Standardized aux cube and PCA-reduced, standardized HSI cube."""
    labeled = scene.gt.reshape(-1) > 0
    pixels = scene.hsi.reshape(scene.hsi.shape[0], -1).T[labeled]
    if cfg.pca_sample_cap and pixels.shape[0] > cfg.pca_sample_cap:
        pick = seeds.generator(cfg.seed, seeds.PCA, 1).choice(
            pixels.shape[0], size=cfg.pca_sample_cap, replace=False
        )
        pixels = pixels[np.sort(pick)]
    model = pca_fit(pixels, cfg.pca_components)
    hsi = pca_apply(model, scene.hsi)
    aux = standardize_channels(scene.aux)
    return aux, hsi


def assemble_patches(
    aux: np.ndarray,
    hsi: np.ndarray,
    gt: np.ndarray,
    coords: list[tuple[int, int]],
    patch_size: int,
    require_label: bool = False,
):
    """Patch pairs for the given centers, in input order; may run threaded."""

    def one(coord):
        row, col = coord
        x1, x2, label = extract_patch(aux, hsi, gt, row, col, patch_size, require_label)
        return x1, x2, label

    workers = worker_count()
    if workers == 1 or len(coords) < 2:
        return [one(c) for c in coords]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, coords))


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def batch_indices(pool: int, batch_size: int, steps: int, master: int, stage: int):
    """Seeded epoch-shuffled batches; a partial tail starts a fresh epoch."""
    take = min(batch_size, pool)
    epoch = 0
    position = 0
    order = seeds.generator(master, seeds.BATCH_SHUFFLE, stage, epoch).permutation(pool)
    for _ in range(steps):
        if position + take > pool:
            epoch += 1
            order = seeds.generator(master, seeds.BATCH_SHUFFLE, stage, epoch).permutation(pool)
            position = 0
        yield order[position : position + take]
        position += take


# -- stages ----------------------------------------------------------------------


def run_gen_data(cfg: RunConfig, out_dir) -> Scene:
    from .data import generate_scene

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(cfg.scene_config(), cfg.seed)
    write_scene(scene, out / "scene.mst")
    manifest = split_samples(scene.gt, cfg.per_class_train, cfg.seed)
    write_split_csv(manifest, out / "splits.csv")
    plots.save_label_map(scene.gt, cfg.num_classes, out / "gt_map.png", "ground truth")
    return scene


def pretrain_coords(cfg: RunConfig, height: int, width: int) -> list[tuple[int, int]]:
    """Uniformly sampled pixel centers for the self-supervised stage."""
    total = height * width
    rng = seeds.generator(cfg.seed, seeds.PRETRAIN_SAMPLES)
    flat = rng.choice(total, size=cfg.pretrain_samples, replace=cfg.pretrain_samples > total)
    return [(int(i) // width, int(i) % width) for i in flat]


def run_pretrain(scene: Scene, cfg: RunConfig, out_dir) -> tuple[ModelParams, list[dict]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aux, hsi = prepare_inputs(scene, cfg)
    model = build_pretraining_model(cfg.transformer_config(), cfg.aux_bands, cfg.seed)
    opt = Adam(pretraining_parameters(model), lr=cfg.lr_pretrain, clip_norm=1.0)
    coords = pretrain_coords(cfg, scene.gt.shape[0], scene.gt.shape[1])
    pool = len(coords)
    ratios = (cfg.spatial_ratio, cfg.spectral_ratio)

    history: list[dict] = []
    chunks = batch_indices(pool, cfg.batch_size, cfg.pretrain_steps, cfg.seed, PRETRAIN_STAGE)
    for step, chunk in enumerate(chunks):
        picked = [coords[i] for i in chunk]
        batch = [(x1, x2) for x1, x2, _ in assemble_patches(aux, hsi, scene.gt, picked, cfg.patch_size)]
        losses = pretrain_step(
            batch, model, opt, ratios, seeds.derive(cfg.seed, PRETRAIN_STAGE, step), cfg.loss_weight
        )
        history.append(
            {
                "step": step,
                "spatial": losses.spatial,
                "spectral": losses.spectral,
                "total": losses.total,
            }
        )

    _write_csv(
        out / "pretrain_loss.csv",
        ["step", "spatial", "spectral", "total"],
        [[h["step"], repr(h["spatial"]), repr(h["spectral"]), repr(h["total"])] for h in history],
    )
    plots.save_loss_curves(history, out / "pretrain_loss.png", ("spatial", "spectral", "total"))
    save_checkpoint(model, out / "pretrained.mst")
    return model, history


def run_train(
    scene: Scene,
    manifest: SplitManifest,
    cfg: RunConfig,
    out_dir,
    from_pretrained=None,
) -> tuple[ModelParams, list[dict]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aux, hsi = prepare_inputs(scene, cfg)
    num_classes = int(scene.gt.max())
    model = build_training_model(cfg.transformer_config(), cfg.aux_bands, num_classes, cfg.seed)
    if from_pretrained is not None:
        load_pretrained_branches(model, from_pretrained)
    opt = Adam(finetuning_parameters(model), lr=cfg.lr_train, clip_norm=1.0)

    items = manifest.items("train")
    pool = len(items)
    if pool == 0:
        raise ConfigError("per_class_train: the split manifest has no training samples")
    history: list[dict] = []
    chunks = batch_indices(pool, cfg.batch_size, cfg.train_steps, cfg.seed, TRAIN_STAGE)
    for step, chunk in enumerate(chunks):
        chosen = [items[i] for i in chunk]
        coords = [(row, col) for row, col, _ in chosen]
        labels = np.asarray([label - 1 for _, _, label in chosen])
        batch = [
            (x1, x2)
            for x1, x2, _ in assemble_patches(aux, hsi, scene.gt, coords, cfg.patch_size, require_label=True)
        ]
        loss = train_step(batch, labels, model, opt)
        history.append({"step": step, "loss": loss})

    _write_csv(out / "train_loss.csv", ["step", "loss"], [[h["step"], repr(h["loss"])] for h in history])
    plots.save_loss_curves(history, out / "train_loss.png", ("loss",))
    save_checkpoint(model, out / "model.mst")
    return model, history


def predict_map(scene: Scene, model: ModelParams, cfg: RunConfig) -> np.ndarray:
    """Predicted class per labeled pixel (0 where unlabeled)."""
    aux, hsi = prepare_inputs(scene, cfg)
    height, width = scene.gt.shape
    predicted = np.zeros((height, width), dtype=np.uint16)
    coords = [(int(r), int(c)) for r, c in np.argwhere(scene.gt > 0)]
    patches = assemble_patches(aux, hsi, scene.gt, coords, cfg.patch_size, require_label=True)
    for (row, col), (x1, x2, _) in zip(coords, patches):
        predicted[row, col] = int(np.argmax(classify(x1, x2, model))) + 1
    return predicted


def run_eval(scene: Scene, manifest: SplitManifest, model: ModelParams, cfg: RunConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    predicted = predict_map(scene, model, cfg)
    test_items = manifest.items("test")
    truths = np.asarray([label - 1 for _, _, label in test_items])
    preds = np.asarray([int(predicted[row, col]) - 1 for row, col, _ in test_items])
    num_classes = int(scene.gt.max())
    cm = confusion(preds, truths, num_classes)
    result = metrics(cm)

    (out / "report.txt").write_text(format_report(cm, result))
    write_confusion_csv(cm, out / "confusion.csv")
    write_tensors(out / "predicted_map.mst", {"prediction": predicted})
    plots.save_label_map(predicted, num_classes, out / "predicted_map.png", "prediction")
    plots.save_confusion_heatmap(cm.counts, out / "confusion.png")
    return result
