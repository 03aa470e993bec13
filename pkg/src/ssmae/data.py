"""Synthetic multi-source scenes, PCA reduction, patches, splits, and file I/O.

Scenes stand in for real co-registered hyperspectral + SAR/LiDAR data: a
smoothed-noise argmax label map gives contiguous class regions, every class
carries a smooth spectral signature, and pixels are signature plus Gaussian
noise. All generation is a pure function of (config, seed).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from . import seeds
from .errors import ConfigError, ContractError, FormatError, SampleError
from .masking import round_half_up

# -- synthetic scenes ---------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 5
    hsi_bands: int = 48
    aux_bands: int = 1
    noise_sigma: float = 0.1
    region_scale: float = 8.0


@dataclass
class Scene:
    """Co-registered modality cubes plus ground truth and generation metadata."""

    hsi: np.ndarray  # (C_full, H, W)
    aux: np.ndarray  # (C_aux, H, W)
    gt: np.ndarray  # (H, W) uint16, 0 = unlabeled, classes 1..L
    seed: int
    sig_hsi: np.ndarray  # (L, C_full) class spectral signatures
    sig_aux: np.ndarray  # (L, C_aux)
    noise_sigma: float


_IID_FRACTION = 0.02  # iid sensor-noise share of the stochastic term
_LATENT_FIELDS = 3  # smooth material-condition fields
_RESPONSE_TONES = 5  # sinusoid components of each band's response curve


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Deterministic synthetic scene with contiguous class regions.

    Pixel = class signature + noise_sigma * deviation. Deviations come from
    one smooth latent "material condition" field evaluated through per-band
    smooth nonlinear response curves, plus a small iid part; the auxiliary
    modality observes the latent field directly (elevation/backscatter
    style). Real hyperspectral deviations have exactly this low-dimensional
    cross-band structure, which is what makes masked bands recoverable from
    visible ones; pure iid pixel noise would not be.
    """
    h, w, classes = cfg.height, cfg.width, cfg.num_classes
    if classes < 2:
        raise ConfigError(f"num_classes: need at least 2, got {classes}")
    if h * w < classes:
        raise ConfigError(f"height/width: {h}x{w} scene cannot host {classes} classes")
    gt = None
    for attempt in range(64):
        rng = seeds.generator(seed, seeds.SCENE, attempt)
        fields = gaussian_filter(rng.normal(size=(classes, h, w)), sigma=(0, cfg.region_scale, cfg.region_scale))
        candidate = (fields.argmax(axis=0) + 1).astype(np.uint16)
        if len(np.unique(candidate)) == classes:
            gt = candidate
            break
    if gt is None:
        raise ConfigError("region_scale: could not realize all classes; lower region_scale")

    rng = seeds.generator(seed, seeds.SCENE, 1000)
    sig_hsi = gaussian_filter1d(rng.normal(size=(classes, cfg.hsi_bands)), sigma=3.0, axis=1)
    sig_hsi /= np.maximum(sig_hsi.std(axis=1, keepdims=True), 1e-9)
    sig_aux = rng.normal(size=(classes, cfg.aux_bands))

    # smooth latent material-condition fields, unit variance each
    smooth = max(cfg.region_scale / 2.0, 1.0)
    latents = gaussian_filter(rng.normal(size=(_LATENT_FIELDS, h, w)), sigma=(0, smooth, smooth))
    latents /= np.maximum(latents.std(axis=(1, 2), keepdims=True), 1e-9)

    def responses(bands: int) -> np.ndarray:
        # per band: a short sinusoid series over random latent projections
        amps = rng.normal(size=(bands, _RESPONSE_TONES))
        freqs = rng.uniform(0.3, 1.2, size=(bands, _RESPONSE_TONES))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(bands, _RESPONSE_TONES))
        directions = rng.normal(size=(bands, _RESPONSE_TONES, _LATENT_FIELDS))
        directions[:, :, 0] += 3.0  # the first latent (the aux-visible one) dominates
        directions /= np.linalg.norm(directions, axis=2, keepdims=True)
        projected = np.tensordot(directions, latents, axes=([2], [0]))  # (bands, tones, h, w)
        waves = amps[..., None, None] * np.sin(freqs[..., None, None] * projected + phases[..., None, None])
        cube = waves.sum(axis=1)
        std = cube.reshape(bands, -1).std(axis=1)
        return cube / np.maximum(std, 1e-9)[:, None, None]

    hsi = (
        sig_hsi.T[:, gt - 1]
        + cfg.noise_sigma * responses(cfg.hsi_bands)
        + cfg.noise_sigma * _IID_FRACTION * rng.normal(size=(cfg.hsi_bands, h, w))
    )
    # the aux modality observes the latent fields directly
    if cfg.aux_bands <= _LATENT_FIELDS:
        aux_dev = latents[: cfg.aux_bands]
    else:
        aux_dev = np.concatenate([latents, responses(cfg.aux_bands - _LATENT_FIELDS)])
    aux = (
        sig_aux.T[:, gt - 1]
        + cfg.noise_sigma * aux_dev
        + cfg.noise_sigma * _IID_FRACTION * rng.normal(size=(cfg.aux_bands, h, w))
    )
    return Scene(
        hsi=hsi,
        aux=aux,
        gt=gt,
        seed=seed,
        sig_hsi=sig_hsi,
        sig_aux=sig_aux,
        noise_sigma=cfg.noise_sigma,
    )


def standardize_channels(cube: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per channel over the whole scene."""
    flat = cube.reshape(cube.shape[0], -1)
    mean = flat.mean(axis=1, keepdims=True)
    std = flat.std(axis=1, keepdims=True)
    std = np.where(std < 1e-12, 1.0, std)
    return ((flat - mean) / std).reshape(cube.shape)


# -- PCA ------------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray  # (C,)
    basis: np.ndarray  # (C, K), orthonormal columns
    eigvals: np.ndarray  # (K,), nonincreasing, >= 0


def pca_fit(pixels: np.ndarray, components: int) -> PcaModel:
    """Top-K eigenpairs of the sample covariance via power iteration + deflation."""
    pixels = np.asarray(pixels, dtype=np.float64)
    n, dim = pixels.shape
    if components > dim:
        raise ConfigError(f"components: {components} exceeds spectral dimension {dim}")
    if n <= components:
        raise ConfigError(f"components: need more than {components} samples, got {n}")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / n
    eigvals, basis = _top_eigenpairs(cov, components)
    return PcaModel(mean=mean, basis=basis, eigvals=eigvals)


def _top_eigenpairs(matrix: np.ndarray, count: int, max_iter: int = 20000, tol: float = 1e-14):
    """Leading eigenpairs of a symmetric PSD matrix, one at a time.

    Each eigenvector comes from power iteration on the deflated matrix,
    re-orthogonalized against the ones already found every step.
    """
    dim = matrix.shape[0]
    deflated = matrix.copy()
    vectors = np.zeros((dim, count))
    values = np.zeros(count)
    for k in range(count):
        v = seeds.generator(seeds.PCA, k).normal(size=dim)
        v -= vectors[:, :k] @ (vectors[:, :k].T @ v)
        norm = np.linalg.norm(v)
        v = v / norm if norm > 0 else np.eye(dim)[k % dim]
        value = 0.0
        for _ in range(max_iter):
            w = deflated @ v
            w -= vectors[:, :k] @ (vectors[:, :k].T @ w)
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                value = 0.0  # exhausted the range; keep the orthogonal v as-is
                break
            w /= norm
            new_value = float(w @ (deflated @ w))
            if abs(new_value - value) <= tol * max(abs(new_value), 1e-30) and abs(abs(w @ v) - 1.0) < 1e-15:
                v, value = w, new_value
                break
            v, value = w, new_value
        values[k] = max(value, 0.0)
        vectors[:, k] = v
        deflated -= values[k] * np.outer(v, v)
    return values, vectors


def pca_apply(model: PcaModel, cube: np.ndarray, standardize: bool = True) -> np.ndarray:
    """Project (C, H, W) onto the basis; optionally standardize each output channel.

    Standardization is the model-input path; pass standardize=False to keep
    raw scores so that basis @ scores + mean reconstructs the input.
    """
    if cube.shape[0] != model.mean.size:
        raise ContractError(f"cube has {cube.shape[0]} channels, PCA model expects {model.mean.size}")
    flat = cube.reshape(cube.shape[0], -1)
    scores = model.basis.T @ (flat - model.mean[:, None])
    if standardize:
        mean = scores.mean(axis=1, keepdims=True)
        std = scores.std(axis=1, keepdims=True)
        std = np.where(std < 1e-12, 1.0, std)
        scores = (scores - mean) / std
    return scores.reshape(model.basis.shape[1], *cube.shape[1:])


# -- patches -----------------------------------------------------------------------


def _mirror_indices(center: int, half: int, extent: int) -> np.ndarray:
    """Window indices reflected about the edges (no edge duplication)."""
    idx = np.arange(center - half, center + half + 1)
    if extent == 1:
        return np.zeros_like(idx)
    period = 2 * (extent - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= extent, period - idx, idx)


def extract_patch(
    aux: np.ndarray,
    hsi: np.ndarray,
    gt: np.ndarray,
    row: int,
    col: int,
    patch_size: int,
    require_label: bool = True,
) -> tuple[np.ndarray, np.ndarray, int]:
    """(aux patch, hsi patch, center label); borders are mirror-padded."""
    if patch_size % 2 != 1:
        raise ConfigError(f"patch_size: must be odd, got {patch_size}")
    half = patch_size // 2
    rows = _mirror_indices(row, half, gt.shape[0])
    cols = _mirror_indices(col, half, gt.shape[1])
    label = int(gt[row, col])
    if require_label and label == 0:
        raise SampleError(f"pixel ({row}, {col}) is unlabeled")
    x1 = aux[:, rows[:, None], cols[None, :]].copy()
    x2 = hsi[:, rows[:, None], cols[None, :]].copy()
    return x1, x2, label


# -- train/test splits ---------------------------------------------------------------


@dataclass
class SplitManifest:
    """Per-class train/test pixel coordinates."""

    train: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    test: dict[int, list[tuple[int, int]]] = field(default_factory=dict)

    def counts(self) -> dict[int, tuple[int, int]]:
        return {c: (len(self.train[c]), len(self.test[c])) for c in sorted(self.train)}

    def items(self, part: str) -> list[tuple[int, int, int]]:
        """(row, col, label) triples, ordered by class then position."""
        table = self.train if part == "train" else self.test
        out = []
        for c in sorted(table):
            out += [(r, q, c) for r, q in table[c]]
        return out


def split_samples(gt: np.ndarray, per_class_train, seed: int) -> SplitManifest:
    """Seeded without-replacement draw per class; the remainder is test."""
    manifest = SplitManifest()
    labels = np.unique(gt)
    labels = labels[labels > 0]
    for c in labels.tolist():
        coords = np.argwhere(gt == c)
        population = len(coords)
        if isinstance(per_class_train, float) and 0 <= per_class_train < 1:
            take = round_half_up(per_class_train * population)
        else:
            take = int(per_class_train)
        if take < 0 or population <= take:
            raise ConfigError(
                f"per_class_train: class {c} has {population} pixels, cannot draw {take} train samples"
            )
        order = seeds.generator(seed, seeds.SPLIT, int(c)).permutation(population)
        chosen = set(order[:take].tolist())
        manifest.train[c] = [tuple(coords[i]) for i in sorted(chosen)]
        manifest.test[c] = [tuple(coords[i]) for i in range(population) if i not in chosen]
    return manifest


def write_split_csv(manifest: SplitManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "row", "col", "split"])
        for part in ("train", "test"):
            for row, col, label in manifest.items(part):
                writer.writerow([label, row, col, part])


def read_split_csv(path) -> SplitManifest:
    manifest = SplitManifest()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["class", "row", "col", "split"]:
            raise ConfigError(f"split manifest {path} has unexpected header {header}")
        for label, row, col, part in reader:
            table = manifest.train if part == "train" else manifest.test
            table.setdefault(int(label), []).append((int(row), int(col)))
    return manifest


# -- tensor container ------------------------------------------------------------------

MAGIC = b"MST1"
_DTYPE_CODES: dict[int, np.dtype] = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<u2"),
    3: np.dtype("<u1"),
}
_CODE_FOR_KIND = {np.float64: 0, np.float32: 1, np.uint16: 2, np.uint8: 3}
_MAX_ELEMENTS = 1 << 48


def write_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named tensors to the portable container (see read_tensors)."""
    if len(named) >= 1 << 16:
        raise ConfigError(f"named: at most {(1 << 16) - 1} tensors per file, got {len(named)}")
    blob = bytearray(MAGIC)
    blob += struct.pack("<H", len(named))
    for name, array in named.items():
        encoded = name.encode("ascii")
        if len(encoded) >= 1 << 16:
            raise ConfigError(f"named: tensor name too long ({len(encoded)} bytes)")
        array = np.asarray(array)
        if not array.flags.c_contiguous:  # ascontiguousarray would promote rank 0 to rank 1
            array = array.copy()
        code = _CODE_FOR_KIND.get(array.dtype.type)
        if code is None:
            raise ConfigError(f"named: unsupported dtype {array.dtype} for tensor {name!r}")
        if array.ndim >= 1 << 8:
            raise ConfigError(f"named: rank {array.ndim} too large for tensor {name!r}")
        if any(extent >= 1 << 32 for extent in array.shape):
            raise ConfigError(f"named: extent overflow in tensor {name!r} with shape {array.shape}")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", code, array.ndim)
        for extent in array.shape:
            blob += struct.pack("<I", extent)
        blob += array.astype(_DTYPE_CODES[code], copy=False).tobytes()
    Path(path).write_bytes(bytes(blob))


def read_tensors(path) -> dict[str, np.ndarray]:
    """Parse a container file: magic 'MST1', u16 entry count, then per entry
    (u16 name length, name, u8 dtype, u8 rank, rank x u32 LE extents,
    row-major LE payload)."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    offset = 4
    count, offset = _unpack(blob, "<H", offset)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, offset = _unpack(blob, "<H", offset)
        if offset + name_len > len(blob):
            raise FormatError("truncated tensor name", offset)
        name = blob[offset : offset + name_len].decode("ascii")
        offset += name_len
        code, offset = _unpack(blob, "<B", offset)
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code}", offset - 1)
        rank, offset = _unpack(blob, "<B", offset)
        shape = []
        for _ in range(rank):
            extent, offset = _unpack(blob, "<I", offset)
            shape.append(extent)
        elements = math.prod(shape)
        if elements > _MAX_ELEMENTS:
            raise FormatError(f"shape overflow: {tuple(shape)}", offset)
        dtype = _DTYPE_CODES[code]
        nbytes = elements * dtype.itemsize
        if offset + nbytes > len(blob):
            raise FormatError(f"truncated payload for tensor {name!r}", offset)
        out[name] = np.frombuffer(blob, dtype=dtype, count=elements, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after last tensor", offset)
    return out


def _unpack(blob: bytes, fmt: str, offset: int):
    size = struct.calcsize(fmt)
    if offset + size > len(blob):
        raise FormatError("truncated header", offset)
    return struct.unpack_from(fmt, blob, offset)[0], offset + size


# -- scene persistence ----------------------------------------------------------------------


def write_scene(scene: Scene, path) -> None:
    write_tensors(
        path,
        {
            "hsi": scene.hsi,
            "aux": scene.aux,
            "gt": scene.gt.astype(np.uint16),
            "sig_hsi": scene.sig_hsi,
            "sig_aux": scene.sig_aux,
            "seed": np.asarray([float(scene.seed)]),
            "noise_sigma": np.asarray([scene.noise_sigma]),
        },
    )


def read_scene(path) -> Scene:
    entries = read_tensors(path)
    for key in ("hsi", "aux", "gt", "sig_hsi", "sig_aux", "seed", "noise_sigma"):
        if key not in entries:
            raise ContractError(f"scene file {path} missing tensor {key!r}")
    return Scene(
        hsi=entries["hsi"].astype(np.float64),
        aux=entries["aux"].astype(np.float64),
        gt=entries["gt"],
        seed=int(entries["seed"][0]),
        sig_hsi=entries["sig_hsi"],
        sig_aux=entries["sig_aux"],
        noise_sigma=float(entries["noise_sigma"][0]),
    )
