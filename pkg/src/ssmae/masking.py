"""Spatial-wise and spectral-wise random masking of multi-band patches.

A spatial unit is one pixel column (all channels at one location); a
spectral unit is one whole band. Masks are drawn by seeded shuffle so the
same seed always reproduces the same selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import seeds
from .errors import ConfigError, ContractError, MaskError
from .tensor import Tensor

SPATIAL = "spatial"
SPECTRAL = "spectral"


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from zero (for x >= 0)."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskSpec:
    """A seeded selection of masked unit indices plus the masking mode."""

    mode: str
    total_units: int
    masked: tuple[int, ...]
    seed: int
    protected: frozenset[int]

    def __post_init__(self):
        if self.mode not in (SPATIAL, SPECTRAL):
            raise ContractError(f"unknown mask mode {self.mode!r}")
        masked = set(self.masked)
        if len(masked) != len(self.masked) or any(u < 0 or u >= self.total_units for u in masked):
            raise MaskError(f"masked units must be unique and lie in [0, {self.total_units})")
        if masked & self.protected:
            raise MaskError(f"masked units overlap protected units: {sorted(masked & self.protected)}")

    @property
    def visible(self) -> tuple[int, ...]:
        masked = set(self.masked)
        return tuple(u for u in range(self.total_units) if u not in masked)

    def element_mask(self, shape: tuple[int, int, int]) -> np.ndarray:
        """Binary (C, P, P) array with 1 at every element of a masked unit."""
        c, p, q = shape
        mask = np.zeros(shape)
        if self.mode == SPATIAL:
            if self.total_units != p * q:
                raise ContractError(f"spatial spec covers {self.total_units} units, image has {p * q} pixels")
            flat = mask.reshape(c, p * q)
            flat[:, list(self.masked)] = 1.0
        else:
            if self.total_units != c:
                raise ContractError(f"spectral spec covers {self.total_units} units, image has {c} bands")
            mask[list(self.masked)] = 1.0
        return mask


@dataclass
class MaskedTensor:
    """Visible units of a masked image, kept in original unit order.

    Rows of ``visible`` are pixels (spatial mode, dim C) or bands
    (spectral mode, dim P*P).
    """

    visible: Tensor
    spec: MaskSpec
    original_shape: tuple[int, int, int]

    def reassemble(self) -> np.ndarray:
        """The masked image: visible units in place, masked units zero-filled."""
        c, p, q = self.original_shape
        image = np.zeros(self.original_shape)
        vis = self.spec.visible
        if self.spec.mode == SPATIAL:
            flat = image.reshape(c, p * q)
            flat[:, list(vis)] = self.visible.data.T
        else:
            for row, band in enumerate(vis):
                image[band] = self.visible.data[row].reshape(p, q)
        return image


def sample_mask(
    total_units: int,
    ratio: float,
    seed: int,
    protected: Iterable[int] = (),
    mode: str = SPATIAL,
) -> MaskSpec:
    """Uniformly sample round(ratio * eligible) unit indices without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"ratio: must lie in [0, 1], got {ratio}")
    protected = frozenset(protected)
    if any(u < 0 or u >= total_units for u in protected):
        raise ConfigError(f"protected: indices must lie in [0, {total_units})")
    eligible = [u for u in range(total_units) if u not in protected]
    count = round_half_up(ratio * len(eligible))
    order = seeds.generator(seed).permutation(len(eligible))
    masked = tuple(sorted(eligible[i] for i in order[:count]))
    return MaskSpec(mode=mode, total_units=total_units, masked=masked, seed=seed, protected=protected)


def apply_spatial_mask(image: Tensor | np.ndarray, spec: MaskSpec) -> MaskedTensor:
    """Drop masked pixel columns; visible pixels keep raster order."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim != 3:
        raise ContractError(f"expected a (C, P, P) image, got shape {data.shape}")
    c, p, q = data.shape
    if spec.mode != SPATIAL:
        raise ContractError(f"spatial masking needs a spatial spec, got {spec.mode!r}")
    if spec.total_units != p * q:
        raise ContractError(f"spec covers {spec.total_units} units, image has {p * q} pixels")
    pixels = data.reshape(c, p * q).T
    visible = Tensor(pixels[list(spec.visible)].copy())
    return MaskedTensor(visible=visible, spec=spec, original_shape=(c, p, q))


def apply_spectral_mask(image: Tensor | np.ndarray, spec: MaskSpec) -> MaskedTensor:
    """Drop masked whole bands; visible bands keep channel order."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim != 3:
        raise ContractError(f"expected a (C, P, P) image, got shape {data.shape}")
    c, p, q = data.shape
    if spec.mode != SPECTRAL:
        raise ContractError(f"spectral masking needs a spectral spec, got {spec.mode!r}")
    if spec.total_units != c:
        raise ContractError(f"spec covers {spec.total_units} units, image has {c} bands")
    bands = data.reshape(c, p * q)
    visible = Tensor(bands[list(spec.visible)].copy())
    return MaskedTensor(visible=visible, spec=spec, original_shape=(c, p, q))
