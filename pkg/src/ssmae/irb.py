"""Inverted residual blocks: the lightweight local-feature CNNs.

Each block is pointwise-expand (ratio 2) -> BN + GELU -> core convolution
with a residual add -> BN + GELU -> pointwise-project back. The 2-D variant
uses a 3x3 depthwise core; the 3-D variant treats the input as one volume
over (band, row, col) and uses a 3x3x3 depthwise core. Output extents always
equal input extents (zero same-padding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import IRB, Linear, TokenBatch
from .errors import ConfigError
from .tensor import BatchNormState, Tensor, batch_norm, convolve, gelu, reshape, transpose

VARIANT_2D = "2d"
VARIANT_3D = "3d"
EXPANSION = 2


@dataclass
class IrbParams:
    """Parameters of one inverted residual block.

    The expansion conv carries no bias: batch norm right after it centers
    each channel, which would cancel any channel-constant shift exactly.
    """

    variant: str
    w2: Tensor  # pointwise expansion kernel
    core: Tensor  # depthwise 3x3 or per-volume 3x3x3 kernel
    w1: Tensor  # pointwise projection kernel
    b1: Tensor
    bn1: BatchNormState
    bn2: BatchNormState

    @staticmethod
    def init(variant: str, channels: int, rng: np.random.Generator) -> "IrbParams":
        if variant == VARIANT_2D:
            c_in, expanded, core_shape, core_fan = channels, EXPANSION * channels, None, 9
            core_shape = (expanded, 3, 3)
        elif variant == VARIANT_3D:
            # volumes, not bands: the whole band stack is one 3-D grid
            c_in, expanded, core_fan = 1, EXPANSION, 27
            core_shape = (expanded, 3, 3, 3)
        else:
            raise ConfigError(f"variant: unknown IRB variant {variant!r}")

        def uniform(shape, fan_in):
            bound = math.sqrt(1.0 / fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        return IrbParams(
            variant=variant,
            w2=uniform((expanded, c_in), c_in),
            core=uniform(core_shape, core_fan),
            w1=uniform((c_in, expanded), expanded),
            b1=Tensor(np.zeros(c_in), requires_grad=True),
            bn1=BatchNormState(expanded),
            bn2=BatchNormState(expanded),
        )


@dataclass
class IrbStack:
    """Three sequential blocks plus the per-pixel projection to tokens."""

    blocks: list[IrbParams]
    token_proj: Linear

    @staticmethod
    def init(variant: str, channels: int, token_dim: int, rng: np.random.Generator, depth: int = 3) -> "IrbStack":
        blocks = [IrbParams.init(variant, channels, rng) for _ in range(depth)]
        return IrbStack(blocks=blocks, token_proj=Linear.init(token_dim, channels, rng))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for block in self.blocks:
            x = irb3d(x, block, training) if block.variant == VARIANT_3D else irb2d(x, block, training)
        return x


def _bn(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    # batch_norm wants a leading batch axis; blocks run on single patches
    batched = reshape(x, (1,) + x.shape)
    return reshape(batch_norm(batched, state, training), x.shape)


def irb2d(x: Tensor, params: IrbParams, training: bool = True) -> Tensor:
    """2-D block on a (c, P, P) patch; output has the same shape."""
    expanded = convolve(x, params.w2, "pointwise")
    expanded = gelu(_bn(expanded, params.bn1, training))
    local = convolve(expanded, params.core, "depthwise3x3") + expanded
    local = gelu(_bn(local, params.bn2, training))
    return convolve(local, params.w1, "pointwise") + reshape(params.b1, (-1, 1, 1))


def irb3d(x: Tensor, params: IrbParams, training: bool = True) -> Tensor:
    """3-D block on a (c, P, P) patch viewed as one (band, row, col) volume."""
    volume = reshape(x, (1,) + x.shape)
    expanded = convolve(volume, params.w2, "pointwise")
    expanded = gelu(_bn(expanded, params.bn1, training))
    local = convolve(expanded, params.core, "conv3d") + expanded
    local = gelu(_bn(local, params.bn2, training))
    projected = convolve(local, params.w1, "pointwise") + reshape(params.b1, (-1, 1, 1, 1))
    return reshape(projected, x.shape)


def irb_tokens(y: Tensor, proj: Linear) -> TokenBatch:
    """Project each pixel's channel vector to a token (P*P tokens)."""
    c = y.shape[0]
    pixels = transpose(reshape(y, (c, -1)))
    return TokenBatch(tokens=proj(pixels), origin=IRB, unit_ids=tuple(range(pixels.shape[0])))
