"""Dual-branch Transformer encoder-decoder over pixel tokens and band tokens.

The spatial branch treats each visible pixel column as a token; the
spectral branch treats each visible band as a token. Both share the same
block structure: multi-head attention with a learnable per-head softmax
temperature, a residual add, and a 4x-expansion feed-forward network with
GELU, again with a residual add. No normalization layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .masking import SPATIAL, SPECTRAL, MaskedTensor, MaskSpec
from .tensor import Tensor, affine, bmm, gelu, matmul, permute, reshape, softmax, texp, transpose

GRID2D = "grid2d"
LINE1D = "line1d"

PIXEL = "pixel"
BAND = "band"
IRB = "irb"


@dataclass(frozen=True)
class TransformerConfig:
    """Shared structural hyperparameters of both branches."""

    channels: int
    blocks: int = 2
    token_dim: int = 256
    heads: int = 8
    patch_size: int = 7

    def __post_init__(self):
        if self.token_dim % self.heads != 0:
            raise ConfigError(
                f"token_dim: must be divisible by heads, got {self.token_dim} / {self.heads}"
            )


@dataclass
class TokenBatch:
    """Uniform-dimension token rows with their original unit indices."""

    tokens: Tensor
    origin: str
    unit_ids: tuple[int, ...]

    def __post_init__(self):
        if self.tokens.shape[0] != len(self.unit_ids):
            raise ContractError(
                f"{self.tokens.shape[0]} tokens but {len(self.unit_ids)} unit ids"
            )

    @property
    def count(self) -> int:
        return len(self.unit_ids)


@dataclass
class Linear:
    """y = x W^T + b with weight (out, in); b may be absent."""

    w: Tensor
    b: Tensor | None

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.w, self.b)

    @staticmethod
    def init(out_dim: int, in_dim: int, rng: np.random.Generator, bias: bool = True) -> "Linear":
        bound = math.sqrt(1.0 / in_dim)
        w = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)
        b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None
        return Linear(w, b)


@dataclass
class BlockParams:
    """One attention + FFN block."""

    wq: Linear
    wk: Linear
    wv: Linear
    alpha_log: Tensor
    ffn_in: Linear
    ffn_out: Linear

    @staticmethod
    def init(d: int, heads: int, rng: np.random.Generator) -> "BlockParams":
        # no key bias: softmax is invariant to row-constant logit shifts,
        # so a key bias would be an exactly-dead parameter
        return BlockParams(
            wq=Linear.init(d, d, rng),
            wk=Linear.init(d, d, rng, bias=False),
            wv=Linear.init(d, d, rng),
            alpha_log=Tensor(np.full(heads, math.log(math.sqrt(d / heads))), requires_grad=True),
            ffn_in=Linear.init(4 * d, d, rng),
            ffn_out=Linear.init(d, 4 * d, rng),
        )


@dataclass
class BranchParams:
    """All parameters of one encoder/decoder branch."""

    kind: str  # SPATIAL or SPECTRAL
    raw_dim: int
    total_units: int
    embed: Linear
    pos: np.ndarray
    enc_blocks: list[BlockParams]
    dec_blocks: list[BlockParams]
    mask_token: Tensor
    out_head: Linear

    @staticmethod
    def init(cfg: TransformerConfig, kind: str, rng: np.random.Generator) -> "BranchParams":
        p, c, d = cfg.patch_size, cfg.channels, cfg.token_dim
        if kind == SPATIAL:
            raw_dim, total, pos_kind = c, p * p, GRID2D
        elif kind == SPECTRAL:
            raw_dim, total, pos_kind = p * p, c, LINE1D
        else:
            raise ConfigError(f"kind: unknown branch kind {kind!r}")
        return BranchParams(
            kind=kind,
            raw_dim=raw_dim,
            total_units=total,
            embed=Linear.init(d, raw_dim, rng),
            pos=positional_embedding(pos_kind, total, d),
            enc_blocks=[BlockParams.init(d, cfg.heads, rng) for _ in range(cfg.blocks)],
            dec_blocks=[BlockParams.init(d, cfg.heads, rng) for _ in range(cfg.blocks)],
            mask_token=Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True),
            out_head=Linear.init(raw_dim, d, rng),
        )


def positional_embedding(kind: str, total_units: int, d: int) -> np.ndarray:
    """Fixed sinusoidal position table, deterministic in (total_units, d)."""
    if d % 2 != 0:
        raise ConfigError(f"token_dim: positional embedding needs an even dim, got {d}")
    if kind == LINE1D:
        return _sincos_1d(np.arange(total_units), d)
    if kind == GRID2D:
        if d % 4 != 0:
            raise ConfigError(f"token_dim: grid2d embedding needs dim divisible by 4, got {d}")
        side = math.isqrt(total_units)
        if side * side != total_units:
            raise ConfigError(f"total_units: grid2d needs a square unit count, got {total_units}")
        rows = np.repeat(np.arange(side), side)
        cols = np.tile(np.arange(side), side)
        return np.concatenate([_sincos_1d(rows, d // 2), _sincos_1d(cols, d // 2)], axis=1)
    raise ConfigError(f"kind: unknown positional embedding kind {kind!r}")


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    angles = positions[:, None] * freqs[None, :]
    table = np.empty((positions.size, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


# -- tokenization -------------------------------------------------------------


def tokenize_spatial(masked: MaskedTensor, branch: BranchParams) -> TokenBatch:
    """Embed each visible pixel column and add its grid position row."""
    if masked.spec.mode != SPATIAL:
        raise ContractError(f"tokenize_spatial needs a spatial mask, got {masked.spec.mode!r}")
    return _tokenize(masked, branch, PIXEL)


def tokenize_spectral(masked: MaskedTensor, branch: BranchParams) -> TokenBatch:
    """Embed each visible band image and add its band position row."""
    if masked.spec.mode != SPECTRAL:
        raise ContractError(f"tokenize_spectral needs a spectral mask, got {masked.spec.mode!r}")
    return _tokenize(masked, branch, BAND)


def _tokenize(masked: MaskedTensor, branch: BranchParams, origin: str) -> TokenBatch:
    vis = masked.spec.visible
    if not vis:
        raise ContractError("cannot tokenize a fully masked image (no visible units)")
    if masked.visible.shape[1] != branch.raw_dim:
        raise ContractError(
            f"visible unit dim {masked.visible.shape[1]} does not match branch raw dim {branch.raw_dim}"
        )
    if masked.spec.total_units != branch.total_units:
        raise ContractError(
            f"mask covers {masked.spec.total_units} units, branch expects {branch.total_units}"
        )
    tokens = branch.embed(masked.visible) + Tensor(branch.pos[list(vis)])
    return TokenBatch(tokens=tokens, origin=origin, unit_ids=vis)


# -- transformer blocks ----------------------------------------------------------


def attention_block(
    x: TokenBatch,
    params: BlockParams,
    heads: int,
    capture: list | None = None,
) -> TokenBatch:
    """Multi-head attention + residual, then GELU FFN + residual.

    Per head the map softmax(Q K^T / alpha) is normalized over the axis
    contracted with V, so each output token is a convex combination of the
    value tokens. All heads run as one batched product over feature slices
    of width d/heads. When ``capture`` is given, each head's attention map
    is appended to it as a numpy array.
    """
    t = x.tokens
    n, d = t.shape
    if d % heads != 0:
        raise ConfigError(f"heads: token dim {d} not divisible by {heads}")
    dh = d // heads
    split = lambda y: permute(reshape(y, (n, heads, dh)), (1, 0, 2))  # (H, n, dh)
    qh = split(params.wq(t))
    kh = split(params.wk(t))
    vh = split(params.wv(t))
    alpha = reshape(texp(params.alpha_log), (heads, 1, 1))
    attn = softmax(bmm(qh, permute(kh, (0, 2, 1))) / alpha, axis=2)
    if capture is not None:
        for h in range(heads):
            capture.append(attn.data[h].copy())
    merged = reshape(permute(bmm(attn, vh), (1, 0, 2)), (n, d))
    attended = merged + t
    ffn = params.ffn_out(gelu(params.ffn_in(attended))) + attended
    return TokenBatch(tokens=ffn, origin=x.origin, unit_ids=x.unit_ids)


def encode(visible: TokenBatch, cfg: TransformerConfig, branch: BranchParams) -> TokenBatch:
    """Run the encoder stack; token count and unit ids are preserved."""
    out = visible
    for block in branch.enc_blocks:
        out = attention_block(out, block, cfg.heads)
    return out


def decode(
    encoded: TokenBatch,
    spec: MaskSpec,
    cfg: TransformerConfig,
    branch: BranchParams,
) -> Tensor:
    """Fill masked positions with the mask token, decode, and reassemble.

    Output is always a (C, P, P) reconstruction regardless of branch.
    """
    if tuple(encoded.unit_ids) != spec.visible:
        raise ContractError("encoded unit ids do not match the mask's visible set")
    total, d = branch.total_units, cfg.token_dim
    n_vis = encoded.count
    scatter = np.zeros((total, n_vis))
    for row, unit in enumerate(encoded.unit_ids):
        scatter[unit, row] = 1.0
    mask_rows = np.zeros((total, 1))
    mask_rows[list(spec.masked)] = 1.0
    full = (
        matmul(Tensor(scatter), encoded.tokens)
        + matmul(Tensor(mask_rows), reshape(branch.mask_token, (1, d)))
        + Tensor(branch.pos)
    )
    tokens = TokenBatch(tokens=full, origin=encoded.origin, unit_ids=tuple(range(total)))
    for block in branch.dec_blocks:
        tokens = attention_block(tokens, block, cfg.heads)
    raw = branch.out_head(tokens.tokens)
    p, c = cfg.patch_size, cfg.channels
    if branch.kind == SPATIAL:
        return reshape(transpose(raw), (c, p, p))
    return reshape(raw, (c, p, p))
