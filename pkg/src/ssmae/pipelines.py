"""End-to-end pretraining and training steps, optimizer, and checkpoints.

Pretraining: per patch, concatenate both modalities, draw independent
spatial and spectral masks, reconstruct through both branches, and minimize
the weighted sum of the two masked MSE terms. Training: unmasked encoder
features plus IRB tokens from both modalities, mean-pooled into a linear
classifier under cross-entropy; decoders are left untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import seeds
from .attention import (
    SPATIAL,
    SPECTRAL,
    BranchParams,
    Linear,
    TokenBatch,
    TransformerConfig,
    decode,
    encode,
    tokenize_spatial,
    tokenize_spectral,
)
from .errors import ConfigError, ContractError, DivergenceError, MaskError
from .irb import VARIANT_2D, VARIANT_3D, IrbStack, irb_tokens
from .masking import MaskSpec, apply_spatial_mask, apply_spectral_mask, sample_mask
from .tensor import Tensor, concat, cross_entropy, mse_masked, no_grad, tmean

DEFAULT_LOSS_WEIGHT = 2.0


@dataclass
class ModelParams:
    """Full parameter set: two branches, two IRB stacks, classifier head."""

    cfg: TransformerConfig
    aux_channels: int
    spa_branch: BranchParams
    spe_branch: BranchParams
    irb_aux: IrbStack | None = None
    irb_hsi: IrbStack | None = None
    classifier: Linear | None = None
    num_classes: int | None = None

    @property
    def hsi_channels(self) -> int:
        return self.cfg.channels - self.aux_channels

    @property
    def protected_bands(self) -> frozenset[int]:
        """Bands excluded from spectral masking (single-band aux only)."""
        if self.aux_channels == 1:
            return frozenset(range(self.aux_channels))
        return frozenset()


def build_pretraining_model(cfg: TransformerConfig, aux_channels: int, seed: int) -> ModelParams:
    """Branch parameters only; the training head comes later."""
    if not 0 < aux_channels < cfg.channels:
        raise ConfigError(f"aux_channels: must lie in (0, {cfg.channels}), got {aux_channels}")
    rng = seeds.generator(seed, seeds.PARAMS_PRETRAIN)
    return ModelParams(
        cfg=cfg,
        aux_channels=aux_channels,
        spa_branch=BranchParams.init(cfg, SPATIAL, rng),
        spe_branch=BranchParams.init(cfg, SPECTRAL, rng),
    )


def build_training_model(
    cfg: TransformerConfig,
    aux_channels: int,
    num_classes: int,
    seed: int,
) -> ModelParams:
    """Branches plus IRB stacks and classifier for the supervised stage."""
    if num_classes < 2:
        raise ConfigError(f"num_classes: need at least 2 classes, got {num_classes}")
    model = build_pretraining_model(cfg, aux_channels, seed)
    rng = seeds.generator(seed, seeds.PARAMS_TRAIN)
    model.irb_aux = IrbStack.init(VARIANT_2D, aux_channels, cfg.token_dim, rng)
    model.irb_hsi = IrbStack.init(VARIANT_3D, model.hsi_channels, cfg.token_dim, rng)
    model.classifier = Linear.init(num_classes, cfg.token_dim, rng)
    model.num_classes = num_classes
    return model


# -- parameter naming -------------------------------------------------------------


def _named_linear(prefix: str, lin: Linear):
    named = [(f"{prefix}.w", lin.w)]
    if lin.b is not None:
        named.append((f"{prefix}.b", lin.b))
    return named


def _named_block(prefix: str, block):
    named = []
    for tag, lin in (("wq", block.wq), ("wk", block.wk), ("wv", block.wv)):
        named += _named_linear(f"{prefix}.{tag}", lin)
    named.append((f"{prefix}.alpha_log", block.alpha_log))
    named += _named_linear(f"{prefix}.ffn_in", block.ffn_in)
    named += _named_linear(f"{prefix}.ffn_out", block.ffn_out)
    return named


def _named_branch(prefix: str, branch: BranchParams, encoder_only: bool = False):
    named = _named_linear(f"{prefix}.embed", branch.embed)
    for i, block in enumerate(branch.enc_blocks):
        named += _named_block(f"{prefix}.enc.{i}", block)
    if encoder_only:
        return named
    for i, block in enumerate(branch.dec_blocks):
        named += _named_block(f"{prefix}.dec.{i}", block)
    named.append((f"{prefix}.mask_token", branch.mask_token))
    named += _named_linear(f"{prefix}.out_head", branch.out_head)
    return named


def _named_irb(prefix: str, stack: IrbStack):
    named = []
    for i, block in enumerate(stack.blocks):
        base = f"{prefix}.{i}"
        named += [
            (f"{base}.w2", block.w2),
            (f"{base}.core", block.core),
            (f"{base}.w1", block.w1),
            (f"{base}.b1", block.b1),
            (f"{base}.bn1.gamma", block.bn1.gamma),
            (f"{base}.bn1.beta", block.bn1.beta),
            (f"{base}.bn2.gamma", block.bn2.gamma),
            (f"{base}.bn2.beta", block.bn2.beta),
        ]
    named += _named_linear(f"{prefix}.token_proj", stack.token_proj)
    return named


def named_parameters(model: ModelParams) -> list[tuple[str, Tensor]]:
    """Every learnable tensor with a stable dotted name."""
    named = _named_branch("spa", model.spa_branch) + _named_branch("spe", model.spe_branch)
    if model.irb_aux is not None:
        named += _named_irb("irb_aux", model.irb_aux)
    if model.irb_hsi is not None:
        named += _named_irb("irb_hsi", model.irb_hsi)
    if model.classifier is not None:
        named += _named_linear("classifier", model.classifier)
    return named


def named_buffers(model: ModelParams) -> list[tuple[str, np.ndarray]]:
    """Non-learnable running state (batch-norm statistics)."""
    buffers = []
    for prefix, stack in (("irb_aux", model.irb_aux), ("irb_hsi", model.irb_hsi)):
        if stack is None:
            continue
        for i, block in enumerate(stack.blocks):
            for tag, bn in (("bn1", block.bn1), ("bn2", block.bn2)):
                buffers.append((f"{prefix}.{i}.{tag}.running_mean", bn.running_mean))
                buffers.append((f"{prefix}.{i}.{tag}.running_var", bn.running_var))
    return buffers


def pretraining_parameters(model: ModelParams) -> list[tuple[str, Tensor]]:
    """The update set of the reconstruction stage: both branches, in full."""
    return _named_branch("spa", model.spa_branch) + _named_branch("spe", model.spe_branch)


def finetuning_parameters(model: ModelParams) -> list[tuple[str, Tensor]]:
    """The update set of the supervised stage: encoders, IRBs, classifier.

    Decoder blocks, mask tokens, and reconstruction heads stay frozen.
    """
    if model.classifier is None or model.irb_aux is None or model.irb_hsi is None:
        raise ContractError("finetuning needs a training-stage model (IRBs + classifier)")
    named = _named_branch("spa", model.spa_branch, encoder_only=True)
    named += _named_branch("spe", model.spe_branch, encoder_only=True)
    named += _named_irb("irb_aux", model.irb_aux)
    named += _named_irb("irb_hsi", model.irb_hsi)
    named += _named_linear("classifier", model.classifier)
    return named


# -- optimizer -----------------------------------------------------------------------


class Adam:
    """Bias-corrected adaptive-moment optimizer over named parameters."""

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float | None = None,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def _clip_scale(self) -> float:
        if self.clip_norm is None:
            return 1.0
        squared = 0.0
        for name, p in self.params:
            if p.grad is not None:
                squared += float((p.grad * p.grad).sum())
        norm = math.sqrt(squared)
        return 1.0 if norm <= self.clip_norm else self.clip_norm / norm

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        scale = self._clip_scale()
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise DivergenceError("non-finite gradient", name)
            else:
                g = g * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- losses and forward paths -----------------------------------------------------------


def reconstruction_loss(
    target: Tensor,
    recon_spatial: Tensor,
    recon_spectral: Tensor,
    spa_spec: MaskSpec,
    spe_spec: MaskSpec,
    weight: float = DEFAULT_LOSS_WEIGHT,
) -> Tensor:
    """weight * masked-MSE(spatial) + masked-MSE(spectral)."""
    spa, spe = reconstruction_terms(target, recon_spatial, recon_spectral, spa_spec, spe_spec)
    return weight * spa + spe


def reconstruction_terms(
    target: Tensor,
    recon_spatial: Tensor,
    recon_spectral: Tensor,
    spa_spec: MaskSpec,
    spe_spec: MaskSpec,
) -> tuple[Tensor, Tensor]:
    if not spa_spec.masked or not spe_spec.masked:
        raise MaskError("both mask specs must mask at least one unit")
    shape = target.shape
    spa = mse_masked(recon_spatial, target, spa_spec.element_mask(shape))
    spe = mse_masked(recon_spectral, target, spe_spec.element_mask(shape))
    return spa, spe


def _reconstruct(image: Tensor, spec: MaskSpec, branch: BranchParams, cfg: TransformerConfig) -> Tensor:
    if branch.kind == SPATIAL:
        tokens = tokenize_spatial(apply_spatial_mask(image, spec), branch)
    else:
        tokens = tokenize_spectral(apply_spectral_mask(image, spec), branch)
    return decode(encode(tokens, cfg, branch), spec, cfg, branch)


@dataclass(frozen=True)
class PretrainLosses:
    """Batch-mean loss terms of one pretraining step."""

    spatial: float
    spectral: float
    weight: float

    @property
    def total(self) -> float:
        return self.weight * self.spatial + self.spectral


def pretrain_step(
    batch: list[tuple[np.ndarray, np.ndarray]],
    model: ModelParams,
    opt: Adam,
    ratios: tuple[float, float],
    seed: int,
    weight: float = DEFAULT_LOSS_WEIGHT,
) -> PretrainLosses:
    """One optimizer update on a batch of (aux, hsi) patch pairs."""
    cfg = model.cfg
    p = cfg.patch_size
    opt.zero_grad()
    spa_terms: list[Tensor] = []
    spe_terms: list[Tensor] = []
    for i, (x1, x2) in enumerate(batch):
        target = Tensor(np.concatenate([x1, x2], axis=0))
        if target.shape != (cfg.channels, p, p):
            raise ContractError(f"patch shape {target.shape} does not match config {(cfg.channels, p, p)}")
        spa_spec = sample_mask(
            p * p, ratios[0], seeds.derive(seed, seeds.MASK_SPATIAL, i), mode=SPATIAL
        )
        spe_spec = sample_mask(
            cfg.channels,
            ratios[1],
            seeds.derive(seed, seeds.MASK_SPECTRAL, i),
            protected=model.protected_bands,
            mode=SPECTRAL,
        )
        recon_spa = _reconstruct(target, spa_spec, model.spa_branch, cfg)
        recon_spe = _reconstruct(target, spe_spec, model.spe_branch, cfg)
        spa, spe = reconstruction_terms(target, recon_spa, recon_spe, spa_spec, spe_spec)
        spa_terms.append(spa)
        spe_terms.append(spe)
    inv_n = 1.0 / len(batch)
    spa_mean = _tensor_sum(spa_terms) * inv_n
    spe_mean = _tensor_sum(spe_terms) * inv_n
    loss = weight * spa_mean + spe_mean
    loss.backward()
    opt.step()
    return PretrainLosses(spatial=spa_mean.item(), spectral=spe_mean.item(), weight=weight)


def _tensor_sum(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def _empty_spec(mode: str, total_units: int) -> MaskSpec:
    return MaskSpec(mode=mode, total_units=total_units, masked=(), seed=0, protected=frozenset())


def _patch_logits(x1: np.ndarray, x2: np.ndarray, model: ModelParams, training: bool) -> Tensor:
    """Token concatenation -> mean pool -> classifier, for one patch pair."""
    cfg = model.cfg
    image = Tensor(np.concatenate([x1, x2], axis=0))
    spa_tokens = encode(
        tokenize_spatial(
            apply_spatial_mask(image, _empty_spec(SPATIAL, cfg.patch_size**2)), model.spa_branch
        ),
        cfg,
        model.spa_branch,
    )
    spe_tokens = encode(
        tokenize_spectral(
            apply_spectral_mask(image, _empty_spec(SPECTRAL, cfg.channels)), model.spe_branch
        ),
        cfg,
        model.spe_branch,
    )
    aux_tokens = irb_tokens(model.irb_aux(Tensor(x1), training), model.irb_aux.token_proj)
    hsi_tokens = irb_tokens(model.irb_hsi(Tensor(x2), training), model.irb_hsi.token_proj)
    stacked = concat(
        [spa_tokens.tokens, spe_tokens.tokens, aux_tokens.tokens, hsi_tokens.tokens], axis=0
    )
    pooled = tmean(stacked, axis=0, keepdims=True)
    return model.classifier(pooled)


def train_step(
    batch: list[tuple[np.ndarray, np.ndarray]],
    labels: np.ndarray,
    model: ModelParams,
    opt: Adam,
) -> float:
    """One supervised update; labels are 0-based class indices."""
    if model.classifier is None:
        raise ContractError("train_step needs a training-stage model (classifier missing)")
    opt.zero_grad()
    rows = [_patch_logits(x1, x2, model, training=True) for x1, x2 in batch]
    logits = concat(rows, axis=0)
    loss = cross_entropy(logits, labels)
    loss.backward()
    opt.step()
    return loss.item()


def classify(x1: np.ndarray, x2: np.ndarray, model: ModelParams) -> np.ndarray:
    """Deterministic class logits for one patch pair (inference mode)."""
    if model.classifier is None:
        raise ContractError("classify needs a training-stage model (classifier missing)")
    with no_grad():
        logits = _patch_logits(x1, x2, model, training=False)
    return logits.data[0].copy()


# -- checkpoints --------------------------------------------------------------------------


def save_checkpoint(model: ModelParams, path) -> None:
    """Write all parameters, buffers, and a config manifest to a container."""
    from . import data

    named: dict[str, np.ndarray] = {}
    cfg = model.cfg
    manifest = {
        "cfg.blocks": cfg.blocks,
        "cfg.token_dim": cfg.token_dim,
        "cfg.heads": cfg.heads,
        "cfg.patch_size": cfg.patch_size,
        "cfg.channels": cfg.channels,
        "cfg.aux_channels": model.aux_channels,
        "cfg.num_classes": -1 if model.num_classes is None else model.num_classes,
    }
    for key, value in manifest.items():
        named[key] = np.asarray([float(value)])
    for name, p in named_parameters(model):
        named[name] = p.data
    for name, buf in named_buffers(model):
        named[name] = buf
    data.write_tensors(path, named)


def load_checkpoint(path, seed: int = 0) -> ModelParams:
    """Rebuild a model from a checkpoint, validating every name and shape."""
    from . import data

    entries = data.read_tensors(path)

    def manifest_int(key: str) -> int:
        if key not in entries:
            raise ContractError(f"checkpoint missing manifest entry {key!r}")
        return int(entries[key][0])

    cfg = TransformerConfig(
        channels=manifest_int("cfg.channels"),
        blocks=manifest_int("cfg.blocks"),
        token_dim=manifest_int("cfg.token_dim"),
        heads=manifest_int("cfg.heads"),
        patch_size=manifest_int("cfg.patch_size"),
    )
    aux_channels = manifest_int("cfg.aux_channels")
    num_classes = manifest_int("cfg.num_classes")
    if num_classes < 0:
        model = build_pretraining_model(cfg, aux_channels, seed)
    else:
        model = build_training_model(cfg, aux_channels, num_classes, seed)
    for name, p in named_parameters(model):
        _restore(entries, name, p.data, path)
    for name, buf in named_buffers(model):
        _restore(entries, name, buf, path)
    return model


def load_pretrained_branches(model: ModelParams, path) -> None:
    """Overlay branch weights from a pretraining checkpoint onto a model."""
    pretrained = load_checkpoint(path)
    if pretrained.cfg != model.cfg or pretrained.aux_channels != model.aux_channels:
        raise ContractError("pretraining checkpoint config does not match the model config")
    source = dict(named_parameters(pretrained))
    for name, p in pretraining_parameters(model):
        p.data[...] = source[name].data


def _restore(entries: dict[str, np.ndarray], name: str, destination: np.ndarray, path) -> None:
    if name not in entries:
        raise ContractError(f"checkpoint {path} missing tensor {name!r}")
    value = entries[name]
    if value.shape != destination.shape:
        raise ContractError(
            f"checkpoint tensor {name!r} has shape {value.shape}, expected {destination.shape}"
        )
    destination[...] = value
