"""Spatial-spectral masked autoencoder for multi-source patch classification."""

from .attention import (
    BranchParams,
    TokenBatch,
    TransformerConfig,
    attention_block,
    decode,
    encode,
    positional_embedding,
    tokenize_spatial,
    tokenize_spectral,
)
from .config import RunConfig, load_config
from .data import (
    PcaModel,
    Scene,
    SceneConfig,
    SplitManifest,
    extract_patch,
    generate_scene,
    pca_apply,
    pca_fit,
    read_scene,
    read_tensors,
    split_samples,
    write_scene,
    write_tensors,
)
from .irb import IrbParams, IrbStack, irb2d, irb3d, irb_tokens
from .masking import MaskSpec, MaskedTensor, apply_spatial_mask, apply_spectral_mask, sample_mask
from .metrics import ConfusionMatrix, MetricsResult, confusion, metrics
from .pipelines import (
    Adam,
    ModelParams,
    build_pretraining_model,
    build_training_model,
    classify,
    load_checkpoint,
    pretrain_step,
    reconstruction_loss,
    save_checkpoint,
    train_step,
)
from .tensor import BatchNormState, Tensor, batch_norm, convolve, cross_entropy, gelu, grad_check, mse_masked, no_grad, softmax

__version__ = "0.1.0"
