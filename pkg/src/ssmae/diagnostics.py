"""Gradient-check suite: every differentiable op plus the micro-model paths.

Used both by the ``grad-check`` CLI subcommand and by the acceptance tests.
The micro scale is patch 3x3, 5 channels (1 aux + 4 reduced HSI), token dim
8, one block, two heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeds, tensor
from .attention import SPATIAL, SPECTRAL, TransformerConfig, decode, encode, tokenize_spatial, tokenize_spectral
from .irb import IrbParams, IrbStack, VARIANT_2D, VARIANT_3D, irb2d, irb3d, irb_tokens
from .masking import apply_spatial_mask, apply_spectral_mask, sample_mask
from .pipelines import (
    build_pretraining_model,
    build_training_model,
    finetuning_parameters,
    pretraining_parameters,
    reconstruction_terms,
)
from .tensor import BatchNormState, Tensor, batch_norm, convolve, cross_entropy, gelu, grad_check, mse_masked, softmax

OP_TOL = 1e-5
END_TO_END_TOL = 1e-4

MICRO_PATCH = 3
MICRO_CHANNELS = 5
MICRO_AUX = 1
MICRO_DIM = 8
MICRO_BLOCKS = 1
MICRO_HEADS = 2


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e})"


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def check_ops(trials: int = 20) -> list[CheckResult]:
    """Each core op on random small shapes; worst relative error per op."""
    results = []

    def run(name, case, tol=OP_TOL, n=trials):
        worst = 0.0
        for trial in range(n):
            rng = seeds.generator(0xD1A6, len(results), trial)
            report = case(rng)
            worst = max(worst, report.max_rel_err)
        results.append(CheckResult(name, worst, tol))

    def matmul_case(rng):
        m, k, n = rng.integers(1, 6, size=3)
        a, b = _rand(rng, m, k), _rand(rng, k, n)
        w = rng.normal(size=(int(m), int(n)))
        return grad_check(lambda a, b: ((a @ b) * Tensor(w)).sum(), [a, b])

    def softmax_case(rng):
        rows, cols = rng.integers(1, 7, size=2)
        x = _rand(rng, rows, cols)
        axis = int(rng.integers(0, 2))
        w = rng.normal(size=(int(rows), int(cols)))
        return grad_check(lambda x: (softmax(x, axis) * Tensor(w)).sum(), [x])

    def gelu_case(rng):
        n = int(rng.integers(1, 30))
        x = _rand(rng, n)
        w = rng.normal(size=n)
        return grad_check(lambda x: (gelu(x) * Tensor(w)).sum(), [x])

    def pointwise_case(rng):
        c_in, c_out, p = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
        x, k = _rand(rng, c_in, p, p), _rand(rng, c_out, c_in)
        w = rng.normal(size=(c_out, p, p))
        return grad_check(lambda x, k: (convolve(x, k, "pointwise") * Tensor(w)).sum(), [x, k])

    def depthwise_case(rng):
        c, p = int(rng.integers(1, 4)), int(rng.integers(3, 6))
        x, k = _rand(rng, c, p, p), _rand(rng, c, 3, 3)
        w = rng.normal(size=(c, p, p))
        return grad_check(lambda x, k: (convolve(x, k, "depthwise3x3") * Tensor(w)).sum(), [x, k])

    def conv3d_case(rng):
        v, b, p = int(rng.integers(1, 3)), int(rng.integers(3, 5)), int(rng.integers(3, 5))
        x, k = _rand(rng, v, b, p, p), _rand(rng, v, 3, 3, 3)
        w = rng.normal(size=(v, b, p, p))
        return grad_check(lambda x, k: (convolve(x, k, "conv3d") * Tensor(w)).sum(), [x, k])

    def batch_norm_case(rng):
        n, c, p = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4))
        x = _rand(rng, n, c, p)
        state = BatchNormState(c)
        state.gamma = _rand(rng, c)
        state.beta = _rand(rng, c)
        w = rng.normal(size=(n, c, p))
        return grad_check(
            lambda x, g, b: (batch_norm(x, state, training=True) * Tensor(w)).sum(),
            [x, state.gamma, state.beta],
        )

    def mse_masked_case(rng):
        shape = tuple(int(v) for v in rng.integers(2, 5, size=2))
        pred, target = _rand(rng, *shape), _rand(rng, *shape)
        mask = (rng.random(shape) < 0.6).astype(float)
        if mask.sum() == 0:
            mask.flat[0] = 1.0
        return grad_check(lambda p, t: mse_masked(p, t, mask), [pred, target])

    def cross_entropy_case(rng):
        n, classes = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        logits = _rand(rng, n, classes)
        labels = rng.integers(0, classes, size=n)
        return grad_check(lambda z: cross_entropy(z, labels), [logits])

    def plumbing_case(rng):
        # add/sub/mul/div/exp/sqrt/narrow/concat/reshape/transpose/mean chain
        n = int(rng.integers(2, 5))
        a, b = _rand(rng, n, 4), _rand(rng, n, 4)
        w = rng.normal(size=(2 * n, 2))

        def f(a, b):
            mixed = (a + b) * tensor.texp(-b * 0.3) - a / (tensor.tsqrt(b * b + 1.0) + 0.5)
            left = tensor.narrow(mixed, 1, 0, 2)
            right = tensor.narrow(mixed, 1, 2, 2)
            stacked = tensor.concat([left, tensor.transpose(tensor.transpose(right))], axis=0)
            return (stacked * Tensor(w)).mean() + mixed.sum() * 0.01

        return grad_check(f, [a, b])

    run("op.matmul", matmul_case)
    run("op.softmax", softmax_case)
    run("op.gelu", gelu_case)
    run("op.convolve.pointwise", pointwise_case)
    run("op.convolve.depthwise3x3", depthwise_case)
    run("op.convolve.conv3d", conv3d_case)
    run("op.batch_norm", batch_norm_case)
    run("op.mse_masked", mse_masked_case)
    run("op.cross_entropy", cross_entropy_case)
    run("op.plumbing_chain", plumbing_case)
    return results


def micro_config() -> TransformerConfig:
    return TransformerConfig(
        channels=MICRO_CHANNELS,
        blocks=MICRO_BLOCKS,
        token_dim=MICRO_DIM,
        heads=MICRO_HEADS,
        patch_size=MICRO_PATCH,
    )


def check_branch_paths() -> list[CheckResult]:
    """encode -> decode gradcheck of both branches w.r.t. every branch parameter."""
    cfg = micro_config()
    model = build_pretraining_model(cfg, MICRO_AUX, seed=7)
    rng = seeds.generator(0xB0A7)
    image = rng.normal(size=(MICRO_CHANNELS, MICRO_PATCH, MICRO_PATCH))
    spa_spec = sample_mask(MICRO_PATCH**2, 0.5, seed=11, mode=SPATIAL)
    spe_spec = sample_mask(MICRO_CHANNELS, 0.5, seed=12, protected=(0,), mode=SPECTRAL)
    results = []
    for name, branch, spec, tokenize, applier in (
        ("path.spatial_encode_decode", model.spa_branch, spa_spec, tokenize_spatial, apply_spatial_mask),
        ("path.spectral_encode_decode", model.spe_branch, spe_spec, tokenize_spectral, apply_spectral_mask),
    ):
        params = [p for _, p in _branch_named(branch)]
        target = Tensor(image)
        mask = spec.element_mask(image.shape)

        def loss(*_):
            recon = decode(encode(tokenize(applier(target, spec), branch), cfg, branch), spec, cfg, branch)
            return mse_masked(recon, target, mask)

        # eps 1e-4 keeps FD round-off below tolerance on small-gradient coords
        report = grad_check(loss, params, epsilon=1e-4)
        results.append(CheckResult(name, report.max_rel_err, END_TO_END_TOL))
    return results


def _branch_named(branch):
    from .pipelines import _named_branch

    return _named_branch("branch", branch)


def check_irb_paths() -> list[CheckResult]:
    """Both IRB variants at micro scale, w.r.t. input and all block parameters.

    The 3-D variant's expansion kernel has a single input channel, so batch
    norm makes it exactly scale-invariant: its true gradient is zero and it
    is excluded from the finite-difference sweep (the zero is asserted in
    the unit tests instead).
    """
    results = []
    rng = seeds.generator(0x19B)
    for name, variant, channels, forward in (
        ("path.irb2d", VARIANT_2D, 2, irb2d),
        ("path.irb3d", VARIANT_3D, 4, irb3d),
    ):
        block = IrbParams.init(variant, channels, rng)
        x = _rand(rng, channels, MICRO_PATCH, MICRO_PATCH)
        params = [x, block.core, block.w1, block.b1,
                  block.bn1.gamma, block.bn1.beta, block.bn2.gamma, block.bn2.beta]
        if variant == VARIANT_2D:
            params.insert(1, block.w2)
        w = rng.normal(size=x.shape)
        report = grad_check(lambda *_: (forward(x, block, training=True) * Tensor(w)).sum(), params)
        results.append(CheckResult(name, report.max_rel_err, OP_TOL))
    return results


def check_pretrain_loss() -> CheckResult:
    """Composite reconstruction loss on the micro model, all branch params."""
    cfg = micro_config()
    model = build_pretraining_model(cfg, MICRO_AUX, seed=3)
    rng = seeds.generator(0xE2E)
    image = Tensor(rng.normal(size=(MICRO_CHANNELS, MICRO_PATCH, MICRO_PATCH)))
    spa_spec = sample_mask(MICRO_PATCH**2, 0.4, seed=21, mode=SPATIAL)
    spe_spec = sample_mask(MICRO_CHANNELS, 0.4, seed=22, protected=(0,), mode=SPECTRAL)
    params = [p for _, p in pretraining_parameters(model)]

    def loss(*_):
        recon_spa = decode(
            encode(tokenize_spatial(apply_spatial_mask(image, spa_spec), model.spa_branch), cfg, model.spa_branch),
            spa_spec, cfg, model.spa_branch,
        )
        recon_spe = decode(
            encode(tokenize_spectral(apply_spectral_mask(image, spe_spec), model.spe_branch), cfg, model.spe_branch),
            spe_spec, cfg, model.spe_branch,
        )
        spa, spe = reconstruction_terms(image, recon_spa, recon_spe, spa_spec, spe_spec)
        return 2.0 * spa + spe

    report = grad_check(loss, params, epsilon=1e-4)
    return CheckResult("path.pretrain_loss", report.max_rel_err, END_TO_END_TOL)


def check_train_loss() -> CheckResult:
    """Cross-entropy through the full classification path on the micro model.

    Checked w.r.t. a representative parameter subset to keep the runtime
    budget; the constituent ops are each fully checked above.
    """
    from .pipelines import _patch_logits
    from .tensor import concat

    cfg = micro_config()
    model = build_training_model(cfg, MICRO_AUX, num_classes=3, seed=5)
    rng = seeds.generator(0x7A11)
    x1 = rng.normal(size=(MICRO_AUX, MICRO_PATCH, MICRO_PATCH))
    x2 = rng.normal(size=(MICRO_CHANNELS - MICRO_AUX, MICRO_PATCH, MICRO_PATCH))
    labels = np.asarray([1])
    subset = [
        model.spa_branch.embed.w,
        model.spa_branch.enc_blocks[0].alpha_log,
        model.spe_branch.enc_blocks[0].wv.w,
        model.irb_aux.blocks[0].core,
        model.irb_hsi.blocks[2].core,
        model.irb_hsi.token_proj.w,
        model.classifier.w,
        model.classifier.b,
    ]

    def loss(*_):
        logits = _patch_logits(x1, x2, model, training=True)
        return cross_entropy(logits, labels)

    report = grad_check(loss, subset, epsilon=1e-4)
    return CheckResult("path.train_loss", report.max_rel_err, END_TO_END_TOL)


def run_full_suite(trials: int = 20) -> tuple[list[CheckResult], bool]:
    results = check_ops(trials)
    results += check_branch_paths()
    results += check_irb_paths()
    results.append(check_pretrain_loss())
    results.append(check_train_loss())
    return results, all(r.passed for r in results)
