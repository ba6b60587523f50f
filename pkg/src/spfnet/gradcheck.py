"""Finite-difference checks for every differentiable op and for a small full model (64-bit)."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .app import fuse_rgb_weight, patch_similarity, propagate
from .autodiff import Tensor, grad_check
from .model import ModelConfig, build, forward
from .nn import ConvParams, bicubic_resize, conv2d, depth_to_space, fold, init_residual_group, residual_group, unfold3x3
from .ope import kernel_generate, svf_filter
from .scene import SynthConfig, generate_scene

TOLERANCE = 1e-4


def _t(rng, *shape, away_from_zero: bool = False) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        # keep kinked ops (relu, |x|) well away from their kink
        x = np.sign(x) * (np.abs(x) + 0.1)
    return Tensor(x, requires_grad=True)


def _project(out: Tensor, rng) -> Tensor:
    """Reduce to a scalar with a fixed random projection (smooth, unlike L1)."""
    w = Tensor(rng.standard_normal(out.shape))
    return ad.tsum(ad.mul(out, w))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    P = lambda out: _project(out, np.random.default_rng(1))  # noqa: E731
    cases: dict[str, tuple[Callable[..., Tensor], list[Tensor]]] = {}
    a, b = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 4, 4)
    cases["add"] = (lambda x, y: P(ad.add(x, y)), [a, b])
    cases["add_broadcast"] = (lambda x, y: P(ad.add(x, y)), [a, _t(rng, 2, 1, 4, 4)])
    cases["sub"] = (lambda x, y: P(ad.sub(x, y)), [a, b])
    cases["mul"] = (lambda x, y: P(ad.mul(x, y)), [a, b])
    cases["mul_scalar_tensor"] = (lambda x, y: P(ad.mul(x, y)), [a, _t(rng, 1)])
    den = Tensor(np.abs(rng.standard_normal((2, 3, 4, 4))) + 0.5, requires_grad=True)
    cases["div"] = (lambda x, y: P(ad.div(x, y)), [a, den])
    cases["scalar_mul"] = (lambda x: P(ad.scalar_mul(x, -2.5)), [a])
    k = _t(rng, 2, 3, 4, 4, away_from_zero=True)
    cases["relu"] = (lambda x: P(ad.relu(x)), [k])
    cases["leaky_relu"] = (lambda x: P(ad.leaky_relu(x, 0.1)), [k])
    cases["absolute"] = (lambda x: P(ad.absolute(x)), [k])
    cases["tanh"] = (lambda x: P(ad.tanh(x)), [a])
    cases["square"] = (lambda x: P(ad.square(x)), [a])
    cases["sum_axis"] = (lambda x: P(ad.tsum(x, axis=1, keepdims=True)), [a])
    cases["mean"] = (lambda x: ad.mean(ad.square(x)), [a])
    cases["reshape"] = (lambda x: P(ad.reshape(x, (6, 16))), [a])
    cases["concat"] = (lambda x, y: P(ad.concat([x, y], axis=1)), [a, b])
    cases["norm_clamped"] = (lambda x: P(ad.norm_clamped(x, 1)), [a])

    x = _t(rng, 2, 3, 6, 5)
    for ksz, stride in ((3, 1), (1, 1), (3, 2)):
        w, bias = _t(rng, 4, 3, ksz, ksz), _t(rng, 4)
        cases[f"conv2d_k{ksz}_s{stride}"] = (
            lambda x, w, bias, s=stride: P(conv2d(x, ConvParams(w, bias, stride=s))), [x, w, bias])
    cases["unfold3x3"] = (lambda x: P(unfold3x3(x)), [x])
    pt = _t(rng, 2, 27, 30)
    cases["fold"] = (lambda p: P(fold(p, (2, 3, 6, 5))), [pt])
    cases["fold_normalized"] = (lambda p: P(fold(p, (2, 3, 6, 5), normalize=True)), [pt])
    cases["bicubic_up2"] = (lambda x: P(bicubic_resize(x, 2)), [_t(rng, 1, 2, 4, 4)])
    cases["bicubic_down2"] = (lambda x: P(bicubic_resize(x, 0.5)), [_t(rng, 1, 2, 8, 8)])
    cases["depth_to_space"] = (lambda x: P(depth_to_space(x, 2)), [_t(rng, 1, 8, 3, 3)])

    g = init_residual_group(rng, 3, 1, zero_tail=False, dtype=np.float64)
    cases["residual_group"] = (lambda x: P(residual_group(x, g)), [_t(rng, 1, 3, 5, 5)])

    f1, f2 = _t(rng, 1, 3, 5, 5), _t(rng, 1, 3, 5, 5)
    cases["patch_similarity"] = (lambda u, v: P(patch_similarity(u, v)), [f1, f2])
    wn, ws, sr = (_t(rng, 1, 1, 5, 5) for _ in range(3))
    g1, g2 = _t(rng, 1), _t(rng, 1)
    cases["fuse_rgb_weight"] = (lambda *t: P(fuse_rgb_weight(*t)), [wn, ws, sr, g1, g2])
    g3 = init_residual_group(rng, 3, 1, zero_tail=False, dtype=np.float64)
    cases["propagate"] = (lambda f, w: P(propagate(f, w, g3)), [f1, _t(rng, 1, 1, 5, 5)])

    kern = Tensor(np.tanh(rng.standard_normal((2, 9, 6, 5))), requires_grad=True)
    cases["svf_filter"] = (lambda x, k: P(svf_filter(x, k)), [x, kern])
    kw, kb = _t(rng, 9, 3, 1, 1), _t(rng, 9)
    cases["kernel_generate"] = (
        lambda f, w, kw, kb: P(kernel_generate(f, w, ConvParams(kw, kb))), [f1, _t(rng, 1, 1, 5, 5), kw, kb])
    return cases


def small_model_config() -> ModelConfig:
    return ModelConfig(channels=4, stages=1, scale=2, variant="spfnet-t", rg_blocks=1, dtype="float64")


def model_case(seed: int = 0):
    """SPFNet-T at C=4, one stage, scale 2, L1 loss on one 8x8-LR synthetic sample.

    Zero-initialized tensors are randomized so every path carries gradient.
    """
    from .train import l1_loss  # deferred: train imports the model stack

    cfg = small_model_config()
    m = build(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    params = m.parameters()
    for p in params:
        if not np.any(p.data):
            # conv weights get the default He scale, biases and gammas a small offset
            std = np.sqrt(2.0 / np.prod(p.shape[1:])) if p.ndim == 4 else 0.1
            p.data = std * rng.standard_normal(p.shape)
    sc = generate_scene(SynthConfig(seed=seed, size=16, scale=cfg.scale), 0)
    d_lr, rgb, normal, sem, gt = (Tensor(a[None].astype(np.float64))
                                  for a in (sc.depth_lr, sc.rgb, sc.normal, sc.semantic, sc.depth_gt))

    def f(*_):
        out, _ = forward(m, d_lr, rgb, normal, sem)
        return l1_loss(out, gt, sc.valid[None])

    return f, params


def run_suite(seed: int = 0, include_model: bool = True, step: float = 1e-5,
              progress: Callable[[str, float, float], None] | None = None) -> dict[str, float]:
    """Max relative error per case (op name or "spfnet-t")."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    for name, (f, inputs) in op_cases(rng).items():
        t0 = time.perf_counter()
        results[name] = grad_check(f, inputs, step=step)
        if progress:
            progress(name, results[name], time.perf_counter() - t0)
    if include_model:
        t0 = time.perf_counter()
        f, params = model_case(seed)
        results["spfnet-t"] = grad_check(f, params, step=step)
        if progress:
            progress("spfnet-t", results["spfnet-t"], time.perf_counter() - t0)
    return results


def passed(results: dict[str, float], tol: float = TOLERANCE) -> bool:
    return max(results.values()) < tol
