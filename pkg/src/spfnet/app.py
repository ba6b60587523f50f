"""All-in-one prior propagation: patch-cosine similarity and interference-attenuated priors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, div, mul, norm_clamped, reshape, tsum
from .nn import ResidualGroupParams, bicubic_resize, init_residual_group, residual_group, unfold3x3

EPS = 1e-8
MODALITIES = ("n", "s", "r")


@dataclass
class AppParams:
    gamma1: Tensor  # weight of the normal map inside the RGB weight
    gamma2: Tensor  # weight of the semantic map inside the RGB weight
    groups: dict[str, ResidualGroupParams]


def init_app(rng: np.random.Generator, channels: int, modalities, n_blocks: int = 2, dtype=np.float32) -> AppParams:
    return AppParams(
        gamma1=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        gamma2=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        groups={m: init_residual_group(rng, channels, n_blocks, dtype=dtype) for m in modalities},
    )


def patch_similarity(prior_feat: Tensor, depth_feat: Tensor, eps: float = EPS) -> Tensor:
    """Cosine between co-located 3x3xC patches of two feature maps, as a (B, 1, H, W) map."""
    if prior_feat.shape != depth_feat.shape:
        raise ValueError(f"patch_similarity: prior {prior_feat.shape} vs depth {depth_feat.shape}")
    B, _, H, W = depth_feat.shape
    p = unfold3x3(prior_feat)
    d = unfold3x3(depth_feat)
    num = tsum(mul(p, d), axis=1, keepdims=True)
    den = mul(norm_clamped(p, 1, eps), norm_clamped(d, 1, eps))
    # one scalar per patch: folding the scalar columns is a reshape onto the pixel grid
    return reshape(div(num, den), (B, 1, H, W))


def fuse_rgb_weight(w_n: Tensor | None, w_s: Tensor | None, sigma_r: Tensor,
                    gamma1: Tensor, gamma2: Tensor) -> Tensor:
    w_r = sigma_r
    if w_n is not None:
        if w_n.shape != sigma_r.shape:
            raise ValueError(f"fuse_rgb_weight: {w_n.shape} vs {sigma_r.shape}")
        w_r = add(w_r, mul(w_n, gamma1))
    if w_s is not None:
        if w_s.shape != sigma_r.shape:
            raise ValueError(f"fuse_rgb_weight: {w_s.shape} vs {sigma_r.shape}")
        w_r = add(w_r, mul(w_s, gamma2))
    return w_r


def propagate(prev_filtered: Tensor, w: Tensor, p: ResidualGroupParams) -> Tensor:
    return residual_group(add(mul(prev_filtered, w), prev_filtered), p)


def downsample_priors(priors: dict[str, Tensor], size: tuple[int, int]) -> dict[str, Tensor]:
    out = {}
    for m, f in priors.items():
        factor = f.shape[2] // size[0]
        out[m] = f if factor == 1 else bicubic_resize(f, 1 / factor)
    return out


def app_stage(priors: dict[str, Tensor], depth_feat: Tensor, prev_filtered: dict[str, Tensor] | None,
              params: AppParams) -> tuple[dict[str, Tensor], dict[str, Tensor], dict[str, Tensor]]:
    """One propagation stage.

    ``priors`` are HR prior features keyed by modality ("n", "s", "r");
    ``prev_filtered`` are the previous stage's filtered prior features at
    depth resolution, or None at the first stage (the downsampled priors are
    used instead). Returns (weights, enhanced, downsampled priors).
    """
    low = downsample_priors(priors, depth_feat.shape[2:])
    if prev_filtered is None:
        prev_filtered = low
    sigma = {m: patch_similarity(f, depth_feat) for m, f in low.items()}
    weights = {m: s for m, s in sigma.items() if m != "r"}
    if "r" in sigma:
        weights["r"] = fuse_rgb_weight(weights.get("n"), weights.get("s"), sigma["r"],
                                       params.gamma1, params.gamma2)
    enhanced = {m: propagate(prev_filtered[m], weights[m], params.groups[m]) for m in low}
    return weights, enhanced, low


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Histogram distance between two feature-value samples."""
    from scipy.stats import wasserstein_distance
    return float(wasserstein_distance(np.ravel(a), np.ravel(b)))
