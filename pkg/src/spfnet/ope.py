"""One-to-one prior embedding with mutual guided filtering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _make, add, concat, mul, tanh
from .nn import ConvParams, ResidualGroupParams, conv2d, init_conv, init_residual_group, residual_group

MGF_MODES = ("none", "d2p", "p2d", "d2p_p2d", "p2d_d2p")
N_BINS = 32
# kernel entries live in (-1, 1): forward differences are bounded by 2 per axis
MAX_GRAD = 2.0 * np.sqrt(2.0)


@dataclass
class MgfParams:
    fc: ConvParams  # input projection applied to the depth feature before filtering
    kg_prior: ConvParams  # 1x1, C -> K*K
    kg_depth: ConvParams  # 1x1, C -> K*K


@dataclass
class OpeParams:
    mgf: dict[str, MgfParams]
    fc_fuse: ConvParams  # m*C -> C, builds the fused depth feature
    reduce: ConvParams  # (m+1)*C -> C ahead of the aggregation group
    group: ResidualGroupParams


@dataclass
class OpeOutputs:
    filtered_prior: dict[str, Tensor]  # F_dn, F_ds, F_dr
    filtered_depth: dict[str, Tensor]  # F_nd, F_sd, F_rd
    fused: Tensor
    depth_next: Tensor
    kernels: dict[str, dict[str, Tensor]]  # modality -> {"pd": k_pd, "dp": k_dp}


def init_mgf(rng: np.random.Generator, channels: int, k: int = 3, dtype=np.float32) -> MgfParams:
    return MgfParams(
        fc=init_conv(rng, channels, channels, 3, dtype=dtype),
        kg_prior=init_conv(rng, channels, k * k, 1, zero=True, dtype=dtype),
        kg_depth=init_conv(rng, channels, k * k, 1, zero=True, dtype=dtype),
    )


def init_ope(rng: np.random.Generator, channels: int, order, n_blocks: int = 2, k: int = 3,
             dtype=np.float32) -> OpeParams:
    m = len(order)
    return OpeParams(
        mgf={mod: init_mgf(rng, channels, k, dtype) for mod in order},
        fc_fuse=init_conv(rng, m * channels, channels, 3, dtype=dtype),
        reduce=init_conv(rng, (m + 1) * channels, channels, 1, zero=True, dtype=dtype),
        group=init_residual_group(rng, channels, n_blocks, dtype=dtype),
    )


def svf_filter(x: Tensor, k: Tensor) -> Tensor:
    """Apply a distinct KxK kernel at every pixel, shared across channels.

    ``k`` is (B, K*K, H, W) with row-major kernel taps; zero padding (K-1)/2.
    """
    B, C, H, W = x.shape
    KK = k.shape[1]
    K = int(round(np.sqrt(KK)))
    if K * K != KK or K % 2 == 0:
        raise ValueError(f"svf_filter: {KK} kernel taps is not an odd square")
    if k.shape[0] != B or k.shape[2:] != (H, W):
        raise ValueError(f"svf_filter: kernel field {k.shape} does not match input {x.shape}")
    r = K // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros(x.shape, dtype=x.dtype)
    taps = [(dy, dx) for dy in range(K) for dx in range(K)]
    for t, (dy, dx) in enumerate(taps):
        out += k.data[:, t:t + 1] * xp[:, :, dy:dy + H, dx:dx + W]

    def bw(g):
        gk = np.empty(k.shape, dtype=k.dtype)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for t, (dy, dx) in enumerate(taps):
            gk[:, t] = (g * xp[:, :, dy:dy + H, dx:dx + W]).sum(axis=1)
            gxp[:, :, dy:dy + H, dx:dx + W] += g * k.data[:, t:t + 1]
        return gxp[:, :, r:r + H, r:r + W], gk

    return _make(out, (x, k), bw, "svf_filter")


def kernel_generate(feat: Tensor, w: Tensor | None, p: ConvParams) -> Tensor:
    """tanh(conv1x1(feat * w + feat)); with ``w`` None the similarity modulation is skipped."""
    if w is not None:
        feat = add(mul(feat, w), feat)
    return tanh(conv2d(feat, p))


def mgf(depth_in: Tensor, prior: Tensor, w: Tensor | None, p: MgfParams, mode: str = "p2d_d2p",
        use_similarity: bool = True) -> tuple[Tensor, Tensor, dict[str, Tensor]]:
    """Mutual guided filtering. Returns (filtered depth, filtered prior, kernels)."""
    if depth_in.shape != prior.shape:
        raise ValueError(f"mgf: depth {depth_in.shape} vs prior {prior.shape}")
    if mode not in MGF_MODES:
        raise ValueError(f"mgf: unknown mode {mode!r}")
    guide = w if use_similarity else None
    kernels: dict[str, Tensor] = {}
    f_pd, f_dp = depth_in, prior
    if mode == "p2d":
        kernels["pd"] = kernel_generate(prior, guide, p.kg_prior)
        f_pd = add(svf_filter(depth_in, kernels["pd"]), depth_in)
    elif mode == "d2p":
        kernels["dp"] = kernel_generate(depth_in, guide, p.kg_depth)
        f_dp = add(svf_filter(prior, kernels["dp"]), prior)
    elif mode == "p2d_d2p":
        kernels["pd"] = kernel_generate(prior, guide, p.kg_prior)
        f_pd = add(svf_filter(depth_in, kernels["pd"]), depth_in)
        kernels["dp"] = kernel_generate(f_pd, guide, p.kg_depth)
        f_dp = add(svf_filter(prior, kernels["dp"]), prior)
    elif mode == "d2p_p2d":
        kernels["dp"] = kernel_generate(depth_in, guide, p.kg_depth)
        f_dp = add(svf_filter(prior, kernels["dp"]), prior)
        kernels["pd"] = kernel_generate(f_dp, guide, p.kg_prior)
        f_pd = add(svf_filter(depth_in, kernels["pd"]), depth_in)
    return f_pd, f_dp, kernels


def ope_stage(depth_prev: Tensor, enhanced: dict[str, Tensor], weights: dict[str, Tensor] | None,
              params: OpeParams, order=("n", "s", "r"), mode: str = "p2d_d2p",
              use_similarity: bool = True) -> OpeOutputs:
    """Embed each prior into depth in ``order``, then aggregate.

    The MGF depth input follows the successive wiring: f_c(F_d) for the first
    prior, f_c(F_d + F_1d) for the second and f_c(F_(k-2)d + F_(k-1)d) after.
    """
    filt_prior: dict[str, Tensor] = {}
    filt_depth: dict[str, Tensor] = {}
    kernels: dict[str, dict[str, Tensor]] = {}
    seq: list[Tensor] = []
    for i, mod in enumerate(order):
        if i == 0:
            src = depth_prev
        elif i == 1:
            src = add(depth_prev, seq[0])
        else:
            src = add(seq[i - 2], seq[i - 1])
        p = params.mgf[mod]
        w = None if weights is None else weights[mod]
        f_pd, f_dp, ks = mgf(conv2d(src, p.fc), enhanced[mod], w, p, mode, use_similarity)
        filt_depth[mod], filt_prior[mod], kernels[mod] = f_pd, f_dp, ks
        seq.append(f_pd)
    fused = add(conv2d(concat(seq, axis=1), params.fc_fuse), depth_prev)
    agg = concat([filt_prior[m] for m in order] + [fused], axis=1)
    depth_next = add(residual_group(conv2d(agg, params.reduce), params.group), depth_prev)
    return OpeOutputs(filt_prior, filt_depth, fused, depth_next, kernels)


def kernel_gradient_magnitude(k: np.ndarray) -> np.ndarray:
    """Per-tap spatial forward-difference magnitude of a (..., KK, H, W) kernel field.

    The last row and column difference against themselves (replicate boundary), giving zero.
    """
    k = np.asarray(k, dtype=np.float64)
    gy = np.diff(k, axis=-2, append=k[..., -1:, :])
    gx = np.diff(k, axis=-1, append=k[..., :, -1:])
    return np.sqrt(gx * gx + gy * gy)


def kernel_stats(k, mask: np.ndarray | None = None, n_bins: int = N_BINS) -> dict:
    """Normalized histogram of kernel gradient magnitudes plus mean/variance.

    ``mask`` (H, W) restricts the statistics to selected pixels.
    """
    k = k.data if isinstance(k, Tensor) else np.asarray(k)
    mag = kernel_gradient_magnitude(k)
    if mask is not None:
        mag = mag[..., np.asarray(mask, dtype=bool)]
    vals = np.clip(mag.ravel(), 0.0, MAX_GRAD)
    edges = np.linspace(0.0, MAX_GRAD, n_bins + 1)
    hist, _ = np.histogram(vals, bins=edges)
    total = hist.sum()
    mass = hist / total if total else hist.astype(np.float64)
    return {
        "bin_centers": 0.5 * (edges[:-1] + edges[1:]),
        "mass": mass,
        "mean": float(vals.mean()) if vals.size else 0.0,
        "var": float(vals.var()) if vals.size else 0.0,
    }
