"""Convolution, residual groups, unfold/fold, bicubic resize, sub-pixel upsampling."""
from __future__ import annotations

import functools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autodiff import Tensor, _make, add, leaky_relu

LEAKY_SLOPE = 0.1
SCALES = (2, 4, 8, 16)


@dataclass
class ConvParams:
    weight: Tensor  # (out_ch, in_ch, kh, kw)
    bias: Tensor  # (out_ch,)
    stride: int = 1
    padding: int | None = None  # None -> "same" for odd kernels

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]


@dataclass
class ResidualGroupParams:
    """Blocks of (conv, leaky-relu, conv) + skip, then a tail conv and a group skip."""
    blocks: list[tuple[ConvParams, ConvParams]]
    tail: ConvParams

    @property
    def channels(self) -> int:
        return self.tail.out_ch


def init_conv(rng: np.random.Generator, in_ch: int, out_ch: int, k: int = 3, *,
              zero: bool = False, dtype=np.float32) -> ConvParams:
    if zero:
        w = np.zeros((out_ch, in_ch, k, k), dtype=dtype)
    else:
        std = np.sqrt(2.0 / (in_ch * k * k))
        w = (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(dtype)
    b = np.zeros(out_ch, dtype=dtype)
    return ConvParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def init_residual_group(rng: np.random.Generator, channels: int, n_blocks: int = 2, *,
                        zero_tail: bool = True, dtype=np.float32) -> ResidualGroupParams:
    blocks = [(init_conv(rng, channels, channels, 3, dtype=dtype),
               init_conv(rng, channels, channels, 3, dtype=dtype)) for _ in range(n_blocks)]
    tail = init_conv(rng, channels, channels, 3, zero=zero_tail, dtype=dtype)
    return ResidualGroupParams(blocks, tail)


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    w, b = p.weight, p.bias
    out_ch, in_ch, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != in_ch:
        raise ValueError(f"conv2d: input {x.shape} does not match weight in_ch={in_ch}")
    s = p.stride
    pad = (kh - 1) // 2 if p.padding is None else p.padding
    B, C, H, W = x.shape

    if kh == 1 and kw == 1 and pad == 0 and s == 1:
        w2 = w.data[:, :, 0, 0]
        out = np.einsum("oc,bchw->bohw", w2, x.data, optimize=True) + b.data[None, :, None, None]

        def bw1(g):
            gx = np.einsum("oc,bohw->bchw", w2, g, optimize=True)
            gw = np.einsum("bohw,bchw->oc", g, x.data, optimize=True)[:, :, None, None]
            return gx, gw, g.sum(axis=(0, 2, 3))

        return _make(out.astype(x.dtype, copy=False), (x, w, b), bw1, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Ho = (H + 2 * pad - kh) // s + 1
    Wo = (W + 2 * pad - kw) // s + 1
    # im2col in (C, kh, kw, B, Ho, Wo) order so the product is one GEMM
    xpt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i:i + (Ho - 1) * s + 1:s, j:j + (Wo - 1) * s + 1:s]
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    w2 = w.data.reshape(out_ch, -1)
    out = (w2 @ cols).reshape(out_ch, B, Ho, Wo).transpose(1, 0, 2, 3) + b.data[None, :, None, None]

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(out_ch, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gc = (w2.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
        gxp = np.zeros((C, B) + xp.shape[2:], dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + (Ho - 1) * s + 1:s, j:j + (Wo - 1) * s + 1:s] += gc[:, i, j]
        gx = gxp.transpose(1, 0, 2, 3)
        if pad:
            gx = gx[:, :, pad:pad + H, pad:pad + W]
        return np.ascontiguousarray(gx), gw, g2.sum(axis=1)

    return _make(np.ascontiguousarray(out, dtype=x.dtype), (x, w, b), bw, "conv2d")


def residual_group(x: Tensor, p: ResidualGroupParams) -> Tensor:
    if x.shape[1] != p.channels:
        raise ValueError(f"residual_group: {x.shape[1]} channels, group expects {p.channels}")
    h = x
    for c1, c2 in p.blocks:
        h = add(h, conv2d(leaky_relu(conv2d(h, c1), LEAKY_SLOPE), c2))
    return add(x, conv2d(h, p.tail))


# ---------------------------------------------------------------- unfold / fold

_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def unfold3x3(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C*9, H*W); zero padding 1, row index = c*9 + ky*3 + kx."""
    if x.ndim != 4:
        raise ValueError(f"unfold3x3 expects BCHW, got {x.shape}")
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    stacked = np.stack([xp[:, :, dy:dy + H, dx:dx + W] for dy, dx in _OFFSETS], axis=2)

    def bw(g):
        g = g.reshape(B, C, 9, H, W)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for k, (dy, dx) in enumerate(_OFFSETS):
            gxp[:, :, dy:dy + H, dx:dx + W] += g[:, :, k]
        return (gxp[:, :, 1:-1, 1:-1],)

    return _make(stacked.reshape(B, C * 9, H * W), (x,), bw, "unfold3x3")


def _fold_np(p: np.ndarray, C: int, H: int, W: int, acc_dtype) -> np.ndarray:
    B = p.shape[0]
    p = p.reshape(B, C, 9, H, W)
    canvas = np.zeros((B, C, H + 2, W + 2), dtype=acc_dtype)
    for k, (dy, dx) in enumerate(_OFFSETS):
        canvas[:, :, dy:dy + H, dx:dx + W] += p[:, :, k]
    return canvas[:, :, 1:-1, 1:-1]


@functools.lru_cache(maxsize=64)
def _fold_counts(H: int, W: int) -> np.ndarray:
    ones = np.ones((1, 9, H * W))
    return _fold_np(ones, 1, H, W, np.float64)


def fold(patches: Tensor, out_shape: tuple[int, int, int, int], normalize: bool = False) -> Tensor:
    """Sum overlapping 3x3 patch columns back into a (B, C, H, W) canvas.

    With ``normalize`` each pixel is divided by its contribution count, so
    ``fold(unfold3x3(x), shape, True)`` reproduces ``x``. Accumulation runs
    in a wider type than the input, which makes that round trip exact.
    """
    B, C, H, W = out_shape
    if patches.shape != (B, C * 9, H * W):
        raise ValueError(f"fold: patches {patches.shape} do not match out_shape {out_shape}")
    # up to 9 copies of a value are summed; the wider accumulator keeps k*x exact
    acc = np.float64 if patches.dtype == np.float32 else np.longdouble
    out = _fold_np(patches.data, C, H, W, acc)
    counts = _fold_counts(H, W)
    if normalize:
        out = out / counts
    out = out.astype(patches.dtype)

    def bw(g):
        if normalize:
            g = g / counts
        gp = np.zeros((B, C, 9, H, W), dtype=patches.dtype)
        gp_pad = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for k, (dy, dx) in enumerate(_OFFSETS):
            gp[:, :, k] = gp_pad[:, :, dy:dy + H, dx:dx + W]
        return (gp.reshape(B, C * 9, H * W),)

    return _make(out, (patches,), bw, "fold")


# ---------------------------------------------------------------- bicubic

def cubic_weight(t, a: float = -0.5):
    t = np.abs(np.asarray(t, dtype=np.float64))
    return np.where(
        t <= 1, (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
        np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0))


@functools.lru_cache(maxsize=128)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom interpolation matrix, half-pixel centers, clamped edges."""
    ratio = n_in / n_out
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) * ratio - 0.5
        base = int(np.floor(src))
        for t in range(-1, 3):
            idx = base + t
            m[o, min(max(idx, 0), n_in - 1)] += cubic_weight(src - idx)
    return m


def _parse_scale(scale) -> Fraction:
    f = Fraction(scale).limit_denominator(64)
    if f not in {Fraction(s) for s in SCALES} | {Fraction(1, s) for s in SCALES}:
        raise ValueError(f"unsupported resize scale {scale!r}; use one of {SCALES} or their reciprocals")
    return f


def bicubic_resize(x: Tensor, scale) -> Tensor:
    f = _parse_scale(scale)
    B, C, H, W = x.shape
    if (H * f).denominator != 1 or (W * f).denominator != 1:
        raise ValueError(f"bicubic_resize: extents {(H, W)} not divisible for scale {f}")
    Ho, Wo = int(H * f), int(W * f)
    my = resize_matrix(H, Ho).astype(x.dtype)
    mx = resize_matrix(W, Wo).astype(x.dtype)
    out = np.matmul(np.matmul(my, x.data), mx.T)

    def bw(g):
        return (np.matmul(np.matmul(my.T, g), mx),)

    return _make(out, (x,), bw, "bicubic")


def bicubic_np(a: np.ndarray, scale) -> np.ndarray:
    """bicubic_resize on a plain (..., H, W) array."""
    a = np.asarray(a)
    lead = a.shape[:-2]
    t = Tensor(a.reshape((-1, 1) + a.shape[-2:]))
    out = bicubic_resize(t, scale).data
    return out.reshape(lead + out.shape[-2:])


# ---------------------------------------------------------------- sub-pixel upsampling

def depth_to_space(x: Tensor, r: int) -> Tensor:
    B, Cr, H, W = x.shape
    if Cr % (r * r):
        raise ValueError(f"depth_to_space: {Cr} channels not divisible by {r * r}")
    C = Cr // (r * r)
    out = x.data.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H * r, W * r)

    def bw(g):
        return (g.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return _make(np.ascontiguousarray(out), (x,), bw, "depth_to_space")


def init_upsampler(rng: np.random.Generator, channels: int, factor: int, dtype=np.float32) -> list[ConvParams]:
    if factor not in SCALES:
        raise ValueError(f"upsample factor must be one of {SCALES}")
    n = int(np.log2(factor))
    return [init_conv(rng, channels, channels * 4, 3, dtype=dtype) for _ in range(n)]


def upsample_features(x: Tensor, factor: int, stages: list[ConvParams]) -> Tensor:
    if factor not in SCALES or len(stages) != int(np.log2(factor)):
        raise ValueError(f"upsample_features: factor {factor} needs log2(factor) stages, got {len(stages)}")
    for p in stages:
        if p.out_ch != 4 * x.shape[1]:
            raise ValueError(f"upsample_features: conv maps {p.in_ch}->{p.out_ch}, need {x.shape[1]}->{4 * x.shape[1]}")
        x = depth_to_space(conv2d(x, p), 2)
    return x
