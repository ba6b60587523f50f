"""Two-branch scene-prior filtering network: heads, recursive APP/OPE stages, reconstruction."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .app import MODALITIES, AppParams, app_stage, downsample_priors, init_app
from .autodiff import Tensor, add, concat, scalar_mul
from .nn import (
    SCALES,
    ConvParams,
    ResidualGroupParams,
    bicubic_resize,
    conv2d,
    init_conv,
    init_residual_group,
    init_upsampler,
    residual_group,
    upsample_features,
)
from .ope import MGF_MODES, OpeParams, init_ope, ope_stage

VARIANT_CHANNELS = {"spfnet": 16, "spfnet-t": 8}
IN_CHANNELS = {"d": 1, "r": 3, "n": 3, "s": 1}


@dataclass
class ModelConfig:
    channels: int = 16
    stages: int = 3
    scale: int = 4
    variant: str = "spfnet"
    order: tuple[str, ...] = ("n", "s", "r")
    rg_blocks: int = 2
    prior_downsample: str = "bicubic"
    kernel_size: int = 3
    mgf_mode: str = "p2d_d2p"
    similarity_guidance: bool = True
    use_app: bool = True
    use_ope: bool = True
    # depth is divided by this before the network and D_r multiplied back
    depth_scale: float = 500.0
    dtype: str = "float32"

    def __post_init__(self):
        self.order = tuple(self.order)
        self.validate()

    @classmethod
    def preset(cls, variant: str = "spfnet", **overrides) -> "ModelConfig":
        if variant not in VARIANT_CHANNELS:
            raise ValueError(f"variant: unknown {variant!r}")
        overrides.setdefault("channels", VARIANT_CHANNELS[variant])
        return cls(variant=variant, **overrides)

    def validate(self) -> None:
        if self.channels < 4:
            raise ValueError("channels: must be >= 4")
        if not 1 <= self.stages <= 4:
            raise ValueError("stages: must be in [1, 4]")
        if self.scale not in SCALES:
            raise ValueError(f"scale: must be one of {SCALES}")
        if self.variant not in VARIANT_CHANNELS:
            raise ValueError(f"variant: unknown {self.variant!r}")
        if "r" not in self.order or len(set(self.order)) != len(self.order) \
                or any(m not in MODALITIES for m in self.order):
            raise ValueError(f"order: must be distinct modalities from {MODALITIES} including 'r'")
        if self.rg_blocks < 0:
            raise ValueError("rg_blocks: must be >= 0")
        if self.prior_downsample != "bicubic":
            raise ValueError("prior_downsample: only 'bicubic' is implemented")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size: must be odd")
        if self.mgf_mode not in MGF_MODES:
            raise ValueError(f"mgf_mode: must be one of {MGF_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype: float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["order"] = list(self.order)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        return cls(**d)


@dataclass
class Head:
    conv: ConvParams
    group: ResidualGroupParams


@dataclass
class PriorUpdate:
    reduce: ConvParams  # 2C -> C over (previous prior feature, upsampled filtered prior)
    group: ResidualGroupParams


@dataclass
class Stage:
    app: AppParams
    ope: OpeParams
    prior_updates: dict[str, PriorUpdate]


@dataclass
class Reconstruction:
    upsampler: list[ConvParams]
    reduce: ConvParams
    group: ResidualGroupParams
    tail: ConvParams


@dataclass
class ModelParams:
    config: ModelConfig
    heads: dict[str, Head]
    stages: list[Stage]
    recon: Reconstruction

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        _walk(self.heads, "heads", out)
        _walk(self.stages, "stages", out)
        _walk(self.recon, "recon", out)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def _walk(obj, prefix: str, out: dict[str, Tensor]) -> None:
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.name in ("config", "stride", "padding"):
                continue
            _walk(getattr(obj, f.name), f"{prefix}.{f.name}", out)
    elif isinstance(obj, dict):
        for k in sorted(obj):
            _walk(obj[k], f"{prefix}.{k}", out)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _walk(v, f"{prefix}.{i}", out)


def build(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    C, dt, nb = cfg.channels, cfg.np_dtype, cfg.rg_blocks
    mods = cfg.order
    heads = {m: Head(init_conv(rng, IN_CHANNELS[m], C, 3, dtype=dt),
                     init_residual_group(rng, C, nb, dtype=dt))
             for m in ("d",) + tuple(sorted(mods))}
    stages = []
    for _ in range(cfg.stages):
        stages.append(Stage(
            app=init_app(rng, C, sorted(mods), nb, dt),
            ope=init_ope(rng, C, mods, nb, cfg.kernel_size, dt),
            prior_updates={m: PriorUpdate(init_conv(rng, 2 * C, C, 1, dtype=dt),
                                          init_residual_group(rng, C, nb, dtype=dt))
                           for m in sorted(mods)},
        ))
    recon = Reconstruction(
        upsampler=init_upsampler(rng, C, cfg.scale, dt),
        reduce=init_conv(rng, (len(mods) + 1) * C, C, 1, dtype=dt),
        group=init_residual_group(rng, C, nb, dtype=dt),
        tail=init_conv(rng, C, 1, 3, zero=True, dtype=dt),
    )
    return ModelParams(cfg, heads, stages, recon)


def count_params(m) -> int:
    """Total parameter entries of a model or any nested container of layers."""
    found: dict[str, Tensor] = {}
    _walk(m, "m", found)
    return int(sum(p.size for p in found.values()))


def cast(m: ModelParams, dtype) -> ModelParams:
    """Copy of the model with every parameter in ``dtype``."""
    clone = build(dataclasses.replace(m.config, dtype=np.dtype(dtype).name), 0)
    src, dst = m.named_parameters(), clone.named_parameters()
    for k, t in dst.items():
        t.data = src[k].data.astype(dtype)
    return clone


@dataclass
class Diagnostics:
    weights: list[dict[str, Tensor]] = field(default_factory=list)
    kernels: list[dict[str, dict[str, Tensor]]] = field(default_factory=list)
    enhanced: list[dict[str, Tensor]] = field(default_factory=list)
    pre_app: list[dict[str, Tensor]] = field(default_factory=list)
    depth_in: list[Tensor] = field(default_factory=list)  # depth feature entering each stage


def _head(x: Tensor, h: Head) -> Tensor:
    return residual_group(conv2d(x, h.conv), h.group)


def forward(m: ModelParams, d_lr: Tensor, rgb: Tensor, normal: Tensor | None = None,
            semantic: Tensor | None = None) -> tuple[Tensor, Diagnostics]:
    """Predict HR depth (cm) from LR depth (cm) and HR priors, all BCHW."""
    cfg = m.config
    s = cfg.scale
    B, _, h, w = d_lr.shape
    inputs = {"r": rgb, "n": normal, "s": semantic}
    for mod in cfg.order:
        x = inputs[mod]
        if x is None:
            raise ValueError(f"forward: modality {mod!r} is enabled but missing")
        if x.shape != (B, IN_CHANNELS[mod], s * h, s * w):
            raise ValueError(f"forward: {mod!r} input {x.shape} inconsistent with LR depth {d_lr.shape} at scale {s}")

    base = bicubic_resize(d_lr, s)
    d_norm = scalar_mul(d_lr, 1.0 / cfg.depth_scale)
    feat_d = _head(d_norm, m.heads["d"])
    priors = {mod: _head(inputs[mod], m.heads[mod]) for mod in sorted(cfg.order)}

    diag = Diagnostics()
    prev_filtered = None
    for st in m.stages:
        diag.depth_in.append(feat_d)
        if cfg.use_app:
            weights, enhanced, low = app_stage(priors, feat_d, prev_filtered, st.app)
        else:
            low = downsample_priors(priors, (h, w))
            weights, enhanced = None, (prev_filtered or low)
        diag.pre_app.append(low)
        diag.enhanced.append(enhanced)
        if weights is not None:
            diag.weights.append(weights)
        if cfg.use_ope:
            out = ope_stage(feat_d, enhanced, weights, st.ope, cfg.order, cfg.mgf_mode, cfg.similarity_guidance)
            filtered, feat_d = out.filtered_prior, out.depth_next
            diag.kernels.append(out.kernels)
        else:
            agg = concat([enhanced[mod] for mod in cfg.order] + [feat_d], axis=1)
            feat_d = add(residual_group(conv2d(agg, st.ope.reduce), st.ope.group), feat_d)
            filtered = enhanced
        prev_filtered = filtered
        priors = {
            mod: residual_group(
                conv2d(concat([priors[mod], bicubic_resize(filtered[mod], s)], axis=1), st.prior_updates[mod].reduce),
                st.prior_updates[mod].group)
            for mod in priors
        }

    r = m.recon
    up = upsample_features(feat_d, s, r.upsampler)
    agg = concat([up] + [priors[mod] for mod in cfg.order], axis=1)
    d_r = conv2d(residual_group(conv2d(agg, r.reduce), r.group), r.tail)
    d_hr = add(scalar_mul(d_r, cfg.depth_scale), base)
    return d_hr, diag
