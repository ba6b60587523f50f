"""Procedural RGB-D scenes with analytic normals and semantic labels, plus degradation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import SCALES, bicubic_np

MAX_LABEL = 8  # semantic map stores label / MAX_LABEL


@dataclass
class SynthConfig:
    seed: int = 1
    size: int = 64  # HR extent (square)
    scale: int = 4
    object_count: tuple[int, int] = (3, 8)  # primitives per scene, background included
    depth_range: tuple[float, float] = (50.0, 500.0)  # cm
    texture_amplitude: float = 0.25
    max_slope: float = 1.0  # cm per pixel for tilted planes
    noise_std: float = 0.0  # on the 0-255 depth convention

    def __post_init__(self):
        self.object_count = tuple(self.object_count)
        self.depth_range = tuple(float(v) for v in self.depth_range)
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}")
        if self.size % self.scale:
            raise ValueError(f"size {self.size} not divisible by scale {self.scale}")
        lo, hi = self.object_count
        if not 1 <= lo <= hi <= MAX_LABEL:
            raise ValueError(f"object_count must satisfy 1 <= lo <= hi <= {MAX_LABEL}")


@dataclass
class Scene:
    rgb: np.ndarray  # (3, sH, sW) in [0, 1]
    depth_gt: np.ndarray  # (1, sH, sW) cm
    normal: np.ndarray  # (3, sH, sW) unit vectors
    semantic: np.ndarray  # (1, sH, sW) label / MAX_LABEL
    depth_lr: np.ndarray  # (1, H, W) cm
    valid: np.ndarray  # (1, sH, sW) bool
    scale: int
    labels: np.ndarray | None = field(default=None, repr=False)  # (sH, sW) int

    def arrays(self) -> dict[str, np.ndarray]:
        return {"rgb": self.rgb, "depth": self.depth_gt, "normal": self.normal,
                "semantic": self.semantic, "depth_lr": self.depth_lr}


# ---------------------------------------------------------------- primitives

@dataclass
class Plane:
    """z = a*x + b*y + c restricted to a mask (whole image when mask is None)."""
    a: float
    b: float
    c: float
    mask: np.ndarray | None = None

    def coverage(self, xx, yy):
        return np.ones(xx.shape, bool) if self.mask is None else self.mask

    def depth(self, xx, yy):
        return self.a * xx + self.b * yy + self.c

    def normal(self, xx, yy):
        n = np.stack([np.full(xx.shape, -self.a), np.full(xx.shape, -self.b), np.ones(xx.shape)])
        return n / np.linalg.norm(n, axis=0, keepdims=True)


@dataclass
class Sphere:
    """Front cap of an ellipsoid: z = zc - h*sqrt(1 - r^2/R^2) over the disk r < R."""
    cx: float
    cy: float
    radius: float
    zc: float
    height: float

    def coverage(self, xx, yy):
        return (xx - self.cx) ** 2 + (yy - self.cy) ** 2 < self.radius ** 2

    def depth(self, xx, yy):
        r2 = ((xx - self.cx) ** 2 + (yy - self.cy) ** 2) / self.radius ** 2
        return self.zc - self.height * np.sqrt(np.clip(1.0 - r2, 0.0, None))

    def normal(self, xx, yy):
        # gradient of z; normal ∝ (-z_x, -z_y, 1)
        R2 = self.radius ** 2
        dx, dy = xx - self.cx, yy - self.cy
        q = np.sqrt(np.clip(1.0 - (dx * dx + dy * dy) / R2, 1e-12, None))
        zx = self.height * dx / (R2 * q)
        zy = self.height * dy / (R2 * q)
        n = np.stack([-zx, -zy, np.ones(xx.shape)])
        return n / np.linalg.norm(n, axis=0, keepdims=True)


def _rect_mask(xx, yy, cx, cy, hw, hh, angle):
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    return (np.abs(u) <= hw) & (np.abs(v) <= hh)


def _stripes(rng, xx, yy, amplitude):
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.6, 1.4)
    phase = rng.uniform(0, 2 * np.pi)
    amp = amplitude * rng.uniform(0.6, 1.0)
    wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return amp * np.sign(wave) * np.abs(wave) ** 0.5


def scene_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(stream)]))


def _make_primitives(cfg: SynthConfig, rng: np.random.Generator, xx, yy) -> list:
    size = cfg.size
    zmin, zmax = cfg.depth_range
    n_total = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    ms = cfg.max_slope
    # background: a tilted plane in the far 30% of the range
    bg_lo = zmin + 0.7 * (zmax - zmin)
    lim = min(ms, 0.2 * (zmax - bg_lo) / size)
    a, b = rng.uniform(-lim, lim, 2)
    ext = size - 1
    lo_off = min(0.0, a * ext) + min(0.0, b * ext)
    hi_off = max(0.0, a * ext) + max(0.0, b * ext)
    c = rng.uniform(bg_lo - lo_off, zmax - hi_off)
    prims = [Plane(a, b, c)]
    n_obj = n_total - 1
    if n_obj == 0:
        return prims
    # disjoint depth slots keep every inter-object boundary a depth discontinuity
    slot_edges = np.linspace(zmin + 5.0, bg_lo - 10.0, n_obj + 1)
    slots = list(zip(slot_edges[:-1], slot_edges[1:]))
    rng.shuffle(slots)
    for lo, hi in slots:
        usable = (hi - lo) - 10.0
        kind = rng.choice(["sphere", "box", "slab"])
        cx, cy = rng.uniform(0.15 * size, 0.85 * size, 2)
        if kind == "sphere":
            radius = rng.uniform(0.1, 0.25) * size
            height = min(radius, usable * 0.8)
            zc = rng.uniform(lo + height, lo + usable)
            prims.append(Sphere(cx, cy, radius, zc, height))
        else:
            hw, hh = rng.uniform(0.08, 0.25, 2) * size
            angle = 0.0 if kind == "box" else rng.uniform(0, np.pi)
            slope = ms * (0.2 if kind == "box" else 1.0)
            ext = np.hypot(hw, hh)
            slope = min(slope, 0.2 * usable / max(ext, 1.0))
            pa, pb = rng.uniform(-slope, slope, 2)
            span = (abs(pa) + abs(pb)) * ext
            z0 = lo + 5.0 + span + rng.uniform(0.0, max(0.0, usable - 5.0 - 2 * span))
            mask = _rect_mask(xx, yy, cx, cy, hw, hh, angle)
            prims.append(Plane(pa, pb, z0 - pa * cx - pb * cy, mask))
    return prims


def render(cfg: SynthConfig, rng: np.random.Generator):
    """Z-buffer the primitives. Returns depth, normal, labels, rgb (float64)."""
    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    prims = _make_primitives(cfg, rng, xx, yy)
    depth = np.full((size, size), np.inf)
    normal = np.zeros((3, size, size))
    labels = np.zeros((size, size), dtype=np.int32)
    for k, p in enumerate(prims):
        cov = p.coverage(xx, yy)
        z = p.depth(xx, yy)
        win = cov & (z < depth)
        depth[win] = z[win]
        normal[:, win] = p.normal(xx, yy)[:, win]
        labels[win] = k
    rgb = np.zeros((3, size, size))
    for k in range(len(prims)):
        base = rng.uniform(0.15, 0.85, 3)
        tex = _stripes(rng, xx, yy, cfg.texture_amplitude)
        tint = rng.uniform(0.5, 1.0, 3)
        m = labels == k
        for ch in range(3):
            rgb[ch][m] = base[ch] + tint[ch] * tex[m]
    rgb += cfg.texture_amplitude * 0.2 * rng.standard_normal(rgb.shape)
    return depth, normal, labels, np.clip(rgb, 0.0, 1.0), prims


def degrade(depth_gt: np.ndarray, s: int, noise_std: float = 0.0, rng: np.random.Generator | None = None,
            depth_max: float = 500.0) -> np.ndarray:
    """Bicubic downsample by ``s``; optional Gaussian noise on the 0-255 depth scale.

    ``noise_std`` is in units of depth_max/255, so 5 means variance 25 on
    depth normalized to [0, 255]. The result is clamped to [0, depth_max].
    """
    d = np.asarray(depth_gt)
    H, W = d.shape[-2:]
    if s not in SCALES or H % s or W % s:
        raise ValueError(f"degrade: extents {(H, W)} not divisible by scale {s}")
    low = bicubic_np(d, 1 / s)
    if noise_std > 0:
        rng = rng or np.random.default_rng(0)
        low = low + rng.standard_normal(low.shape) * (noise_std * depth_max / 255.0)
        low = np.clip(low, 0.0, depth_max)
    return low.astype(d.dtype, copy=False)


def generate_scene(cfg: SynthConfig, index: int) -> Scene:
    rng = scene_rng(cfg.seed, index, 0)
    depth, normal, labels, rgb, _ = render(cfg, rng)
    depth_gt = depth[None].astype(np.float32)
    d_lr = degrade(depth_gt, cfg.scale, cfg.noise_std, scene_rng(cfg.seed, index, 1), cfg.depth_range[1])
    return Scene(
        rgb=rgb.astype(np.float32),
        depth_gt=depth_gt,
        normal=normal.astype(np.float32),
        semantic=(labels[None] / MAX_LABEL).astype(np.float32),
        depth_lr=d_lr.astype(np.float32),
        valid=np.ones_like(depth_gt, dtype=bool),
        scale=cfg.scale,
        labels=labels,
    )


# ---------------------------------------------------------------- splits / manifests

def make_split(cfg: SynthConfig, n_train: int, n_val: int, train_start: int = 0,
               val_start: int | None = None) -> dict[str, list[tuple[int, int]]]:
    val_start = train_start + n_train if val_start is None else val_start
    tr = range(train_start, train_start + n_train)
    va = range(val_start, val_start + n_val)
    if set(tr) & set(va):
        raise ValueError(f"make_split: train {tr} and val {va} overlap")
    return {"train": [(i, cfg.seed) for i in tr], "val": [(i, cfg.seed) for i in va]}


def write_manifest(path, entries: list[tuple[int, int]]) -> None:
    Path(path).write_text("".join(f"{i}\t{s}\n" for i, s in entries))


def read_manifest(path) -> list[tuple[int, int]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            i, s = line.split("\t")
            out.append((int(i), int(s)))
    return out
