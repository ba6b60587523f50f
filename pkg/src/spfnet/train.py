"""L1 training with Adam, RMSE evaluation, and the ablation harness."""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .app import wasserstein_1d
from .autodiff import Tensor, absolute, backward, mul, no_grad, sub, tsum, zero_grad
from .model import ModelConfig, ModelParams, build, forward
from .nn import bicubic_np
from .ope import kernel_stats
from .scene import MAX_LABEL, Scene, SynthConfig, generate_scene, make_split

log = logging.getLogger(__name__)

PRIOR_ROWS = {"RGB": ("r",), "RGB+N": ("n", "r"), "RGB+S": ("s", "r"), "RGB+N+S": ("n", "s", "r")}
MGF_ROWS = {
    "(a) none": ("none", False),
    "(b) D2P": ("d2p", False),
    "(c) P2D": ("p2d", False),
    "(d) D2P->P2D": ("d2p_p2d", False),
    "(e) P2D->D2P": ("p2d_d2p", False),
    "(f) P2D->D2P+Sim": ("p2d_d2p", True),
}
SUITES = ("priors", "stages", "order", "mgf")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    crop: int = 32  # HR crop edge
    seed: int = 1
    scale: int = 4
    noise_std: float = 0.0
    n_train: int = 200
    n_val: int = 40
    scene_size: int = 64
    variant: str = "spfnet"
    channels: int | None = None  # None -> variant preset
    stages: int = 3
    order: tuple[str, ...] = ("n", "s", "r")
    use_normal: bool = True
    use_semantic: bool = True
    use_app: bool = True
    use_ope: bool = True
    mgf_mode: str = "p2d_d2p"
    similarity_guidance: bool = True
    rg_blocks: int = 2
    deterministic: bool = False

    def __post_init__(self):
        self.order = tuple(self.order)
        if self.crop % self.scale or self.crop > self.scene_size:
            raise ValueError(f"crop: {self.crop} must be a multiple of scale {self.scale} and <= scene_size")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size/epochs: must be positive")

    def model_config(self) -> ModelConfig:
        order = tuple(m for m in self.order
                      if not (m == "n" and not self.use_normal) and not (m == "s" and not self.use_semantic))
        return ModelConfig.preset(
            self.variant, stages=self.stages, scale=self.scale, order=order, rg_blocks=self.rg_blocks,
            mgf_mode=self.mgf_mode, similarity_guidance=self.similarity_guidance,
            use_app=self.use_app, use_ope=self.use_ope,
            **({"channels": self.channels} if self.channels else {}))

    def synth_config(self, noise_std: float | None = None) -> SynthConfig:
        return SynthConfig(seed=self.seed, size=self.scene_size, scale=self.scale,
                           noise_std=self.noise_std if noise_std is None else noise_std)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["order"] = list(self.order)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    rows: list[dict[str, float]] = field(default_factory=list)
    incidents: list[str] = field(default_factory=list)

    COLUMNS = ("epoch", "train_l1", "val_rmse_cm", "hist_dist", "seconds")

    def append(self, **row) -> None:
        self.rows.append({k: row[k] for k in self.COLUMNS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in self.COLUMNS[1:]])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


@dataclass
class Checkpoint:
    model: ModelParams
    train_config: TrainConfig | None = None
    adam: "AdamState | None" = None
    meta: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------- losses / metrics

def _valid_count(mask: np.ndarray) -> int:
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise ValueError("empty valid-pixel set")
    return n


def l1_loss(pred: Tensor, gt: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over valid pixels."""
    if pred.shape != gt.shape:
        raise ValueError(f"l1_loss: {pred.shape} vs {gt.shape}")
    mask = np.ones(pred.shape, bool) if mask is None else np.broadcast_to(mask, pred.shape)
    n = _valid_count(mask)
    diff = absolute(sub(pred, gt))
    return tsum(mul(diff, Tensor(mask.astype(pred.dtype)))) * (1.0 / n)


def rmse_cm(pred, gt, mask=None) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    mask = np.ones(pred.shape, bool) if mask is None else np.broadcast_to(mask, pred.shape)
    n = _valid_count(mask)
    return float(np.sqrt(((pred - gt) ** 2 * mask).sum() / n))


def mae_cm(pred, gt, mask=None) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    mask = np.ones(pred.shape, bool) if mask is None else np.broadcast_to(mask, pred.shape)
    return float((np.abs(pred - gt) * mask).sum() / _valid_count(mask))


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """In-place Adam update from ``p.grad``. Returns False (and skips) on non-finite gradients."""
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    if not all(np.isfinite(g).all() for g in grads):
        log.warning("non-finite gradient at step %d; update skipped", state.t + 1)
        return False
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - (lr * step).astype(p.dtype)).astype(p.dtype)
    return True


# ---------------------------------------------------------------- data

def load_scenes(cfg: SynthConfig, entries: Sequence[tuple[int, int]]) -> list[Scene]:
    return [generate_scene(dataclasses.replace(cfg, seed=seed), idx) for idx, seed in entries]


def _stack(scenes: Sequence[Scene], dtype=np.float32):
    def st(name):
        return Tensor(np.stack([getattr(s, name) for s in scenes]).astype(dtype))
    return st("depth_lr"), st("rgb"), st("normal"), st("semantic"), st("depth_gt"), \
        np.stack([s.valid for s in scenes])


def _crop(scene: Scene, oy: int, ox: int, crop: int) -> Scene:
    s = scene.scale
    sl = (slice(None), slice(oy, oy + crop), slice(ox, ox + crop))
    lsl = (slice(None), slice(oy // s, (oy + crop) // s), slice(ox // s, (ox + crop) // s))
    return Scene(scene.rgb[sl], scene.depth_gt[sl], scene.normal[sl], scene.semantic[sl],
                 scene.depth_lr[lsl], scene.valid[sl], s)


def predict(model: ModelParams, scenes: Sequence[Scene], batch_size: int = 8) -> list[np.ndarray]:
    out = []
    dt = model.config.np_dtype
    with no_grad():
        for i in range(0, len(scenes), batch_size):
            d, r, n, s, _, _ = _stack(scenes[i:i + batch_size], dt)
            pred, _ = forward(model, d, r, n, s)
            out.extend(list(pred.data))
    return out


def evaluate_scenes(model: ModelParams, scenes: Sequence[Scene], batch_size: int = 8) -> dict[str, Any]:
    preds = predict(model, scenes, batch_size)
    per = [rmse_cm(p, sc.depth_gt, sc.valid) for p, sc in zip(preds, scenes)]
    return {"per_scene": per, "mean_rmse_cm": float(np.mean(per)) if per else float("nan")}


def bicubic_baseline(scenes: Sequence[Scene]) -> dict[str, Any]:
    per = [rmse_cm(bicubic_np(sc.depth_lr, sc.scale), sc.depth_gt, sc.valid) for sc in scenes]
    return {"per_scene": per, "mean_rmse_cm": float(np.mean(per))}


def hist_distance(model: ModelParams, scenes: Sequence[Scene]) -> tuple[float, float]:
    """W1 between prior and depth features at the last stage: (after APP, before APP)."""
    with no_grad():
        d, r, n, s, _, _ = _stack(scenes, model.config.np_dtype)
        _, diag = forward(model, d, r, n, s)
    depth = diag.depth_in[-1].data
    after = np.mean([wasserstein_1d(f.data, depth) for f in diag.enhanced[-1].values()])
    before = np.mean([wasserstein_1d(f.data, depth) for f in diag.pre_app[-1].values()])
    return float(after), float(before)


# ---------------------------------------------------------------- training

def _snapshot(model: ModelParams) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model.named_parameters().items()}


def _copy_state(state: AdamState) -> AdamState:
    return AdamState([m.copy() for m in state.m], [v.copy() for v in state.v], state.t)


def _restore(model: ModelParams, snap: dict[str, np.ndarray]) -> None:
    for k, t in model.named_parameters().items():
        t.data = snap[k].copy()


def train(cfg: TrainConfig, train_scenes: Sequence[Scene] | None = None,
          val_scenes: Sequence[Scene] | None = None, model: ModelParams | None = None) -> tuple[Checkpoint, TrainLog]:
    """Train from scratch (or from ``model``) and keep the best-validation parameters."""
    synth = cfg.synth_config()
    if train_scenes is None or val_scenes is None:
        split = make_split(synth, cfg.n_train, cfg.n_val)
        train_scenes = load_scenes(synth, split["train"]) if train_scenes is None else train_scenes
        val_scenes = load_scenes(synth, split["val"]) if val_scenes is None else val_scenes
    model = model or build(cfg.model_config(), cfg.seed)
    params = model.parameters()
    state = AdamState.zeros(params)
    tlog = TrainLog()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 99]))
    s, crop, size = cfg.scale, cfg.crop, cfg.scene_size
    n_pos = (size - crop) // s + 1

    best = evaluate_scenes(model, val_scenes)["mean_rmse_cm"]
    best_snap, best_state = _snapshot(model), _copy_state(state)
    meta = {"val_rmse_cm": best, "epoch": 0}
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_scenes))
        losses = []
        diverged = False
        for i in range(0, len(order), cfg.batch_size):
            batch = [_crop(train_scenes[j], s * int(rng.integers(n_pos)), s * int(rng.integers(n_pos)), crop)
                     for j in order[i:i + cfg.batch_size]]
            d, r, n, sem, gt, valid = _stack(batch, model.config.np_dtype)
            pred, _ = forward(model, d, r, n, sem)
            loss = l1_loss(pred, gt, valid)
            if not np.isfinite(loss.item()):
                diverged = True
                break
            zero_grad(params)
            backward(loss)
            if not adam_step(params, state, cfg.lr):
                tlog.incidents.append(f"epoch {epoch} batch {i // cfg.batch_size}: non-finite gradient, step skipped")
            losses.append(loss.item())
        if diverged:
            tlog.incidents.append(f"epoch {epoch}: non-finite loss, aborted")
            log.error("training diverged at epoch %d; returning last good checkpoint", epoch)
            break
        val = evaluate_scenes(model, val_scenes)["mean_rmse_cm"]
        hd, _ = hist_distance(model, val_scenes[:4])
        seconds = 0.0 if cfg.deterministic else time.perf_counter() - t0
        tlog.append(epoch=epoch, train_l1=float(np.mean(losses)), val_rmse_cm=val, hist_dist=hd, seconds=seconds)
        log.info("epoch %d train_l1 %.4f val_rmse %.4f hist %.4f (%.1fs)", epoch, np.mean(losses), val, hd,
                 time.perf_counter() - t0)
        if val < best:
            best, best_snap = val, _snapshot(model)
            best_state = _copy_state(state)
            meta = {"val_rmse_cm": val, "epoch": epoch}
    _restore(model, best_snap)
    return Checkpoint(model, cfg, best_state, meta), tlog


def evaluate(ckpt: Checkpoint | ModelParams, synth: SynthConfig, entries: Sequence[tuple[int, int]],
             noise_std: float | None = None) -> dict[str, Any]:
    """Per-scene and mean RMSE (cm) of a model on the listed scenes."""
    model = ckpt.model if isinstance(ckpt, Checkpoint) else ckpt
    if model.config.scale != synth.scale:
        raise ValueError(f"checkpoint scale {model.config.scale} != data scale {synth.scale}")
    if noise_std is not None:
        synth = dataclasses.replace(synth, noise_std=noise_std)
    scenes = load_scenes(synth, entries)
    res = evaluate_scenes(model, scenes)
    res["indices"] = [i for i, _ in entries]
    res["bicubic_rmse_cm"] = bicubic_baseline(scenes)["mean_rmse_cm"]
    return res


# ---------------------------------------------------------------- kernel diagnostics

def textured_mask(scene: Scene, min_texture: float = 0.05) -> np.ndarray:
    """LR-grid mask of semantic-uniform, RGB-textured cells.

    A cell qualifies when its HR block and a one-block margin carry a single
    label and the mean RGB gradient magnitude inside the block is at least
    ``min_texture``.
    """
    s = scene.scale
    labels = scene.labels if scene.labels is not None else np.rint(scene.semantic[0] * MAX_LABEL)
    H, W = labels.shape
    h, w = H // s, W // s
    pad = np.pad(labels, s, mode="edge")
    uniform = np.ones((h, w), bool)
    for oy in range(3 * s):
        for ox in range(3 * s):
            uniform &= pad[oy:oy + H:s, ox:ox + W:s][:h, :w] == labels[::s, ::s]
    gy = np.abs(np.diff(scene.rgb, axis=1, append=scene.rgb[:, -1:])).mean(axis=0)
    gx = np.abs(np.diff(scene.rgb, axis=2, append=scene.rgb[:, :, -1:])).mean(axis=0)
    tex = (gx + gy).reshape(h, s, w, s).mean(axis=(1, 3))
    return uniform & (tex >= min_texture)


def kernel_fields(model: ModelParams, scene: Scene) -> dict[str, np.ndarray]:
    """Prior-to-depth kernel field per modality, stacked over stages: (stages, K*K, h, w)."""
    with no_grad():
        d, r, n, sem, _, _ = _stack([scene], model.config.np_dtype)
        _, diag = forward(model, d, r, n, sem)
    out: dict[str, list[np.ndarray]] = {}
    for stage in diag.kernels:
        for mod, ks in stage.items():
            if "pd" in ks:
                out.setdefault(mod, []).append(ks["pd"].data[0])
    return {m: np.stack(v) for m, v in out.items()}


def kernel_interference(model: ModelParams, scenes: Sequence[Scene]) -> dict[str, Any]:
    """Per-scene mean kernel gradient magnitude on textured regions, per modality.

    A scene passes when every non-RGB modality's mean is <= the RGB mean.
    """
    rows = []
    for i, sc in enumerate(scenes):
        mask = textured_mask(sc)
        if not mask.any():
            continue
        fields = kernel_fields(model, sc)
        if "r" not in fields:
            raise ValueError("kernel_interference: model has no RGB prior-to-depth kernels")
        means = {m: kernel_stats(f, mask)["mean"] for m, f in fields.items()}
        rows.append({"scene": i, **{f"mean_{m}": v for m, v in sorted(means.items())},
                     "pass": all(v <= means["r"] for m, v in means.items() if m != "r")})
    frac = float(np.mean([r["pass"] for r in rows])) if rows else float("nan")
    return {"rows": rows, "pass_fraction": frac}


# ---------------------------------------------------------------- ablations

def suite_variants(base: TrainConfig, suite: str) -> list[tuple[str, TrainConfig]]:
    rep = dataclasses.replace
    if suite == "priors":
        return [(name, rep(base, order=tuple(m for m in base.order if m in mods),
                           use_normal=True, use_semantic=True))
                for name, mods in PRIOR_ROWS.items()]
    if suite == "stages":
        return [(f"APP&OPE-{k}", rep(base, stages=k)) for k in range(1, 5)]
    if suite == "order":
        return [("+".join(p).upper(), rep(base, order=p)) for p in itertools.permutations(("n", "s", "r"))]
    if suite == "mgf":
        return [(name, rep(base, mgf_mode=mode, similarity_guidance=sim)) for name, (mode, sim) in MGF_ROWS.items()]
    raise ValueError(f"unknown ablation suite {suite!r}; choose from {SUITES}")


def ablate(base: TrainConfig, suite: str) -> list[dict[str, Any]]:
    """Train every variant of ``suite`` with the base seed/budget.

    Checkpoints are picked on the validation split; ``rmse_cm`` is measured on a
    disjoint held-out split of the same size placed after it.
    """
    variants = suite_variants(base, suite)
    synth = base.synth_config()
    split = make_split(synth, base.n_train, base.n_val)
    train_scenes = load_scenes(synth, split["train"])
    val_scenes = load_scenes(synth, split["val"])
    test_scenes = load_scenes(synth, make_split(synth, 0, base.n_val, val_start=base.n_train + base.n_val)["val"])
    bic = bicubic_baseline(test_scenes)["mean_rmse_cm"]
    rows = []
    for name, cfg in variants:
        ckpt, _ = train(cfg, train_scenes, val_scenes)
        res = evaluate_scenes(ckpt.model, test_scenes)
        rows.append({"variant": name, "rmse_cm": res["mean_rmse_cm"], "val_rmse_cm": ckpt.meta["val_rmse_cm"],
                     "bicubic_rmse_cm": bic, "params": sum(p.size for p in ckpt.model.parameters())})
        log.info("ablate %s %s: %.4f", suite, name, res["mean_rmse_cm"])
    return rows


def table_csv(rows: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def table_text(rows: Sequence[dict[str, Any]]) -> str:
    cols = list(rows[0])
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"
