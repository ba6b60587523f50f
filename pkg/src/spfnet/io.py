"""File formats: PFM images, SPFT tensor containers, checkpoints, external-data ingestion.

SPFT layout (all little-endian)::

    b"SPFT" | version:u32 | count:u32 |
    count x ( name_len:u32 | name:utf-8 | dtype:u8 | rank:u8 | dims:u64*rank | payload )

dtype codes: 0=f32, 1=f64, 2=i32.
"""
from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, build
from .scene import MAX_LABEL, Scene, degrade

MAGIC = b"SPFT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int32): 2}


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- PFM

def save_pfm(path, image: np.ndarray) -> None:
    """Write (H, W), (1, H, W) as "Pf" or (3, H, W) as "PF"; little-endian, bottom-up rows."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"save_pfm: need 1 or 3 channels, got shape {img.shape}")
    c, h, w = img.shape
    header = f"{'Pf' if c == 1 else 'PF'}\n{w} {h}\n-1.0\n".encode("ascii")
    # interleave channels, flip to bottom-up
    body = np.ascontiguousarray(img.transpose(1, 2, 0)[::-1], dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_pfm(path) -> np.ndarray:
    """Read a PFM file as float32 (C, H, W)."""
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    while len(fields) < 4:
        m = re.compile(rb"\s*(\S+)").match(raw, pos)
        if m is None:
            raise FormatError(f"{path}: malformed PFM header at byte {pos}")
        fields.append(m.group(1))
        pos = m.end()
        if len(fields) == 1 and fields[0] not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file (magic {fields[0][:8]!r} at byte 0)")
    pos += 1  # single whitespace byte after the scale
    try:
        w, h = int(fields[1]), int(fields[2])
        scale = float(fields[3])
    except ValueError as e:
        raise FormatError(f"{path}: malformed PFM header before byte {pos}: {e}") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise FormatError(f"{path}: invalid dimensions/scale in header ending at byte {pos}")
    c = 1 if fields[0] == b"Pf" else 3
    dt = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    need = w * h * c * 4
    if len(raw) - pos < need:
        raise FormatError(f"{path}: truncated payload at byte {len(raw)}, expected {pos + need}")
    data = np.frombuffer(raw, dtype=dt, count=w * h * c, offset=pos).reshape(h, w, c)
    return np.ascontiguousarray(data[::-1].transpose(2, 0, 1)).astype(np.float32)


# ---------------------------------------------------------------- SPFT containers

def save_container(path, tensors: dict[str, np.ndarray]) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise ValueError(f"save_container: unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<BB", CODES[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=DTYPES[CODES[arr.dtype]]).tobytes()
    Path(path).write_bytes(bytes(out))


def load_container(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()

    def take(fmt, pos):
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated container at byte {pos}")
        return struct.unpack_from(fmt, raw, pos), pos + size

    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    (version, count), pos = take("<II", 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,), pos = take("<I", pos)
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated name at byte {pos}")
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (code, rank), pos = take("<BB", pos)
        if code not in DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} at byte {pos - 2}")
        dims, pos = take(f"<{rank}Q", pos)
        dt = DTYPES[code]
        nbytes = dt.itemsize * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload for {name!r} at byte {pos}")
        if name in out:
            raise FormatError(f"{path}: duplicate entry {name!r} at byte {pos}")
        arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="))
        pos += nbytes
    return out


def _text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int32)


def _entry_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, ckpt) -> None:
    from .train import Checkpoint  # noqa: F401  (type only)
    model = ckpt.model
    cfg = {"model": model.config.to_dict(), "meta": ckpt.meta,
           "train": ckpt.train_config.to_dict() if ckpt.train_config else None}
    entries: dict[str, np.ndarray] = {"config": _text_entry(json.dumps(cfg, sort_keys=True))}
    named = model.named_parameters()
    for k, t in named.items():
        entries[f"param/{k}"] = t.data
    if ckpt.adam is not None:
        entries["adam/t"] = np.array([ckpt.adam.t], dtype=np.int32)
        for (k, _), m, v in zip(named.items(), ckpt.adam.m, ckpt.adam.v):
            entries[f"adam/m/{k}"] = m
            entries[f"adam/v/{k}"] = v
    save_container(path, entries)


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Rebuild a Checkpoint; a mismatching ``expect`` config is rejected before any copy."""
    from .train import AdamState, Checkpoint, TrainConfig
    entries = load_container(path)
    if "config" not in entries:
        raise FormatError(f"{path}: checkpoint has no config entry")
    cfg = json.loads(_entry_text(entries["config"]))
    mcfg = ModelConfig.from_dict(cfg["model"])
    if expect is not None and expect.to_dict() != mcfg.to_dict():
        diff = sorted(k for k in mcfg.to_dict() if mcfg.to_dict()[k] != expect.to_dict().get(k))
        raise ValueError(f"checkpoint config mismatch in fields {diff}")
    model = build(mcfg, 0)
    named = model.named_parameters()
    for k, t in named.items():
        src = entries.get(f"param/{k}")
        if src is None or src.shape != t.shape:
            raise ValueError(f"checkpoint parameter {k!r} missing or mis-shaped")
    for k, t in named.items():
        t.data = entries[f"param/{k}"].astype(t.dtype)
    adam = None
    if "adam/t" in entries:
        adam = AdamState([entries[f"adam/m/{k}"].copy() for k in named],
                         [entries[f"adam/v/{k}"].copy() for k in named], int(entries["adam/t"][0]))
    tcfg = TrainConfig.from_dict(cfg["train"]) if cfg.get("train") else None
    return Checkpoint(model, tcfg, adam, cfg.get("meta", {}))


# ---------------------------------------------------------------- scene export / ingestion

UNITS_TO_CM = {"cm": 1.0, "mm": 0.1, "m": 100.0}
SAMPLE_FILES = ("rgb.pfm", "depth.pfm", "normal.pfm", "semantic.pfm")


def export_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_pfm(d / "rgb.pfm", scene.rgb)
    save_pfm(d / "depth.pfm", scene.depth_gt)
    save_pfm(d / "normal.pfm", scene.normal)
    save_pfm(d / "semantic.pfm", scene.semantic)
    save_pfm(d / "depth_lr.pfm", scene.depth_lr)
    (d / "meta.txt").write_text(f"units=cm\nscale={scene.scale}\n")


def _read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def ingest_sample(directory, scale: int | None = None) -> Scene:
    d = Path(directory)
    missing = [f for f in SAMPLE_FILES + ("meta.txt",) if not (d / f).exists()]
    if missing:
        raise ValueError(f"missing {', '.join(missing)}")
    meta = _read_meta(d / "meta.txt")
    units = meta.get("units")
    if units not in UNITS_TO_CM:
        raise ValueError(f"unknown depth units {units!r}")
    s = int(meta.get("scale", scale or 0))
    if scale is not None and s != scale:
        raise ValueError(f"scale mismatch: sample declares {s}, expected {scale}")
    k = UNITS_TO_CM[units]
    rgb, depth = load_pfm(d / "rgb.pfm"), load_pfm(d / "depth.pfm")
    normal, sem = load_pfm(d / "normal.pfm"), load_pfm(d / "semantic.pfm")
    if rgb.shape[0] != 3 or normal.shape[0] != 3 or depth.shape[0] != 1 or sem.shape[0] != 1:
        raise ValueError("channel counts must be rgb=3, normal=3, depth=1, semantic=1")
    if not (rgb.shape[1:] == depth.shape[1:] == normal.shape[1:] == sem.shape[1:]):
        raise ValueError("modalities differ in spatial size")
    if k != 1.0:
        depth = (depth * k).astype(np.float32)
    valid = depth > 0
    norms = np.linalg.norm(normal.astype(np.float64), axis=0, keepdims=True)
    off = np.abs(norms - 1.0)[valid]
    if off.size and off.max() >= 0.01:
        raise ValueError(f"normals off unit length by {off.max():.3f} (>= 1%)")
    fix = (np.abs(norms - 1.0) > 1e-5) & valid & (norms > 0)
    if fix.any():
        normal = np.where(fix, normal / np.where(norms > 0, norms, 1.0), normal).astype(np.float32)
    if sem.max() > 1.0:
        sem = (sem / sem.max()).astype(np.float32)
    if (d / "depth_lr.pfm").exists():
        d_lr = load_pfm(d / "depth_lr.pfm")
        if k != 1.0:
            d_lr = (d_lr * k).astype(np.float32)
    else:
        d_lr = degrade(depth, s)
    if d_lr.shape[1] * s != depth.shape[1] or d_lr.shape[2] * s != depth.shape[2]:
        raise ValueError("LR depth size inconsistent with scale")
    labels = np.rint(sem[0] * MAX_LABEL).astype(np.int32)
    return Scene(rgb, depth, normal, sem, d_lr, valid, s, labels)


def ingest_external(directory, scale: int | None = None) -> tuple[list[Scene], dict[str, str]]:
    """Load every sample sub-directory; failures are collected, not raised."""
    scenes, rejected = [], {}
    for sub in sorted(p for p in Path(directory).iterdir() if p.is_dir()):
        try:
            scenes.append(ingest_sample(sub, scale))
        except (ValueError, OSError) as e:
            rejected[sub.name] = str(e)
    return scenes, rejected
