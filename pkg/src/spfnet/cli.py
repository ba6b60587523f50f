"""Command-line entry point: synth, train, eval, infer, ablate, inspect-kernels, gradcheck.

Exit codes: 0 success, 1 validation failure, 2 usage error. Failures print a
single ``error kind=<Type> msg=<text>`` line on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from .autodiff import Tensor, no_grad
from .model import VARIANT_CHANNELS, ModelConfig, build, forward
from .nn import SCALES, bicubic_np
from .ope import kernel_stats
from .scene import SynthConfig, generate_scene, make_split, read_manifest, write_manifest
from .train import (
    SUITES,
    TrainConfig,
    ablate,
    evaluate,
    evaluate_scenes,
    kernel_fields,
    kernel_interference,
    load_scenes,
    table_csv,
    table_text,
    textured_mask,
    train,
)

log = logging.getLogger("spfnet")


class UsageError(Exception):
    pass


def _order(text: str) -> tuple[str, ...]:
    """"nsr", "n,s,r" and "n+s+r" all parse to ("n", "s", "r")."""
    return tuple(c for c in text.lower() if c not in ", +")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--seed", type=int)
    g.add_argument("--scale", type=int, choices=SCALES)
    g.add_argument("--variant", choices=sorted(VARIANT_CHANNELS))
    g.add_argument("--stages", type=int)
    g.add_argument("--order", type=_order, help="prior order, e.g. nsr or n,s,r")
    g.add_argument("--noise-std", type=float, help="LR depth noise std on the 0-255 scale")
    g.add_argument("--config", type=Path, help="JSON file of training-config fields")
    g.add_argument("--deterministic", action="store_true", default=None, help="single-threaded numerics")
    g.add_argument("-v", "--verbose", action="store_true")


def _budget(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--scene-size", type=int)
    p.add_argument("--channels", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spfnet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic scenes and manifests")
    _common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--val-count", type=int, default=0, help="last N scenes go to val.txt")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", type=Path, default=Path("synth"))

    p = sub.add_parser("train", help="train a model on synthetic scenes")
    _common(p)
    _budget(p)
    p.add_argument("--out", type=Path, default=Path("run"))

    p = sub.add_parser("eval", help="held-out RMSE of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="external sample directory (default: synthetic val split)")
    p.add_argument("--manifest", type=Path, help="index/seed manifest of synthetic scenes")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--out", type=Path, help="write per-scene CSV here")

    p = sub.add_parser("infer", help="run one sample and write D_hr and an error map")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="omit to use a freshly built model")
    p.add_argument("--input", type=Path, required=True, help="sample directory")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="run an ablation suite under a shared budget")
    _common(p)
    _budget(p)
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--out", type=Path, default=Path("ablate"))

    p = sub.add_parser("inspect-kernels", help="kernel fields and gradient histograms per modality")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--n-scenes", type=int, default=40)
    p.add_argument("--out", type=Path, default=Path("kernels"))

    p = sub.add_parser("gradcheck", help="64-bit finite-difference suite")
    _common(p)
    p.add_argument("--ops-only", action="store_true", help="skip the full-model check")
    return ap


TRAIN_FLAGS = ("seed", "scale", "variant", "stages", "order", "noise_std", "deterministic", "epochs", "lr",
               "batch_size", "crop", "n_train", "n_val", "scene_size", "channels")


def train_config(args) -> TrainConfig:
    """Defaults, then --config JSON, then explicit flags."""
    fields = {}
    if args.config is not None:
        try:
            fields.update(json.loads(args.config.read_text()))
        except json.JSONDecodeError as e:
            raise ValueError(f"config {args.config}: {e}") from None
    for k in TRAIN_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            fields[k] = v
    return TrainConfig.from_dict(fields)


def cmd_synth(args) -> int:
    cfg = train_config(args)
    if args.count < 1 or not 0 <= args.val_count <= args.count:
        raise UsageError("--count must be >= 1 and --val-count within [0, count]")
    synth = SynthConfig(seed=cfg.seed, size=args.size, scale=cfg.scale, noise_std=cfg.noise_std)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    n_train = args.count - args.val_count
    split = make_split(synth, n_train, args.val_count)
    for idx, _ in split["train"] + split["val"]:
        sio.export_scene(generate_scene(synth, idx), out / "scenes" / f"{idx:05d}")
    write_manifest(out / "train.txt", split["train"])
    write_manifest(out / "val.txt", split["val"])
    (out / "synth.json").write_text(json.dumps(dataclasses.asdict(synth), sort_keys=True, indent=1) + "\n")
    print(f"wrote {args.count} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = train_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt, tlog = train(cfg)
    sio.save_checkpoint(args.out / "checkpoint.spft", ckpt)
    tlog.write(args.out / "train_log.csv")
    (args.out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")
    print(json.dumps({"val_rmse_cm": ckpt.meta["val_rmse_cm"], "epoch": ckpt.meta["epoch"]}))
    return 0


def _load(args, expect: ModelConfig | None = None):
    return sio.load_checkpoint(args.checkpoint, expect)


def cmd_eval(args) -> int:
    ckpt = _load(args)
    tcfg = ckpt.train_config or TrainConfig(scale=ckpt.model.config.scale)
    if args.data is not None:
        scenes, rejected = sio.ingest_external(args.data, ckpt.model.config.scale)
        for name, why in rejected.items():
            print(f"rejected {name}: {why}", file=sys.stderr)
        if not scenes:
            raise ValueError(f"no usable samples in {args.data}")
        res = evaluate_scenes(ckpt.model, scenes)
    else:
        for k in ("seed", "n_train", "n_val"):
            if getattr(args, k, None) is not None:
                tcfg = dataclasses.replace(tcfg, **{k: getattr(args, k)})
        synth = tcfg.synth_config()
        entries = read_manifest(args.manifest) if args.manifest else \
            make_split(synth, tcfg.n_train, tcfg.n_val)["val"]
        res = evaluate(ckpt, synth, entries, args.noise_std)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text("scene,rmse_cm\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(res["per_scene"])))
    print(json.dumps({"mean_rmse_cm": res["mean_rmse_cm"], "n": len(res["per_scene"]),
                      **({"bicubic_rmse_cm": res["bicubic_rmse_cm"]} if "bicubic_rmse_cm" in res else {})}))
    return 0


def cmd_infer(args) -> int:
    if args.checkpoint:
        model = _load(args).model
    else:
        cfg = train_config(args)
        model = build(cfg.model_config(), cfg.seed)
    scene = sio.ingest_sample(args.input, model.config.scale)
    dt = model.config.np_dtype
    with no_grad():
        pred, _ = forward(model, Tensor(scene.depth_lr[None].astype(dt)), Tensor(scene.rgb[None].astype(dt)),
                          Tensor(scene.normal[None].astype(dt)), Tensor(scene.semantic[None].astype(dt)))
    d_hr = pred.data[0].astype(np.float32)
    args.out.mkdir(parents=True, exist_ok=True)
    sio.save_pfm(args.out / "depth_hr.pfm", d_hr)
    err = np.where(scene.valid, np.abs(d_hr - scene.depth_gt), 0.0).astype(np.float32)
    sio.save_pfm(args.out / "error.pfm", err)
    rmse = float(np.sqrt((err.astype(np.float64) ** 2).sum() / max(1, scene.valid.sum())))
    bic = bicubic_np(scene.depth_lr, scene.scale)
    print(json.dumps({"rmse_cm": rmse, "max_abs_vs_bicubic": float(np.abs(d_hr - bic).max())}))
    return 0


def cmd_ablate(args) -> int:
    cfg = train_config(args)
    rows = ablate(cfg, args.suite)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"{args.suite}.csv").write_text(table_csv(rows))
    (args.out / f"{args.suite}.txt").write_text(table_text(rows))
    print(table_text(rows), end="")
    return 0


def cmd_inspect_kernels(args) -> int:
    if args.checkpoint:
        ckpt = _load(args)
        model, tcfg = ckpt.model, ckpt.train_config or TrainConfig()
    else:
        tcfg = train_config(args)
        model = build(tcfg.model_config(), tcfg.seed)
    synth = tcfg.synth_config() if args.noise_std is None else tcfg.synth_config(args.noise_std)
    entries = make_split(synth, tcfg.n_train, args.n_scenes)["val"]
    scenes = load_scenes(synth, entries)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    # kernel fields of the first scene, one container entry per modality
    sio.save_container(out / "kernel_fields.spft",
                       {m: f.astype(np.float32) for m, f in kernel_fields(model, scenes[0]).items()})
    hist_rows = []
    pooled: dict[str, list[np.ndarray]] = {}
    for sc in scenes:
        mask = textured_mask(sc)
        for m, f in kernel_fields(model, sc).items():
            pooled.setdefault(m, []).append(kernel_stats(f, mask)["mass"] * max(1, mask.sum()))
    for m, masses in sorted(pooled.items()):
        total = np.sum(masses, axis=0)
        total = total / total.sum() if total.sum() else total
        centers = kernel_stats(np.zeros((1, 9, 2, 2)))["bin_centers"]
        hist_rows += [f"{m},{float(c)!r},{float(v)!r}\n" for c, v in zip(centers, total)]
    (out / "kernel_grad_hist.csv").write_text("modality,bin_center,mass\n" + "".join(hist_rows))
    rep = kernel_interference(model, scenes)
    cols = [k for k in rep["rows"][0] if k != "pass"] if rep["rows"] else []
    (out / "kernel_means.csv").write_text(
        ",".join(cols + ["pass"]) + "\n"
        + "".join(",".join(repr(float(r[c])) for c in cols) + f",{int(r['pass'])}\n" for r in rep["rows"]))
    print(json.dumps({"pass_fraction": rep["pass_fraction"], "scenes": len(rep["rows"])}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite
    res = run_suite(seed=args.seed or 0, include_model=not args.ops_only,
                    progress=lambda n, e, s: print(f"{n:24s} max_rel_err={e:.3e} ({s:.1f}s)", flush=True))
    worst = max(res.values())
    ok = worst < TOLERANCE
    print(f"max_rel_err={worst:.3e} tol={TOLERANCE:g} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "ablate": cmd_ablate,
            "inspect-kernels": cmd_inspect_kernels, "gradcheck": cmd_gradcheck}


def _one_line(e: BaseException) -> str:
    return f"error kind={type(e).__name__} msg={json.dumps(str(e))}"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limiter = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=1)
    try:
        with limiter:
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(_one_line(e), file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, TypeError, FloatingPointError) as e:
        print(_one_line(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
