"""Shared-budget experiments: desk training, prior and MGF ablations, noise robustness, kernel diagnostics.

Checkpoints are selected on the validation split; every reported RMSE comes from a
disjoint held-out test split placed after it.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .scene import Scene, make_split
from .train import (
    MGF_ROWS,
    PRIOR_ROWS,
    Checkpoint,
    TrainConfig,
    bicubic_baseline,
    evaluate_scenes,
    kernel_interference,
    load_scenes,
    suite_variants,
    train,
)

log = logging.getLogger(__name__)

TIE_MARGIN = 0.005  # relative margin below which two RMSEs count as tied
MGF_MARGIN = 0.01


def heldout_entries(cfg: TrainConfig, n: int | None = None) -> list[tuple[int, int]]:
    """Held-out scenes after the train and validation ranges."""
    synth = cfg.synth_config()
    return make_split(synth, 0, n or cfg.n_val, val_start=cfg.n_train + cfg.n_val)["val"]


@dataclass
class Runner:
    """Trains each distinct config once on the shared split and caches the result."""
    base: TrainConfig
    n_test: int = 40
    _runs: dict[str, Checkpoint] = field(default_factory=dict)
    _data: dict[float, tuple[list[Scene], list[Scene], list[Scene]]] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)  # wall time per trained config

    def scenes(self, noise_std: float) -> tuple[list[Scene], list[Scene], list[Scene]]:
        if noise_std not in self._data:
            synth = self.base.synth_config(noise_std)
            split = make_split(synth, self.base.n_train, self.base.n_val)
            self._data[noise_std] = (load_scenes(synth, split["train"]), load_scenes(synth, split["val"]),
                                     load_scenes(synth, heldout_entries(self.base, self.n_test)))
        return self._data[noise_std]

    def checkpoint(self, cfg: TrainConfig) -> Checkpoint:
        key = json.dumps(cfg.to_dict(), sort_keys=True)
        if key not in self._runs:
            tr, va, _ = self.scenes(cfg.noise_std)
            log.info("training %s", key)
            t0 = time.perf_counter()
            self._runs[key], _ = train(cfg, tr, va)
            self.seconds[key] = time.perf_counter() - t0
        return self._runs[key]

    def test_rmse(self, cfg: TrainConfig, noise_std: float | None = None) -> float:
        _, _, te = self.scenes(cfg.noise_std if noise_std is None else noise_std)
        return evaluate_scenes(self.checkpoint(cfg).model, te)["mean_rmse_cm"]

    def bicubic_rmse(self, noise_std: float = 0.0) -> float:
        return bicubic_baseline(self.scenes(noise_std)[2])["mean_rmse_cm"]

    def suite(self, name: str, only: tuple[str, ...] | None = None) -> list[dict[str, Any]]:
        return [{"variant": v, "rmse_cm": self.test_rmse(c)} for v, c in suite_variants(self.base, name)
                if only is None or v in only]


def strictly_better(a: float, b: float, margin: float = TIE_MARGIN) -> str:
    """'better' when a <= (1 - margin) b, 'tie' within the margin, else 'worse'."""
    if a <= (1 - margin) * b:
        return "better"
    return "tie" if a <= (1 + margin) * b else "worse"


def prior_ordering(rows: list[dict[str, Any]], margin: float = TIE_MARGIN) -> dict[str, Any]:
    """full <= min(RGB+N, RGB+S) <= RGB, each link won by ``margin`` or tied; at most one tie."""
    r = {row["variant"]: row["rmse_cm"] for row in rows}
    names = list(PRIOR_ROWS)
    rgb, full = r[names[0]], r[names[-1]]
    mid = min(r[names[1]], r[names[2]])
    links = [strictly_better(full, mid, margin), strictly_better(mid, rgb, margin)]
    ok = "worse" not in links and links.count("tie") <= 1
    return {"rmse": r, "links": links, "pass": ok}


def mgf_direction(rows: list[dict[str, Any]], margin: float = MGF_MARGIN) -> dict[str, Any]:
    """Variant (f) beats (a) by at least ``margin`` relative RMSE."""
    r = {row["variant"]: row["rmse_cm"] for row in rows}
    names = list(MGF_ROWS)
    a, f = r[names[0]], r[names[-1]]
    return {"rmse": r, "gain": 1 - f / a, "pass": f <= (1 - margin) * a}


def noise_robustness(runner: Runner, noise_std: float = 5.0) -> dict[str, Any]:
    """Noisy-trained vs clean-trained model, both evaluated on the same noisy test inputs."""
    noisy_cfg = dataclasses.replace(runner.base, noise_std=noise_std)
    noisy = runner.test_rmse(noisy_cfg)
    clean = runner.test_rmse(runner.base, noise_std=noise_std)
    return {"noisy_trained": noisy, "clean_trained": clean, "pass": noisy <= clean}


def kernel_report(runner: Runner, min_fraction: float = 0.7) -> dict[str, Any]:
    _, _, te = runner.scenes(0.0)
    rep = kernel_interference(runner.checkpoint(runner.base).model, te)
    return {**rep, "pass": rep["pass_fraction"] >= min_fraction}


def desk_report(runner: Runner, max_ratio: float = 0.8) -> dict[str, Any]:
    bic = runner.bicubic_rmse()
    got = runner.test_rmse(runner.base)
    key = json.dumps(runner.base.to_dict(), sort_keys=True)
    return {"bicubic_rmse_cm": bic, "rmse_cm": got, "ratio": got / bic, "pass": got <= max_ratio * bic,
            "train_seconds": runner.seconds[key], "val_meta": runner.checkpoint(runner.base).meta}


def summarize(rep: dict[str, Any]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        if isinstance(v, dict):
            return "{" + ", ".join(f"{k}: {fmt(x)}" for k, x in v.items()) + "}"
        if isinstance(v, (list, tuple)) and len(v) > 8:
            return f"[{len(v)} items]"
        return str(v)
    return " ".join(f"{k}={fmt(v)}" for k, v in rep.items() if k != "rows")


def mean_kernel_gradients(rep: dict[str, Any]) -> dict[str, float]:
    mods = [k for k in rep["rows"][0] if k.startswith("mean_")] if rep["rows"] else []
    return {m: float(np.mean([r[m] for r in rep["rows"]])) for m in mods}
