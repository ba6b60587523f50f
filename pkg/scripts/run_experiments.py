"""Run the shared-budget experiments (desk training, prior and MGF ablations, noise, kernels).

Writes a JSON report and prints one summary line per experiment.

    python scripts/run_experiments.py --out results/desk
    python scripts/run_experiments.py --variant spfnet-t --epochs 10 --out results/tiny
"""
import argparse
import json
import logging
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from spfnet.experiments import (
    Runner,
    desk_report,
    kernel_report,
    mean_kernel_gradients,
    mgf_direction,
    noise_robustness,
    prior_ordering,
    summarize,
)
from spfnet.io import save_checkpoint
from spfnet.train import MGF_ROWS, TrainConfig

EXPERIMENTS = ("desk", "priors", "mgf", "noise", "kernels")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--only", nargs="*", choices=EXPERIMENTS, default=list(EXPERIMENTS))
    ap.add_argument("--variant", default="spfnet")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-val", type=int, default=40)
    ap.add_argument("--n-test", type=int, default=40)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = TrainConfig(variant=args.variant, epochs=args.epochs, n_train=args.n_train, n_val=args.n_val,
                       seed=args.seed, deterministic=True)
    runner = Runner(base, n_test=args.n_test)
    report = {"base": base.to_dict()}
    args.out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        for name in args.only:
            t0 = time.perf_counter()
            if name == "desk":
                rep = desk_report(runner)
                save_checkpoint(args.out / "desk.spft", runner.checkpoint(base))
            elif name == "priors":
                rep = prior_ordering(runner.suite("priors"))
            elif name == "mgf":
                names = list(MGF_ROWS)
                rep = mgf_direction(runner.suite("mgf", only=(names[0], names[-1])))
            elif name == "noise":
                rep = noise_robustness(runner)
            else:
                rep = kernel_report(runner)
                rep["mean_gradients"] = mean_kernel_gradients(rep)
            rep["seconds"] = time.perf_counter() - t0
            report[name] = rep
            print(f"{name}: {summarize(rep)}", flush=True)
            (args.out / "report.json").write_text(json.dumps(report, indent=1, default=str) + "\n")


if __name__ == "__main__":
    main()
