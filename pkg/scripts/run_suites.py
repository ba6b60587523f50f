"""Train every row of one or more ablation suites under a shared budget and write CSV and text tables.

    python scripts/run_suites.py --suites priors mgf stages order --out results/suites
"""
import argparse
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from spfnet.experiments import Runner
from spfnet.train import SUITES, TrainConfig, table_csv, table_text


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--suites", nargs="+", choices=SUITES, default=["priors", "mgf"])
    ap.add_argument("--out", type=Path, default=Path("results/suites"))
    ap.add_argument("--variant", default="spfnet")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    runner = Runner(TrainConfig(variant=args.variant, epochs=args.epochs, seed=args.seed, deterministic=True))
    args.out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        for suite in args.suites:
            rows = runner.suite(suite)
            bic = runner.bicubic_rmse()
            rows = [{**r, "ratio_vs_bicubic": r["rmse_cm"] / bic} for r in rows]
            (args.out / f"{suite}.csv").write_text(table_csv(rows))
            (args.out / f"{suite}.txt").write_text(table_text(rows))
            print(f"# {suite} (bicubic {bic:.4f} cm)\n{table_text(rows)}", flush=True)


if __name__ == "__main__":
    main()
