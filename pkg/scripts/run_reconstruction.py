"""Run the reconstruction suite for a few seeds and write RMSE/SSIM tables.

    python scripts/run_reconstruction.py --seeds 0 1 2 --out results/reconstruction
"""
import argparse
import csv
import logging
import os

from zoaeds.experiments import ReconstructionSuite, mean_row, run_reconstruction
from zoaeds.robusteval import write_attack_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="results/reconstruction")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    suite = ReconstructionSuite()
    os.makedirs(args.out, exist_ok=True)
    results = []
    for seed in args.seeds:
        res = run_reconstruction(suite, seed)
        results.append(res)
        logging.info("seed %d done in %.0fs (base RMSE %.4f)", seed, res.seconds, res.base_rmse)
        write_attack_csv(res.rows, os.path.join(args.out, f"attack_seed{seed}.csv"))

    path = os.path.join(args.out, "attack_mean.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "epsilon", "rmse", "ssim"])
        for method in ["standard"] + [v.name for v in suite.variants]:
            for eps in suite.epsilons:
                rm, ss = mean_row(results, method, eps)
                w.writerow([method, eps, f"{rm:.4f}", f"{ss:.4f}"])
    print(open(path).read(), end="")


if __name__ == "__main__":
    main()
