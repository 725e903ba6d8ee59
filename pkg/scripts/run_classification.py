"""Run the classification suite for a few seeds and write CA tables.

    python scripts/run_classification.py --seeds 0 1 2 --out results/classification
"""
import argparse
import csv
import logging
import os

from zoaeds.experiments import ClassificationSuite, mean_ca, run_classification


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="results/classification")
    p.add_argument("--epochs", type=int, help="defense training epochs (suite default 20)")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    suite = ClassificationSuite() if args.epochs is None else ClassificationSuite(epochs=args.epochs)
    os.makedirs(args.out, exist_ok=True)
    results = []
    for seed in args.seeds:
        res = run_classification(suite, seed)
        results.append(res)
        logging.info("seed %d done in %.0fs (base accuracy %.3f)", seed, res.seconds, res.base_accuracy)
        with open(os.path.join(args.out, f"ca_seed{seed}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "queries"] + [f"r={r}" for r in suite.radii])
            for v in suite.variants:
                w.writerow([v.name, res.queries[v.name]] + [res.ca(v.name, r) for r in suite.radii])

    path = os.path.join(args.out, "ca_mean.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + [f"r={r}" for r in suite.radii])
        for v in suite.variants:
            w.writerow([v.name] + [f"{mean_ca(results, v.name, r):.4f}" for r in suite.radii])
    print(open(path).read(), end="")


if __name__ == "__main__":
    main()
