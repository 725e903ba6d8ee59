"""Write the toy digit splits in the binary dataset format.

    python scripts/make_toy_data.py --out data --n-train 150 --n-test 50

Point the CLI at them with ``data = ...`` and ``test_data = ...`` in the config file.
"""
import argparse
import os

from zoaeds.data import TOY_SEED, save_dataset, toy_splits


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="data")
    p.add_argument("--n-train", type=int, default=150)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--seed", type=int, default=TOY_SEED)
    args = p.parse_args()
    os.makedirs(args.out, exist_ok=True)
    train, test = toy_splits(args.n_train, args.n_test, seed=args.seed)
    for name, ds in (("train", train), ("test", test)):
        path = os.path.join(args.out, f"toy_{name}.bin")
        digest = save_dataset(ds, path)
        print(f"{path}: {len(ds.images)} images, sha256 {digest}")


if __name__ == "__main__":
    main()
