#!/usr/bin/env python3
"""Write the synthetic 3-class grating corpus (600 train / 300 test, 40x40 by default)."""
import argparse

from rescnds.data import make_synthetic_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("root", help="output directory")
    p.add_argument("--train", type=int, default=600)
    p.add_argument("--test", type=int, default=300)
    p.add_argument("--size", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    root = make_synthetic_dataset(a.root, a.train, a.test, a.size, a.seed)
    print(f"wrote {a.train} train / {a.test} test images to {root}")


if __name__ == "__main__":
    main()
