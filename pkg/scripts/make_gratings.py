"""Write the synthetic grating dataset (PNGs + manifest.tsv) used by configs/synthetic.ini.

    python3 scripts/make_gratings.py data/gratings --noise 0.75
"""
import argparse

from ddsfl.synthetic import write_grating_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("root")
    ap.add_argument("--train", type=int, default=20, help="training images per class")
    ap.add_argument("--val", type=int, default=5, help="validation images per class")
    ap.add_argument("--test", type=int, default=10, help="test images per class")
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--noise", type=float, default=0.75)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    path = write_grating_dataset(args.root, args.train, args.test, args.classes, 64, args.noise, args.seed, args.val)
    print(path)


if __name__ == "__main__":
    main()
