#!/usr/bin/env python3
"""Export the Wine, Breast Cancer and Digits datasets to the CSV layout
read by the loaders (`<name>_features.csv` / `<name>_labels.csv`).

The features file holds one row per sample, comma-separated raw feature
values (no header). The labels file holds one integer class id per line.
Column standardization is done by the loader at load time, not here.

Usage: python3 scripts/export_tabular.py [out_dir=data]
"""

import sys
from pathlib import Path

from sklearn.datasets import load_breast_cancer, load_digits, load_wine


def export(name, bunch, out_dir):
    feats = out_dir / f"{name}_features.csv"
    labels = out_dir / f"{name}_labels.csv"
    with feats.open("w") as f:
        for row in bunch.data:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    with labels.open("w") as f:
        for y in bunch.target:
            f.write(f"{int(y)}\n")
    print(f"{name}: {bunch.data.shape[0]} samples, "
          f"{bunch.data.shape[1]} features, "
          f"{len(set(bunch.target))} classes -> {feats}, {labels}")


def main():
    out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "data")
    out_dir.mkdir(parents=True, exist_ok=True)
    export("wine", load_wine(), out_dir)
    export("cancer", load_breast_cancer(), out_dir)
    export("digits", load_digits(), out_dir)


if __name__ == "__main__":
    main()
