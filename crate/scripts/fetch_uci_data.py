#!/usr/bin/env python3
"""Assemble the UCI benchmark CSVs used by `pcnet knn` into ./data.

The tool itself never downloads anything. This script pulls copies of the
UCI files that ship inside published Python packages (scikit-learn,
Orange3, keel-ds) through pip and rewrites them as plain CSV with a header
row and a `class` label column.

    python3 scripts/fetch_uci_data.py [--out data]
"""
import argparse
import csv
import io
import os
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path


def pip_wheel(name, workdir):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", name, "-d", workdir],
        check=True,
    )
    for f in os.listdir(workdir):
        if f.endswith(".whl") and f.lower().replace("-", "_").startswith(name.replace("-", "_")):
            return zipfile.ZipFile(os.path.join(workdir, f))
    raise SystemExit(f"no wheel found for {name}")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows, {len(header) - 1} features)")


def sklearn_bundled(out):
    import sklearn

    base = Path(sklearn.__file__).parent / "datasets" / "data"
    specs = {
        "iris": ("iris.csv", ["sepal_length", "sepal_width", "petal_length", "petal_width"]),
        "wine": ("wine_data.csv", [f"f{i}" for i in range(13)]),
        "breast_cancer": ("breast_cancer.csv", [f"f{i}" for i in range(30)]),
    }
    for name, (fname, cols) in specs.items():
        with open(base / fname) as fh:
            lines = list(csv.reader(fh))[1:]  # first line is "n_samples,n_features,names..."
        rows = [r[: len(cols)] + [r[len(cols)]] for r in lines if r]
        write_csv(out / f"{name}.csv", cols + ["class"], rows)


def ionosphere(out, workdir):
    z = pip_wheel("orange3", workdir)
    text = z.read("Orange/tests/datasets/ionosphere.tab").decode()
    lines = [l.split("\t") for l in text.splitlines() if l.strip()]
    header, body = lines[0], lines[3:]
    cols = header[:-1]
    write_csv(out / "ionosphere.csv", cols + ["class"], [r[:-1] + [r[-1]] for r in body])


def credit_approval(out, workdir):
    # keel-ds ships the KEEL copy of crx.data: incomplete rows removed and
    # the decimal point stripped from A2, A3 and A8.
    z = pip_wheel("keel-ds", workdir)
    text = z.read("keel_ds/data/balanced/raw/crx.dat").decode()
    rows = [[c.strip() for c in l.split(",")] for l in text.splitlines() if l.strip() and not l.startswith("@")]
    cols = [f"A{i}" for i in range(1, 16)]
    write_csv(out / "credit_approval.csv", cols + ["class"], rows)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        sklearn_bundled(out)
        ionosphere(out, tmp)
        credit_approval(out, tmp)


if __name__ == "__main__":
    main()
