#!/usr/bin/env python3
"""Convert the UCI Adult `adult.data` file into the numeric CSV the simulator loads.

Rows containing `?` are dropped (30162 remain). Categorical attributes are
one-hot encoded in place, keeping the original attribute order, with
categories sorted alphabetically. The label column is `income`.

usage: prepare_adult.py <adult.data | wheel containing it> <out.csv>
"""
import csv
import io
import sys
import zipfile

COLUMNS = [
    ("age", False),
    ("workclass", True),
    ("fnlwgt", False),
    ("education", True),
    ("education-num", False),
    ("marital-status", True),
    ("occupation", True),
    ("relationship", True),
    ("race", True),
    ("sex", True),
    ("capital-gain", False),
    ("capital-loss", False),
    ("hours-per-week", False),
    ("native-country", True),
]


def read_raw(path):
    if path.endswith(".whl") or path.endswith(".zip"):
        with zipfile.ZipFile(path) as z:
            name = next(n for n in z.namelist() if n.endswith("adult/adult.data"))
            return z.read(name).decode("utf-8")
    with open(path, encoding="utf-8") as f:
        return f.read()


def main():
    src, dst = sys.argv[1], sys.argv[2]
    rows = []
    for rec in csv.reader(io.StringIO(read_raw(src))):
        if not rec:
            continue
        rec = [c.strip() for c in rec]
        if "?" in rec or len(rec) != len(COLUMNS) + 1:
            continue
        rows.append(rec)

    categories = {}
    for i, (name, categorical) in enumerate(COLUMNS):
        if categorical:
            categories[name] = sorted({r[i] for r in rows})

    header = []
    for name, categorical in COLUMNS:
        if categorical:
            header.extend(f"{name}={c}" for c in categories[name])
        else:
            header.append(name)
    header.append("income")

    with open(dst, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            out = []
            for i, (name, categorical) in enumerate(COLUMNS):
                if categorical:
                    out.extend("1" if r[i] == c else "0" for c in categories[name])
                else:
                    out.append(r[i])
            out.append(r[-1].rstrip("."))
            w.writerow(out)
    print(f"{len(rows)} rows, {len(header) - 1} features -> {dst}")


if __name__ == "__main__":
    main()
