#!/usr/bin/env python3
"""Recompute aggregate.csv from <runs>/<design>/seed-<n>/curve.csv and compare exactly.

usage: check_aggregate.py RUNS_DIR [AGGREGATE_CSV]
"""
import csv
import math
import sys
from collections import defaultdict
from pathlib import Path

COLUMNS = ["train_mse", "test_mse", "bellman_loss"]


def quantile(xs, p):
    h = (len(xs) - 1) * p
    lo = math.floor(h)
    t = h - lo
    if lo + 1 < len(xs) and t > 0.0:
        return xs[lo] + (xs[lo + 1] - xs[lo]) * t
    return xs[lo]


def summarize(values):
    if any(math.isnan(v) for v in values):
        return [math.nan] * 4
    xs = sorted(values)
    total = 0.0
    for x in xs:
        total += x
    return [quantile(xs, 0.5), quantile(xs, 0.25), quantile(xs, 0.75), total / len(xs)]


def same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


def main():
    runs = Path(sys.argv[1])
    agg_path = Path(sys.argv[2]) if len(sys.argv) > 2 else runs / "aggregate.csv"
    groups = defaultdict(list)
    for curve in sorted(runs.glob("*/seed-*/curve.csv")):
        design = curve.parent.parent.name
        with open(curve) as f:
            for row in csv.DictReader(f):
                groups[(design, int(row["step"]))].append([float(row[c]) for c in COLUMNS])
    if not groups:
        sys.exit("no runs found")

    with open(agg_path) as f:
        emitted = list(csv.DictReader(f))
    if len(emitted) != len(groups):
        sys.exit(f"row count {len(emitted)} != {len(groups)}")
    bad = 0
    for row in emitted:
        key = (row["design"], int(row["step"]))
        vals = groups.get(key)
        if vals is None:
            sys.exit(f"unexpected row {key}")
        if int(row["seeds"]) != len(vals):
            bad += 1
        for i, c in enumerate(COLUMNS):
            want = summarize([v[i] for v in vals])
            for stat, w in zip(["median", "q1", "q3", "mean"], want):
                got = float(row[f"{c}_{stat}"])
                if not same(got, w):
                    print(f"{key} {c}_{stat}: emitted {got!r}, recomputed {w!r}")
                    bad += 1
    if bad:
        sys.exit(f"{bad} mismatches")
    print(f"ok: {len(emitted)} rows match")


if __name__ == "__main__":
    main()
