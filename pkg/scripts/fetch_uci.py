#!/usr/bin/env python3
"""Download the UCI benchmark tables and convert them to the canonical CSV
layout (feature columns x1..xp plus a `target` column) under data/.

Needs network access to archive.ics.uci.edu. The energy and concrete tables
are distributed as Excel files, so those two additionally need pandas with
an Excel engine (openpyxl / xlrd) installed.

Usage: python scripts/fetch_uci.py [--dest data/] [names...]
"""

import argparse
import csv
import io
import sys
import urllib.request
from pathlib import Path

BASE = "https://archive.ics.uci.edu/ml/machine-learning-databases"

SOURCES = {
    "yacht": {
        "url": f"{BASE}/00243/yacht_hydrodynamics.data",
        "kind": "whitespace",
        "expected": (308, 6),
    },
    "airfoil": {
        "url": f"{BASE}/00291/airfoil_self_noise.dat",
        "kind": "whitespace",
        "expected": (1503, 5),
    },
    "energy": {
        "url": f"{BASE}/00242/ENB2012_data.xlsx",
        "kind": "excel",
        # two target columns; heating load (Y1) is used as the target
        "usecols": list(range(9)),
        "expected": (768, 8),
    },
    "concrete": {
        "url": f"{BASE}/concrete/compressive/Concrete_Data.xls",
        "kind": "excel",
        "usecols": None,
        "expected": (1030, 8),
    },
}


def fetch(url: str) -> bytes:
    print(f"  fetching {url}")
    with urllib.request.urlopen(url, timeout=60) as response:
        return response.read()


def parse_whitespace(raw: bytes):
    rows = []
    for line in raw.decode("utf-8").splitlines():
        parts = line.split()
        if parts:
            rows.append([float(v) for v in parts])
    return rows


def parse_excel(raw: bytes, usecols):
    import pandas as pd

    frame = pd.read_excel(io.BytesIO(raw))
    frame = frame.dropna(how="all").dropna(axis=1, how="all")
    if usecols is not None:
        frame = frame.iloc[:, usecols]
    return frame.values.tolist()


def write_canonical(rows, dest: Path, expected):
    n_rows, n_features = expected
    if len(rows) != n_rows or len(rows[0]) != n_features + 1:
        raise SystemExit(
            f"unexpected shape {len(rows)}x{len(rows[0])}, wanted "
            f"{n_rows}x{n_features + 1}; the upstream file may have changed"
        )
    header = [f"x{i + 1}" for i in range(n_features)] + ["target"]
    with open(dest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format(float(v), ".17g") for v in row])
    print(f"  wrote {dest} ({n_rows} rows, {n_features} features)")


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("names", nargs="*", default=None,
                        help=f"subset of {sorted(SOURCES)}; default: all")
    parser.add_argument("--dest", default="data")
    args = parser.parse_args()
    names = args.names or sorted(SOURCES)
    dest_dir = Path(args.dest)
    dest_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    for name in names:
        if name not in SOURCES:
            print(f"unknown dataset {name!r}", file=sys.stderr)
            failures.append(name)
            continue
        src = SOURCES[name]
        print(f"{name}:")
        try:
            raw = fetch(src["url"])
            if src["kind"] == "whitespace":
                rows = parse_whitespace(raw)
            else:
                rows = parse_excel(raw, src.get("usecols"))
            write_canonical(rows, dest_dir / f"{name}.csv", src["expected"])
        except Exception as err:  # best-effort downloader, report and move on
            print(f"  FAILED: {err}", file=sys.stderr)
            failures.append(name)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
