"""On-disk formats for runs: chain dumps, member checkpoints, tables, JSON.

All floats render with 17 significant digits so dumps round-trip exactly and
repeated runs compare byte-for-byte. Wall-clock durations live only in the
per-chain metadata JSON, never in dumps or reports.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import CsvFormatError
from .sampling import Chain


def fmt(value: float) -> str:
    return format(float(value), ".17g")


def fmt_short(value: float) -> str:
    """Shortest round-trip rendering, for labels like coverage levels."""
    return repr(float(value))


def write_table_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def read_table_csv(path):
    """Generic reader for every CSV this package emits: (header, string rows)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        return header, [row for row in reader if row]


def chain_csv_path(chains_dir, chain_id: int) -> Path:
    return Path(chains_dir) / f"chain_{chain_id:03d}.csv"


def chain_meta_path(chains_dir, chain_id: int) -> Path:
    return Path(chains_dir) / f"chain_{chain_id:03d}.meta.json"


def write_chain(chains_dir, chain: Chain, d: int) -> None:
    header = ["chain", "sample_index"] + [f"theta_{i}" for i in range(d)]
    rows = []
    for s, theta in enumerate(chain.samples):
        rows.append([chain.chain_id, s] + [fmt(v) for v in theta])
    with open(chain_csv_path(chains_dir, chain.chain_id), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    meta = {
        "chain_id": chain.chain_id,
        "seed": {"master_seed": chain.seed[0], "stream_id": chain.seed[1]},
        "init": chain.init_kind,
        "n_samples": int(chain.n_samples),
        "n_warmup": int(chain.n_warmup),
        "accept_mean": None if np.isnan(chain.accept_mean) else chain.accept_mean,
        "divergences": int(chain.divergences),
        "warmup_divergences": int(chain.warmup_divergences),
        "step_size": None if np.isnan(chain.step_size) else chain.step_size,
        "stop_index": chain.stop_index,
        "failed": chain.failed,
        "error": chain.error,
        "duration_seconds": chain.duration,
    }
    with open(chain_meta_path(chains_dir, chain.chain_id), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_chain(chains_dir, chain_id: int):
    """Returns (samples array, metadata dict); samples may be empty for failed chains."""
    meta_path = chain_meta_path(chains_dir, chain_id)
    with open(meta_path) as fh:
        meta = json.load(fh)
    header, rows = read_table_csv(chain_csv_path(chains_dir, chain_id))
    if header[:2] != ["chain", "sample_index"]:
        raise CsvFormatError(f"{chains_dir}: unexpected chain dump header {header[:2]}")
    d = len(header) - 2
    samples = np.empty((len(rows), d))
    for i, row in enumerate(rows):
        samples[i] = [float(v) for v in row[2:]]
    return samples, meta


def list_chain_ids(chains_dir) -> list[int]:
    ids = []
    for path in sorted(Path(chains_dir).glob("chain_*.meta.json")):
        ids.append(int(path.name.split("_")[1].split(".")[0]))
    return ids


def member_csv_path(ensemble_dir, member: int) -> Path:
    return Path(ensemble_dir) / f"member_{member:03d}.csv"


def write_member(ensemble_dir, member: int, values: np.ndarray) -> None:
    header = ["member"] + [f"theta_{i}" for i in range(values.size)]
    with open(member_csv_path(ensemble_dir, member), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow([member] + [fmt(v) for v in values])


def read_member(ensemble_dir, member: int) -> np.ndarray:
    header, rows = read_table_csv(member_csv_path(ensemble_dir, member))
    if not rows:
        raise CsvFormatError(f"member checkpoint {member} has no data row")
    return np.array([float(v) for v in rows[0][1:]])


def list_member_ids(ensemble_dir) -> list[int]:
    ids = []
    for path in sorted(Path(ensemble_dir).glob("member_*.csv")):
        ids.append(int(path.stem.split("_")[1]))
    return ids


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
