import os
from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parents[1]


def dataset_dir() -> Path:
    env = os.environ.get("BNNKIT_DATA")
    return Path(env) if env else REPO_ROOT / "data"


def require_dataset(name: str) -> Path:
    """Benchmark CSVs are not bundled; skip loudly when absent.

    scripts/fetch_uci.py downloads and converts them on a machine with
    network access (see README).
    """
    path = dataset_dir() / f"{name}.csv"
    if not path.is_file():
        pytest.skip(
            f"benchmark dataset {name}.csv not found under {dataset_dir()} "
            "(run scripts/fetch_uci.py on a machine with network access); "
            "this environment has no route to the dataset archive"
        )
    return path

