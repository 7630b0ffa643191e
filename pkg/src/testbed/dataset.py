"""
Synthetic image datasets: deterministic pseudo-random byte files plus a manifest.
"""

from __future__ import annotations

import hashlib
import logging
import random
from pathlib import Path
from typing import Dict

import pandas as pd

from src.errors import ConfigError, IoFailure

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["file", "size", "sha256"]


def image_name(index: int) -> str:
    return f"img_{index:03d}.bin"


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit sub-seed for one node's dataset."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()[:8], "big")


def generate_dataset(seed: int, image_count: int, image_size: int, out_dir: Path) -> Path:
    """
    Write `image_count` files of `image_size` random bytes named img_001.bin, ...

    The same seed always yields byte-identical files. Returns the manifest path.
    """
    if image_count < 1 or image_size < 1:
        raise ConfigError("image_count and image_size must be >= 1")
    out_dir = Path(out_dir)
    rng = random.Random(seed)
    rows = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for index in range(1, image_count + 1):
            data = rng.randbytes(image_size)
            name = image_name(index)
            (out_dir / name).write_bytes(data)
            rows.append({"file": name, "size": image_size, "sha256": hashlib.sha256(data).hexdigest()})
        manifest = out_dir / MANIFEST_NAME
        pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(manifest, index=False, lineterminator="\n")
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {out_dir}: {exc}") from exc
    logger.info("generated %d x %d bytes in %s", image_count, image_size, out_dir)
    return manifest


def read_manifest(directory: Path) -> pd.DataFrame:
    path = Path(directory) / MANIFEST_NAME
    try:
        return pd.read_csv(path, dtype={"file": str, "size": int, "sha256": str})
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def dataset_files(directory: Path) -> Dict[str, Path]:
    """Files of a dataset in manifest order, or every regular file sorted by name."""
    directory = Path(directory)
    if (directory / MANIFEST_NAME).is_file():
        return {name: directory / name for name in read_manifest(directory)["file"]}
    return {
        p.name: p for p in sorted(directory.iterdir()) if p.is_file() and p.name != MANIFEST_NAME
    }
