"""Calibration probe export: deterministic CIFAR-10 samples as cfprobes/1.

Sampling matches the primary toolkit's native loader (sorted seeded
choice without replacement over the concatenated binaries), so the same
seed yields identical tensors on both sides.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .export import ExportError

PROBES_VERSION = "cfprobes/1"
RECORD_BYTES = 3073


def read_cifar_dir(directory) -> np.ndarray:
    directory = Path(directory)
    files = sorted(directory.glob("test_batch.bin")) or sorted(directory.glob("data_batch_*.bin"))
    if not files:
        raise ExportError(f"{directory}: no CIFAR-10 binary files")
    parts = []
    for f in files:
        raw = f.read_bytes()
        if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
            raise ExportError(f"{f}: not a multiple of the {RECORD_BYTES}-byte record")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
        parts.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return np.concatenate(parts)


def export_probes(dataset_dir, count: int, seed: int, out_dir):
    """Write probes.json + probes.bin for a seeded CIFAR-10 sample."""
    if count < 1:
        raise ExportError(f"probe count must be >= 1, got {count}")
    images = read_cifar_dir(dataset_dir)
    if count > images.shape[0]:
        raise ExportError(f"requested {count} probes, dataset holds {images.shape[0]}")
    indices = np.sort(np.random.default_rng(seed).choice(
        images.shape[0], size=count, replace=False))
    sample = np.ascontiguousarray(images[indices], dtype="<f4")
    blob = sample.tobytes()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "version": PROBES_VERSION,
        "shape": [int(d) for d in sample.shape],
        "data_file": "probes.bin",
        "crc32": zlib.crc32(blob) & 0xFFFFFFFF,
        "preprocessing": {"scale": "byte/255", "mean": None, "std": None},
        "source": "cifar10",
        "seed": int(seed),
        "indices": [int(i) for i in indices],
    }
    (out / "probes.bin").write_bytes(blob)
    (out / "probes.json").write_text(json.dumps(header, indent=1, sort_keys=True))
    return out / "probes.json"
