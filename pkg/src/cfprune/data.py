"""Calibration image loading: raw CIFAR-10 binaries and probe blobs.

CIFAR-10's binary layout is 3073 bytes per record: one label byte, then
1024 red, 1024 green, 1024 blue bytes in row-major 32x32 order.  Pixels
are scaled to [0, 1]; sampling is seeded and deterministic.

Probe blobs ("cfprobes/1") are a JSON header next to a little-endian
float32 file, used to hand pre-sampled calibration tensors between tools.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .errors import DataFormatError

CIFAR_RECORD_BYTES = 3073
PROBES_VERSION = "cfprobes/1"


def read_cifar10_file(path) -> np.ndarray:
    """All images of one CIFAR-10 .bin file as (n, 3, 32, 32) in [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise DataFormatError(
            f"{path}: {len(raw)} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return (pixels.astype(np.float32) / 255.0)


def load_cifar10(directory, count=None, seed=0) -> np.ndarray:
    """Sample images from the CIFAR-10 binaries in a directory.

    Prefers test_batch.bin, falls back to data_batch_*.bin.  With a count,
    draws a seeded uniform sample without replacement.
    """
    directory = Path(directory)
    files = sorted(directory.glob("test_batch.bin")) or sorted(directory.glob("data_batch_*.bin"))
    if not files:
        raise DataFormatError(f"{directory}: no test_batch.bin or data_batch_*.bin files")
    images = np.concatenate([read_cifar10_file(f) for f in files])
    if count is None:
        return images
    if count > images.shape[0]:
        raise DataFormatError(f"requested {count} images, directory holds {images.shape[0]}")
    idx = np.sort(np.random.default_rng(seed).choice(images.shape[0], size=count, replace=False))
    return images[idx]


def save_probes(images, out_dir, header_name="probes.json", blob_name="probes.bin",
                extra_header=None):
    """Write a probe blob: JSON header plus float32 LE data with a CRC."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(images, dtype="<f4")
    blob = arr.tobytes()
    header = {
        "version": PROBES_VERSION,
        "shape": [int(d) for d in arr.shape],
        "data_file": blob_name,
        "crc32": zlib.crc32(blob) & 0xFFFFFFFF,
        "preprocessing": {"scale": "byte/255", "mean": None, "std": None},
    }
    if extra_header:
        header.update(extra_header)
    (out_dir / blob_name).write_bytes(blob)
    (out_dir / header_name).write_text(json.dumps(header, indent=1, sort_keys=True))
    return out_dir / header_name


def load_probes(header_path) -> np.ndarray:
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataFormatError(f"cannot read probe header {header_path}: {e}") from e
    if header.get("version") != PROBES_VERSION:
        raise DataFormatError(f"unsupported probe version {header.get('version')!r}")
    blob = (header_path.parent / header.get("data_file", "probes.bin")).read_bytes()
    if zlib.crc32(blob) & 0xFFFFFFFF != header.get("crc32"):
        raise DataFormatError("probe blob CRC mismatch")
    shape = tuple(int(d) for d in header["shape"])
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise DataFormatError(f"probe blob is {len(blob)} bytes, header shape needs {expected}")
    return np.frombuffer(blob, dtype="<f4").reshape(shape).copy()


def load_calibration(source, count=None, seed=0) -> np.ndarray:
    """Load calibration images from a probes.json file or a CIFAR-10 dir."""
    source = Path(source)
    if source.is_dir():
        return load_cifar10(source, count=count, seed=seed)
    images = load_probes(source)
    if count is not None:
        if count > images.shape[0]:
            raise DataFormatError(f"requested {count} probes, blob holds {images.shape[0]}")
        images = images[:count]
    return images


def synthesize_cifar_like(count, seed=0, size=32) -> np.ndarray:
    """Smooth random images in CIFAR layout, for tests and offline demos.

    Low-frequency mixtures of shifted blobs, quantized through the byte
    domain so values match what a real loader would produce.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    images = np.empty((count, 3, size, size), dtype=np.float32)
    for i in range(count):
        base = np.zeros((size, size))
        for _ in range(4):
            cx, cy = rng.random(2)
            sx, sy = 0.08 + 0.3 * rng.random(2)
            base += rng.random() * np.exp(-((xx - cx) ** 2 / sx**2 + (yy - cy) ** 2 / sy**2))
        base = (base - base.min()) / max(np.ptp(base), 1e-9)
        for ch in range(3):
            mix = 0.6 * base + 0.4 * rng.random() + 0.05 * rng.standard_normal((size, size))
            byte = np.clip(mix * 255.0, 0, 255).astype(np.uint8)
            images[i, ch] = byte.astype(np.float32) / 255.0
    return images


def write_synthetic_cifar_batch(path, count, seed=0):
    """Write a CIFAR-10-format .bin file of synthetic images (round-trips
    bit-exactly through read_cifar10_file)."""
    images = synthesize_cifar_like(count, seed=seed)
    byte_pixels = np.round(images * 255.0).astype(np.uint8)
    rng = np.random.default_rng(seed + 1)
    labels = rng.integers(0, 10, size=count, endpoint=False).astype(np.uint8)
    records = np.empty((count, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = byte_pixels.reshape(count, -1)
    Path(path).write_bytes(records.tobytes())
    return Path(path)
