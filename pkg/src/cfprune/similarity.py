"""Averaged Pearson similarity between feature maps of a tapped layer.

Each calibration image yields one n-by-n coefficient matrix (Pearson over
the flattened per-channel maps); the layer's SimilarityMatrix is the mean
over images.  Channels with zero variance on an image contribute 0 to that
image's coefficients; channels constant on every image are flagged dead.

Activations stream through in chunks; only O(n^2) running sums are kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .model import ModelGraph, _evaluate
from .tensor_ops import flatten_one

SIGMA_EPS = 1e-8


def pearson_detailed(x, y) -> tuple[float, bool]:
    """Pearson coefficient plus a degenerate flag.

    Two-pass population formula in float64, clamped to [-1, 1].  If either
    side has standard deviation below 1e-8 the pair is degenerate and the
    coefficient is reported as 0.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError("pearson arguments must have equal length", expected=x.shape, actual=y.shape)
    if x.size < 2:
        raise ShapeError(f"pearson needs at least 2 samples, got {x.size}")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = np.mean(dx * dx)
    vy = np.mean(dy * dy)
    if np.sqrt(vx) < SIGMA_EPS or np.sqrt(vy) < SIGMA_EPS:
        return 0.0, True
    # dividing by sqrt(vx*vy) rather than sqrt(vx)*sqrt(vy) makes the
    # coefficient of a map with itself exactly 1.0
    rho = float(np.mean(dx * dy) / np.sqrt(vx * vy))
    return min(1.0, max(-1.0, rho)), False


def pearson(x, y) -> float:
    return pearson_detailed(x, y)[0]


def feature_similarity(a, b) -> float:
    """Pearson between two feature maps of equal shape."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError("feature maps must share a shape", expected=a.shape, actual=b.shape)
    return pearson(flatten_one(a), flatten_one(b))


@dataclass
class SimilarityMatrix:
    layer_id: str
    matrix: np.ndarray  # (n, n) float64, symmetric, diag 1 except dead rows
    sample_count: int
    dead_channels: frozenset[int] = frozenset()
    # mean tap activation per channel over all calibration pixels; used for
    # constant-folding dead channels at prune time
    channel_means: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "layer": self.layer_id,
            "n": int(self.n),
            "sample_count": int(self.sample_count),
            "matrix": [[float(v) for v in row] for row in self.matrix],
            "dead_channels": sorted(int(c) for c in self.dead_channels),
        }


def _per_image_matrix(maps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(coefficients, degenerate mask) for one image's (n, h, w) maps.

    The covariance matrix is normalized by sqrt(var_x * var_y), which keeps
    coefficients of identical maps at exactly 1.0.
    """
    n = maps.shape[0]
    flat = maps.reshape(n, -1).astype(np.float64)
    centered = flat - flat.mean(axis=1, keepdims=True)
    cov = (centered @ centered.T) / flat.shape[1]
    var = np.diag(cov).copy()
    degenerate = np.sqrt(np.maximum(var, 0.0)) < SIGMA_EPS
    safe = np.where(degenerate, 1.0, var)
    corr = cov / np.sqrt(np.outer(safe, safe))
    np.clip(corr, -1.0, 1.0, out=corr)
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    live = ~degenerate
    corr[np.diag_indices(n)] = np.where(live, 1.0, 0.0)
    return corr, degenerate


class RunningSimilarity:
    """Streaming accumulator for one tap: add images, read the mean matrix."""

    def __init__(self, layer_id: str, n: int):
        self.layer_id = layer_id
        self.n = n
        self.total = np.zeros((n, n), dtype=np.float64)
        self.mean_sum = np.zeros(n, dtype=np.float64)
        self.alive = np.zeros(n, dtype=bool)
        self.count = 0

    def add_image(self, maps: np.ndarray):
        if maps.shape[0] != self.n:
            raise ShapeError("tap channel count changed mid-stream", expected=self.n, actual=maps.shape[0])
        corr, degenerate = _per_image_matrix(maps)
        self.total += corr
        self.alive |= ~degenerate
        self.mean_sum += maps.reshape(self.n, -1).mean(axis=1, dtype=np.float64)
        self.count += 1

    def snapshot(self) -> SimilarityMatrix:
        if self.count == 0:
            raise ShapeError("no calibration images accumulated")
        matrix = self.total / self.count
        dead = frozenset(int(i) for i in np.nonzero(~self.alive)[0])
        # enforce the exact structural invariants against float drift
        matrix = (matrix + matrix.T) / 2.0
        for i in range(self.n):
            matrix[i, i] = 0.0 if i in dead else 1.0
        if dead:
            idx = sorted(dead)
            matrix[idx, :] = 0.0
            matrix[:, idx] = 0.0
            for i in idx:
                matrix[i, i] = 0.0
        return SimilarityMatrix(
            layer_id=self.layer_id,
            matrix=matrix,
            sample_count=self.count,
            dead_channels=dead,
            channel_means=self.mean_sum / self.count,
        )


def _iter_images(calibration):
    """Yield single images (c, h, w) from an array or an iterable of batches."""
    if isinstance(calibration, np.ndarray):
        if calibration.ndim != 4:
            raise ShapeError("calibration array must be (n, c, h, w)", actual=calibration.shape)
        for img in calibration:
            yield img
        return
    for batch in calibration:
        batch = np.asarray(batch)
        if batch.ndim == 3:
            yield batch
        elif batch.ndim == 4:
            yield from batch
        else:
            raise ShapeError("calibration batches must be 3-D or 4-D", actual=batch.shape)


def average_similarity(model: ModelGraph, calibration, tap_id: str,
                       chunk_size: int = 16) -> SimilarityMatrix:
    """Mean per-image Pearson matrix at one tap over a calibration stream."""
    return average_similarity_multi(model, calibration, [tap_id], chunk_size)[tap_id]


def average_similarity_multi(model: ModelGraph, calibration, tap_ids,
                             chunk_size: int = 16) -> dict[str, SimilarityMatrix]:
    """Similarity matrices for several taps from a single streaming pass."""
    tap_ids = list(tap_ids)
    for t in tap_ids:
        if not model.has_node(t):
            raise ShapeError(f"unknown tap node {t!r}")
    shapes = model.infer_shapes()
    acc = {t: RunningSimilarity(t, shapes[t][0]) for t in tap_ids}
    chunk = []
    seen = 0
    for img in _iter_images(calibration):
        chunk.append(np.asarray(img, dtype=np.float32))
        seen += 1
        if len(chunk) == chunk_size:
            _accumulate_chunk(model, np.stack(chunk), tap_ids, acc)
            chunk = []
    if chunk:
        _accumulate_chunk(model, np.stack(chunk), tap_ids, acc)
    if seen < 2:
        raise ShapeError(f"need at least 2 calibration images, got {seen}")
    return {t: acc[t].snapshot() for t in tap_ids}


def _accumulate_chunk(model, batch, tap_ids, acc):
    if batch.shape[1:] != model.input_shape:
        raise ShapeError("calibration image shape does not match model input",
                         expected=model.input_shape, actual=batch.shape[1:])
    acts = _evaluate(model, batch, needed=set(tap_ids))
    for t in tap_ids:
        for img_maps in acts[t]:
            acc[t].add_image(img_maps)


@dataclass
class StabilityReport:
    """Similarity-vs-sample-count table for one tap.

    `values` is (num_counts, n, n); deviations[k] is the max over pairs of
    |S_k - S_max| against the largest-sample estimate.
    """

    layer_id: str
    sample_counts: list[int]
    values: np.ndarray
    deviations: list[float] = field(default_factory=list)

    def pair_deviations(self) -> np.ndarray:
        """|S_k - S_max| per upper-triangle pair, shape (num_counts, pairs)."""
        n = self.values.shape[1]
        iu = np.triu_indices(n, k=1)
        ref = self.values[-1][iu]
        return np.stack([np.abs(v[iu] - ref) for v in self.values])

    def to_json_dict(self) -> dict:
        return {
            "layer": self.layer_id,
            "sample_counts": [int(c) for c in self.sample_counts],
            "max_abs_deviation": [float(d) for d in self.deviations],
        }


def stability_report(model: ModelGraph, calibration, tap_id: str, sample_counts,
                     chunk_size: int = 16) -> StabilityReport:
    """Estimate the tap's similarity matrix at several prefix sample counts.

    Counts are checkpoints into a single calibration stream, so the k-image
    estimate is the running mean after k images (the largest count is the
    reference the deviations are measured against).
    """
    counts = sorted(int(c) for c in sample_counts)
    if not counts:
        raise ShapeError("sample_counts must be non-empty")
    if counts[0] < 2:
        raise ShapeError("smallest sample count must be >= 2")
    shapes = model.infer_shapes()
    acc = RunningSimilarity(tap_id, shapes[tap_id][0])
    snapshots = {}
    targets = set(counts)
    chunk = []

    def flush():
        nonlocal chunk
        if not chunk:
            return
        acts = _evaluate(model, np.stack(chunk), needed={tap_id})
        for img_maps in acts[tap_id]:
            acc.add_image(img_maps)
            if acc.count in targets:
                snapshots[acc.count] = acc.snapshot().matrix
        chunk = []

    for img in _iter_images(calibration):
        if acc.count + len(chunk) >= counts[-1]:
            break
        chunk.append(np.asarray(img, dtype=np.float32))
        if len(chunk) == chunk_size:
            flush()
    flush()
    if counts[-1] not in snapshots:
        raise ShapeError(
            f"calibration stream provided {acc.count} images, largest requested count is {counts[-1]}")
    values = np.stack([snapshots[c] for c in counts])
    ref = values[-1]
    deviations = [float(np.max(np.abs(v - ref))) for v in values]
    return StabilityReport(tap_id, counts, values, deviations)
