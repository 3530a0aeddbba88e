"""Shape evaluation metrics: IoU, Chamfer distance, F-score, occupancy accuracy."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..errors import DataError
from .sampling import OccupancyGrid, QueryBatch

BRUTE_FORCE_LIMIT = 10_000


def iou(a: OccupancyGrid, b: OccupancyGrid, threshold: float = 0.5) -> float:
    """Intersection over union of thresholded grids; 1.0 when both are empty."""
    if a.resolution != b.resolution:
        raise DataError("IoU requires equal grid resolutions")
    occ_a = a.values > threshold
    occ_b = b.values > threshold
    union = np.logical_or(occ_a, occ_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(occ_a, occ_b).sum() / union)


def _nn_sq_dists(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared distance from each src point to its nearest dst point."""
    if max(len(src), len(dst)) <= BRUTE_FORCE_LIMIT:
        out = np.empty(len(src))
        chunk = max(1, 10_000_000 // max(len(dst), 1))
        for i in range(0, len(src), chunk):
            block = src[i : i + chunk]
            d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(-1)
            out[i : i + chunk] = d2.min(axis=1)
        return out
    d, _ = cKDTree(dst).query(src, k=1)
    return d**2


def chamfer(pa: np.ndarray, pb: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance between point sets."""
    pa = np.asarray(pa, dtype=np.float64).reshape(-1, 3)
    pb = np.asarray(pb, dtype=np.float64).reshape(-1, 3)
    if len(pa) == 0 or len(pb) == 0:
        raise DataError("chamfer requires nonempty point sets")
    return float(_nn_sq_dists(pa, pb).mean() + _nn_sq_dists(pb, pa).mean())


def fscore(pa: np.ndarray, pb: np.ndarray, tau: float = 0.01) -> float:
    """Harmonic mean of precision and recall at distance threshold tau."""
    pa = np.asarray(pa, dtype=np.float64).reshape(-1, 3)
    pb = np.asarray(pb, dtype=np.float64).reshape(-1, 3)
    if len(pa) == 0 or len(pb) == 0:
        raise DataError("fscore requires nonempty point sets")
    precision = float((np.sqrt(_nn_sq_dists(pa, pb)) <= tau).mean())
    recall = float((np.sqrt(_nn_sq_dists(pb, pa)) <= tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def occupancy_accuracy(pred, batch: QueryBatch) -> float:
    """Percentage of query points where (pred >= 0.5) matches the 0/1 label."""
    if len(batch) == 0:
        raise DataError("occupancy_accuracy requires a nonempty batch")
    values = np.asarray(pred(batch.points), dtype=np.float64).reshape(-1)
    hits = (values >= 0.5) == (batch.occupancy_labels >= 0.5)
    return float(hits.mean() * 100.0)
