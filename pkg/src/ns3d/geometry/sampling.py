"""Surface and query-point sampling from SDF shapes, plus occupancy lattices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from .sdf import SdfShape, sdf_eval, sdf_gradient

SURFACE_TOL = 1e-3


@dataclass
class PointCloud:
    positions: np.ndarray  # [N, 3] in [-1, 1]
    normals: np.ndarray  # [N, 3] unit vectors

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape != self.normals.shape:
            raise DataError("positions/normals shape mismatch")

    def __len__(self) -> int:
        return len(self.positions)

    def features(self) -> np.ndarray:
        """[N, 6] position + normal features."""
        return np.concatenate([self.positions, self.normals], axis=-1)


@dataclass
class QueryBatch:
    points: np.ndarray  # [M, 3]
    occupancy_labels: np.ndarray  # [M] in {0, 1}

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.occupancy_labels = np.asarray(self.occupancy_labels, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.occupancy_labels):
            raise DataError("points/labels length mismatch")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class OccupancyGrid:
    resolution: int
    values: np.ndarray  # [R, R, R] in [0, 1], cell centers over [-1, 1]^3

    def __post_init__(self):
        R = self.resolution
        self.values = np.clip(
            np.asarray(self.values, dtype=np.float64).reshape(R, R, R), 0.0, 1.0
        )

    @property
    def cell_size(self) -> float:
        return 2.0 / self.resolution


def grid_centers(resolution: int) -> np.ndarray:
    """Cell-center coordinates of an R^3 lattice over [-1, 1]^3, shape [R, R, R, 3]."""
    axis = -1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([x, y, z], axis=-1)


def occupancy_grid(field, resolution: int) -> OccupancyGrid:
    """Evaluate a point -> [0, 1] field at the lattice cell centers."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    pts = grid_centers(resolution).reshape(-1, 3)
    vals = np.asarray(field(pts), dtype=np.float64).reshape(
        resolution, resolution, resolution
    )
    return OccupancyGrid(resolution, vals)


def shape_occupancy_grid(shape: SdfShape, resolution: int) -> OccupancyGrid:
    return occupancy_grid(lambda p: (sdf_eval(shape, p) < 0).astype(np.float64), resolution)


def _check_nonempty(shape: SdfShape, rng: np.random.Generator) -> None:
    probe = rng.uniform(-1.0, 1.0, size=(4096, 3))
    if not (sdf_eval(shape, probe) < 0).any():
        raise DataError("empty shape: no interior found in the unit cube")


def _project_to_surface(
    shape: SdfShape, pts: np.ndarray, iters: int = 25
) -> np.ndarray:
    """Newton-style projection p <- p - sdf(p) * grad / |grad|^2."""
    p = pts.copy()
    for _ in range(iters):
        d = sdf_eval(shape, p)
        g = sdf_gradient(shape, p)
        norm2 = np.maximum((g * g).sum(axis=-1), 1e-12)
        p = p - (d / norm2)[:, None] * g
        p = np.clip(p, -1.0, 1.0)
    return p


def sample_surface(shape: SdfShape, n: int, rng: np.random.Generator | None = None) -> PointCloud:
    """Approximately uniform surface samples with SDF-gradient normals."""
    if n == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    rng = rng or np.random.default_rng(0)
    _check_nonempty(shape, rng)
    kept_p: list[np.ndarray] = []
    total = 0
    while total < n:
        cand = rng.uniform(-1.0, 1.0, size=(max(2 * (n - total), 1024), 3))
        proj = _project_to_surface(shape, cand)
        ok = np.abs(sdf_eval(shape, proj)) <= SURFACE_TOL
        good = proj[ok]
        kept_p.append(good)
        total += len(good)
    pos = np.concatenate(kept_p)[:n]
    g = sdf_gradient(shape, pos)
    normals = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    return PointCloud(pos, normals)


def sample_queries(
    shape: SdfShape,
    n_uniform: int,
    n_near: int,
    sigma: float = 0.02,
    rng: np.random.Generator | None = None,
) -> QueryBatch:
    """Uniform-in-cube points plus Gaussian-jittered near-surface points, labelled by SDF sign."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = rng or np.random.default_rng(0)
    uniform = rng.uniform(-1.0, 1.0, size=(n_uniform, 3))
    if n_near > 0:
        surf = sample_surface(shape, n_near, rng).positions
        near = np.clip(surf + rng.normal(0.0, sigma, size=surf.shape), -1.0, 1.0)
        pts = np.concatenate([uniform, near])
    else:
        pts = uniform
    labels = (sdf_eval(shape, pts) < 0).astype(np.float64)
    return QueryBatch(pts, labels)
