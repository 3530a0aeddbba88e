"""Triangle meshes: iso-surface extraction, OBJ I/O, and topology checks."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from skimage import measure

from ..errors import DataError
from .sampling import OccupancyGrid


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # [V, 3]
    faces: np.ndarray  # [F, 3] vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise DataError("face index out of range")

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def signed_volume(self) -> float:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def empty_mesh() -> TriangleMesh:
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def marching_cubes(grid: OccupancyGrid, iso: float = 0.5) -> TriangleMesh:
    """Extract the iso-surface with consistent outward winding.

    Returns an empty mesh when the grid never crosses the iso level.
    """
    vals = grid.values
    if not np.isfinite(vals).all():
        raise DataError("marching_cubes: grid contains non-finite values")
    if vals.min() >= iso or vals.max() <= iso:
        return empty_mesh()
    cell = grid.cell_size
    verts, faces, _, _ = measure.marching_cubes(
        vals, level=iso, spacing=(cell, cell, cell)
    )
    verts = verts + (-1.0 + 0.5 * cell)  # index space -> cell-center coordinates
    mesh = _drop_degenerate(TriangleMesh(verts, faces))
    if mesh.signed_volume() < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


def _drop_degenerate(mesh: TriangleMesh, min_area: float = 1e-14) -> TriangleMesh:
    keep = mesh.face_areas() > min_area
    return TriangleMesh(mesh.vertices, mesh.faces[keep])


def edge_face_counts(mesh: TriangleMesh) -> Counter:
    counts: Counter = Counter()
    for tri in mesh.faces:
        for i in range(3):
            a, b = int(tri[i]), int(tri[(i + 1) % 3])
            counts[(min(a, b), max(a, b))] += 1
    return counts


def is_closed_manifold(mesh: TriangleMesh) -> bool:
    """Every undirected edge shared by exactly two faces."""
    if mesh.is_empty:
        return False
    return all(c == 2 for c in edge_face_counts(mesh).values())


def euler_characteristic(mesh: TriangleMesh) -> int:
    used = np.unique(mesh.faces)
    V = len(used)
    E = len(edge_face_counts(mesh))
    F = len(mesh.faces)
    return V - E + F


def sample_mesh_surface(
    mesh: TriangleMesh, n: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface, shape [n, 3]."""
    if mesh.is_empty:
        raise DataError("cannot sample an empty mesh")
    rng = rng or np.random.default_rng(0)
    areas = mesh.face_areas()
    probs = areas / areas.sum()
    idx = rng.choice(len(mesh.faces), size=n, p=probs)
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[idx]]
    return (
        tri[:, 0]
        + u[:, None] * (tri[:, 1] - tri[:, 0])
        + v[:, None] * (tri[:, 2] - tri[:, 0])
    )


def save_obj(path, mesh: TriangleMesh) -> None:
    """ASCII Wavefront OBJ with 1-based face indices and LF line endings."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    if not verts:
        return empty_mesh()
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))
