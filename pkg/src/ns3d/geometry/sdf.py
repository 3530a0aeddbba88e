"""Signed-distance primitives, CSG combinators, and JSON shape specs.

Convention: sdf < 0 inside the shape, > 0 outside. Primitive distances are
exact; CSG min/max combinations are conservative bounds, which is all the
samplers downstream need. All shapes are expected to live inside the unit
cube [-1, 1]^3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError

PRIMITIVE_KINDS = ("sphere", "box", "torus", "cylinder")
CSG_KINDS = ("union", "intersection", "difference")
MAX_CSG_DEPTH = 8


@dataclass
class SdfShape:
    kind: str
    params: dict = field(default_factory=dict)
    children: list["SdfShape"] = field(default_factory=list)
    # rigid transform as a 3x4 row-major matrix [R | t], applied to the child
    transform: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS + CSG_KINDS + ("transform",):
            raise DataError(f"unknown shape kind {self.kind!r}")
        if self.kind in CSG_KINDS and len(self.children) != 2:
            raise DataError(f"{self.kind} requires exactly 2 children")
        if self.kind == "transform":
            if len(self.children) != 1 or self.transform is None:
                raise DataError("transform requires one child and a 3x4 matrix")
            self.transform = np.asarray(self.transform, dtype=np.float64).reshape(3, 4)
        if self.depth() > MAX_CSG_DEPTH:
            raise DataError(f"CSG tree deeper than {MAX_CSG_DEPTH}")

    def depth(self) -> int:
        if not self.children:
            return 1
        return 1 + max(c.depth() for c in self.children)


def sphere(radius: float) -> SdfShape:
    return SdfShape("sphere", {"radius": float(radius)})


def box(half_extents) -> SdfShape:
    return SdfShape("box", {"half_extents": [float(h) for h in half_extents]})


def torus(major: float, minor: float) -> SdfShape:
    return SdfShape("torus", {"major": float(major), "minor": float(minor)})


def cylinder(radius: float, half_height: float) -> SdfShape:
    return SdfShape(
        "cylinder", {"radius": float(radius), "half_height": float(half_height)}
    )


def union(a: SdfShape, b: SdfShape) -> SdfShape:
    return SdfShape("union", children=[a, b])


def intersection(a: SdfShape, b: SdfShape) -> SdfShape:
    return SdfShape("intersection", children=[a, b])


def difference(a: SdfShape, b: SdfShape) -> SdfShape:
    return SdfShape("difference", children=[a, b])


def transformed(child: SdfShape, matrix) -> SdfShape:
    return SdfShape("transform", children=[child], transform=matrix)


def translated(child: SdfShape, offset) -> SdfShape:
    m = np.hstack([np.eye(3), np.asarray(offset, dtype=np.float64).reshape(3, 1)])
    return transformed(child, m)


def sdf_eval(shape: SdfShape, p: np.ndarray) -> np.ndarray:
    """Evaluate the signed distance at points p of shape [..., 3]."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    d = _eval(shape, pts)
    return d[0] if single else d.reshape(p.shape[:-1])


def _eval(shape: SdfShape, p: np.ndarray) -> np.ndarray:
    k = shape.kind
    if k == "sphere":
        return np.linalg.norm(p, axis=-1) - shape.params["radius"]
    if k == "box":
        h = np.asarray(shape.params["half_extents"])
        q = np.abs(p) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside
    if k == "torus":
        ring = np.hypot(p[..., 0], p[..., 1]) - shape.params["major"]
        return np.hypot(ring, p[..., 2]) - shape.params["minor"]
    if k == "cylinder":
        dr = np.hypot(p[..., 0], p[..., 1]) - shape.params["radius"]
        dz = np.abs(p[..., 2]) - shape.params["half_height"]
        q = np.stack([dr, dz], axis=-1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside
    if k == "union":
        return np.minimum(_eval(shape.children[0], p), _eval(shape.children[1], p))
    if k == "intersection":
        return np.maximum(_eval(shape.children[0], p), _eval(shape.children[1], p))
    if k == "difference":
        return np.maximum(_eval(shape.children[0], p), -_eval(shape.children[1], p))
    if k == "transform":
        R, t = shape.transform[:, :3], shape.transform[:, 3]
        local = (p - t) @ R  # inverse of x -> R x + t for orthonormal R
        return _eval(shape.children[0], local)
    raise DataError(f"unknown shape kind {k!r}")


def sdf_gradient(shape: SdfShape, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the SDF, shape [..., 3]."""
    p = np.asarray(p, dtype=np.float64)
    g = np.empty_like(p)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        g[..., axis] = (sdf_eval(shape, p + step) - sdf_eval(shape, p - step)) / (2 * h)
    return g


def to_dict(shape: SdfShape) -> dict:
    d: dict = {"kind": shape.kind}
    if shape.params:
        d["params"] = shape.params
    if shape.children:
        d["children"] = [to_dict(c) for c in shape.children]
    if shape.transform is not None:
        d["transform"] = [round(float(x), 12) for x in shape.transform.reshape(-1)]
    return d


def from_dict(d: dict) -> SdfShape:
    try:
        return SdfShape(
            kind=d["kind"],
            params=d.get("params", {}),
            children=[from_dict(c) for c in d.get("children", [])],
            transform=np.array(d["transform"]).reshape(3, 4)
            if "transform" in d
            else None,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed shape spec: {e}") from e


def save_shape(path, shape: SdfShape) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_dict(shape), f, indent=2, sort_keys=True)
        f.write("\n")


def load_shape(path) -> SdfShape:
    with open(path, encoding="utf-8") as f:
        return from_dict(json.load(f))
