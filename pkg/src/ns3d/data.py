"""Procedural shape dataset: random parametric CSG shapes with class labels.

Each shape gets a JSON spec plus cached surface points and labelled query
points, generated from a per-shape counter-based RNG stream so results are
independent of generation order.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import (
    SdfShape,
    box,
    cylinder,
    difference,
    from_dict,
    sample_queries,
    sample_surface,
    sphere,
    to_dict,
    torus,
    translated,
    union,
)

CLASS_NAMES = ("sphere", "box", "torus", "cylinder", "union", "difference")
COND_PARAM_DIM = 8


def shape_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for one shape."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(ss))


def random_shape(class_id: int, rng: np.random.Generator) -> tuple[SdfShape, np.ndarray]:
    """A random shape of the given class and its condition parameter vector."""
    if not 0 <= class_id < len(CLASS_NAMES):
        raise DataError(f"unknown class id {class_id}")
    params = np.zeros(COND_PARAM_DIM)
    offset = rng.uniform(-0.12, 0.12, size=3)
    name = CLASS_NAMES[class_id]
    if name == "sphere":
        r = rng.uniform(0.3, 0.65)
        base = sphere(r)
        params[:1] = [r]
    elif name == "box":
        h = rng.uniform(0.25, 0.6, size=3)
        base = box(h)
        params[:3] = h
    elif name == "torus":
        major = rng.uniform(0.35, 0.55)
        minor = rng.uniform(0.1, min(0.25, 0.8 - major))
        base = torus(major, minor)
        params[:2] = [major, minor]
    elif name == "cylinder":
        r = rng.uniform(0.25, 0.55)
        hh = rng.uniform(0.25, 0.6)
        base = cylinder(r, hh)
        params[:2] = [r, hh]
    elif name == "union":
        r = rng.uniform(0.25, 0.45)
        h = rng.uniform(0.2, 0.4, size=3)
        d = rng.uniform(0.15, 0.3)
        base = union(translated(sphere(r), [d, 0, 0]), box(h))
        params[:5] = [r, *h, d]
    elif name == "difference":
        h = rng.uniform(0.35, 0.55, size=3)
        r = rng.uniform(0.2, min(0.45, float(h.min())))
        base = difference(box(h), sphere(r))
        params[:4] = [*h, r]
    else:
        raise DataError(f"unknown class id {class_id}")
    params[5:8] = offset
    return translated(base, offset), params


@dataclass
class ShapeDataset:
    root: str
    manifest: dict

    @property
    def count(self) -> int:
        return self.manifest["count"]

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([rec["class_id"] for rec in self.manifest["samples"]])

    def shape_id(self, i: int) -> str:
        return self.manifest["samples"][i]["shape_id"]

    def cond_params(self, i: int) -> np.ndarray:
        return np.array(self.manifest["samples"][i]["cond_params"])

    def shape(self, i: int) -> SdfShape:
        with open(os.path.join(self.root, f"shape_{i:05d}.json"), encoding="utf-8") as f:
            return from_dict(json.load(f))

    def points(self, i: int) -> np.ndarray:
        return np.load(os.path.join(self.root, f"points_{i:05d}.npy"))

    def queries(self, i: int) -> np.ndarray:
        """[M, 4] array: xyz + occupancy label."""
        return np.load(os.path.join(self.root, f"queries_{i:05d}.npy"))

    def split_ids(self, split: str) -> list[int]:
        out = []
        for i in range(self.count):
            h = int.from_bytes(
                hashlib.sha1(self.shape_id(i).encode()).digest()[:4], "big"
            )
            is_test = h % 10 == 0
            if (split == "test") == is_test:
                out.append(i)
        return out


def generate_dataset(
    out_dir: str,
    count: int,
    classes: list[int] | None = None,
    seed: int = 0,
    n_points: int = 2048,
    n_uniform: int = 2048,
    n_near: int = 2048,
    sigma: float = 0.02,
) -> ShapeDataset:
    if classes is None:
        classes = list(range(len(CLASS_NAMES)))
    os.makedirs(out_dir, exist_ok=True)
    samples = []
    for i in range(count):
        rng = shape_rng(seed, i)
        class_id = int(classes[i % len(classes)])
        shape, params = random_shape(class_id, rng)
        shape_id = f"{seed}-{i:05d}-{CLASS_NAMES[class_id]}"
        with open(os.path.join(out_dir, f"shape_{i:05d}.json"), "w", encoding="utf-8") as f:
            json.dump(to_dict(shape), f, indent=2, sort_keys=True)
            f.write("\n")
        cloud = sample_surface(shape, n_points, rng)
        np.save(
            os.path.join(out_dir, f"points_{i:05d}.npy"),
            cloud.features().astype(np.float32),
        )
        qb = sample_queries(shape, n_uniform, n_near, sigma, rng)
        np.save(
            os.path.join(out_dir, f"queries_{i:05d}.npy"),
            np.concatenate([qb.points, qb.occupancy_labels[:, None]], axis=1).astype(
                np.float32
            ),
        )
        samples.append(
            {
                "shape_id": shape_id,
                "class_id": class_id,
                "cond_params": [round(float(x), 8) for x in params],
            }
        )
    manifest = {
        "count": count,
        "seed": seed,
        "classes": [int(c) for c in classes],
        "n_points": n_points,
        "n_uniform": n_uniform,
        "n_near": n_near,
        "sigma": sigma,
        "samples": samples,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return ShapeDataset(out_dir, manifest)


def load_dataset(root: str) -> ShapeDataset:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"no dataset manifest at {path}")
    with open(path, encoding="utf-8") as f:
        return ShapeDataset(root, json.load(f))
