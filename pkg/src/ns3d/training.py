"""Training loops: two-phase tokenizer training and progressive CAR training."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from .car import CarModel, car_loss
from .checkpoint import TokenDataset
from .data import ShapeDataset
from .errors import NumericError
from .geometry import (
    QueryBatch,
    grid_centers,
    iou,
    chamfer,
    fscore,
    marching_cubes,
    occupancy_accuracy,
    sample_mesh_surface,
    sample_surface,
    shape_occupancy_grid,
    OccupancyGrid,
)
from .optim import AdamW
from .tokenizer import CrossScaleTokenizer, codebook_usage, tokenizer_loss


@dataclass
class TokenizerTrainConfig:
    phase1_steps: int = 2500
    phase2_steps: int = 1000
    lr: float = 1e-3
    phase2_lr: float = 5e-4
    batch_size: int = 8
    points_per_shape: int = 512
    queries_per_shape: int = 384
    eval_interval: int = 250
    eval_shapes: int = 8
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class CarTrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 8
    weight_decay: float = 0.05
    eval_interval: int = 200
    progressive: bool = True
    seed: int = 0
    lr_min_frac: float = 0.1  # cosine decay floor as a fraction of lr


def weight_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


def _batch_from_dataset(
    ds: ShapeDataset, ids: np.ndarray, rng: np.random.Generator, n_points: int, n_queries: int
):
    feats, pts, labels = [], [], []
    for i in ids:
        cloud = ds.points(int(i))
        sel = rng.choice(len(cloud), size=min(n_points, len(cloud)), replace=False)
        feats.append(cloud[sel])
        q = ds.queries(int(i))
        sel = rng.choice(len(q), size=min(n_queries, len(q)), replace=False)
        pts.append(q[sel, :3])
        labels.append(q[sel, 3])
    dt = torch.get_default_dtype()
    return (
        torch.as_tensor(np.stack(feats), dtype=dt),
        torch.as_tensor(np.stack(pts), dtype=dt),
        torch.as_tensor(np.stack(labels), dtype=dt),
    )


def train_tokenizer(
    model: CrossScaleTokenizer,
    dataset: ShapeDataset,
    cfg: TokenizerTrainConfig,
    log=None,
) -> None:
    """Phase 1 trains the encoder-decoder without quantization; phase 2 enables it."""
    torch.manual_seed(cfg.seed)
    train_ids = np.array(dataset.split_ids("train"))
    test_ids = np.array(dataset.split_ids("test"))
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    total = cfg.phase1_steps + cfg.phase2_steps
    for step in range(1, total + 1):
        phase = 1 if step <= cfg.phase1_steps else 2
        mode = "no_quant" if phase == 1 else "quant"
        if step == cfg.phase1_steps + 1:
            opt.lr = cfg.phase2_lr
            if log is not None:
                log({"event": "phase2_start", "step": step, "weight_hash": weight_hash(model)})
        ids = rng.choice(train_ids, size=min(cfg.batch_size, len(train_ids)), replace=False)
        feats, pts, labels = _batch_from_dataset(
            dataset, ids, rng, cfg.points_per_shape, cfg.queries_per_shape
        )
        logits, aux = model(feats, pts, mode=mode)
        loss = tokenizer_loss(
            logits, labels, aux, model.cfg.commit_weight, model.cfg.entropy_weight
        )
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite tokenizer loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and (step % cfg.eval_interval == 0 or step == total):
            rec = {
                "step": step,
                "phase": phase,
                "loss": round(float(loss.item()), 6),
            }
            rec.update(
                _quick_eval(model, dataset, test_ids if len(test_ids) else train_ids, cfg, mode)
            )
            log(rec)
        if log is not None and step == cfg.phase1_steps:
            log({"event": "phase1_complete", "step": step, "weight_hash": weight_hash(model)})


@torch.no_grad()
def _quick_eval(model, dataset, ids, cfg, mode) -> dict:
    ids = ids[: cfg.eval_shapes]
    hits = n = 0
    stream = []
    for i in ids:
        q = dataset.queries(int(i))
        dt = torch.get_default_dtype()
        feats = torch.as_tensor(dataset.points(int(i)), dtype=dt)[None]
        pts = torch.as_tensor(q[:1024, :3], dtype=dt)[None]
        logits, aux = model(feats, pts, mode=mode)
        pred = (logits[0] >= 0).cpu().numpy()
        hits += (pred == (q[:1024, 3] >= 0.5)).sum()
        n += len(pred)
        if aux["tokens"] is not None:
            stream.extend(r.reshape(-1) for r in aux["tokens"].indices)
    out = {"acc": round(100.0 * hits / n, 3)}
    if stream:
        out["usage"] = round(codebook_usage(stream, model.cfg.vocab_size), 4)
    return out


@torch.no_grad()
def reconstruct_grid(
    model: CrossScaleTokenizer, feats: torch.Tensor, resolution: int, mode: str = "quant"
):
    """Encode one shape and decode its occupancy lattice; returns (grid, tokens)."""
    z = model.encode_points(feats[None] if feats.dim() == 2 else feats)
    tokens = None
    if mode == "quant":
        tokens = model.quantize_multiscale(z)
        features = model.mid_norm(tokens.summed())
    else:
        features = model.mid_norm(z)
    pts = torch.as_tensor(grid_centers(resolution).reshape(-1, 3), dtype=feats.dtype)
    occ = model.decode_occupancy(features[0], pts)
    grid = OccupancyGrid(resolution, occ.cpu().numpy().astype(np.float64))
    return grid, tokens


@torch.no_grad()
def evaluate_tokenizer(
    model: CrossScaleTokenizer,
    dataset: ShapeDataset,
    ids,
    resolution: int = 64,
    n_surface: int = 4096,
    mode: str = "quant",
) -> dict:
    """Reconstruction metrics per shape plus aggregate means and codebook usage."""
    per_shape = []
    stream = []
    dt = torch.get_default_dtype()
    for i in ids:
        shape = dataset.shape(int(i))
        feats = torch.as_tensor(dataset.points(int(i)), dtype=dt)
        grid, tokens = reconstruct_grid(model, feats, resolution, mode)
        gt_grid = shape_occupancy_grid(shape, resolution)
        rec = {"shape_id": dataset.shape_id(int(i)), "iou": iou(grid, gt_grid)}
        mesh = marching_cubes(grid, iso=0.5)
        rng = np.random.default_rng(int(i))
        if not mesh.is_empty:
            pred_pts = sample_mesh_surface(mesh, n_surface, rng)
            gt_pts = sample_surface(shape, n_surface, rng).positions
            rec["chamfer"] = chamfer(pred_pts, gt_pts)
            rec["fscore"] = fscore(pred_pts, gt_pts, tau=0.01)
        else:
            rec["chamfer"] = float("inf")
            rec["fscore"] = 0.0
        q = dataset.queries(int(i))
        batch = QueryBatch(q[:, :3], q[:, 3])

        def predictor(p, feats=feats, mode=mode):
            g, _ = _predict_points(model, feats, p, mode)
            return g

        rec["accuracy"] = occupancy_accuracy(predictor, batch)
        if tokens is not None:
            stream.extend(r.reshape(-1) for r in tokens.indices)
        per_shape.append(rec)
    report = {"per_shape": per_shape}
    for key in ("iou", "chamfer", "fscore", "accuracy"):
        vals = [r[key] for r in per_shape if math.isfinite(r[key])]
        report[f"mean_{key}"] = float(np.mean(vals)) if vals else float("nan")
    report["usage"] = codebook_usage(stream, model.cfg.vocab_size) if stream else None
    return report


@torch.no_grad()
def _predict_points(model, feats, p, mode):
    dt = torch.get_default_dtype()
    feats_t = feats if isinstance(feats, torch.Tensor) else torch.as_tensor(feats, dtype=dt)
    z = model.encode_points(feats_t[None] if feats_t.dim() == 2 else feats_t)
    if mode == "quant":
        tokens = model.quantize_multiscale(z)
        features = model.mid_norm(tokens.summed())
    else:
        tokens = None
        features = model.mid_norm(z)
    pts = torch.as_tensor(np.asarray(p), dtype=dt)
    occ = model.decode_occupancy(features[0], pts)
    return occ.cpu().numpy(), tokens


def progressive_schedule(total_steps: int, num_scales: int) -> list[int]:
    """Step at which each scale becomes active (index s -> step)."""
    start_active = max(1, math.ceil(num_scales / 2))
    steps = [0] * start_active
    t, remaining = 0, total_steps
    for _ in range(num_scales - start_active):
        t += max(1, int(0.25 * remaining))
        remaining = total_steps - t
        steps.append(t)
    return steps


def _token_split(tokens: TokenDataset, split: str) -> np.ndarray:
    out = []
    for i, sid in enumerate(tokens.shape_ids):
        h = int.from_bytes(hashlib.sha1(sid.encode()).digest()[:4], "big")
        if (split == "test") == (h % 10 == 0):
            out.append(i)
    return np.array(out, dtype=np.int64)


def _car_batch(tokens: TokenDataset, ids: np.ndarray):
    dt = torch.get_default_dtype()
    targets = [torch.as_tensor(arr[ids].astype(np.int64)) for arr in tokens.indices]
    class_ids = torch.as_tensor(tokens.class_ids[ids].astype(np.int64))
    params = torch.as_tensor(tokens.cond_params[ids], dtype=dt)
    return targets, class_ids, params


def _car_eval_loss(model: CarModel, tokens: TokenDataset, ids: np.ndarray, batch: int = 16) -> float:
    total = count = 0
    with torch.no_grad():
        for i in range(0, len(ids), batch):
            targets, class_ids, params = _car_batch(tokens, ids[i : i + batch])
            seq, layout = model.build_input_sequence(targets, class_ids, params)
            logits = model.forward_logits(seq, layout)
            loss, _ = car_loss(logits, targets, model.cfg.scale_lengths)
            n = sum(t.numel() for t in targets)
            total += loss.item() * n
            count += n
    return total / max(count, 1)


def train_car(
    model: CarModel,
    tokens: TokenDataset,
    cfg: CarTrainConfig,
    log=None,
) -> list[dict]:
    """Teacher-forced training with the progressive scale schedule."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    train_ids = _token_split(tokens, "train")
    test_ids = _token_split(tokens, "test")
    if len(train_ids) == 0:
        train_ids = np.arange(tokens.count)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    S = model.cfg.num_scales
    activation = (
        progressive_schedule(cfg.steps, S) if cfg.progressive else [0] * S
    )
    curves = []
    for step in range(1, cfg.steps + 1):
        opt.lr = cfg.lr * (
            cfg.lr_min_frac
            + (1 - cfg.lr_min_frac) * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        )
        active = sum(1 for t0 in activation if step > t0)
        ids = rng.choice(train_ids, size=min(cfg.batch_size, len(train_ids)), replace=False)
        targets, class_ids, params = _car_batch(tokens, ids)
        seq, layout = model.build_input_sequence(targets, class_ids, params)
        logits = model.forward_logits(seq, layout)
        loss, per_scale = car_loss(logits, targets, model.cfg.scale_lengths, active)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite CAR loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step % cfg.eval_interval == 0) or step == cfg.steps:
            rec = {
                "step": step,
                "active_scales": active,
                "train_loss": round(float(loss.item()), 6),
                "per_scale": {k: round(float(v.item()), 6) for k, v in per_scale.items()},
            }
            if len(test_ids):
                rec["test_loss"] = round(_car_eval_loss(model, tokens, test_ids), 6)
            curves.append(rec)
            if log is not None:
                log(rec)
    return curves
