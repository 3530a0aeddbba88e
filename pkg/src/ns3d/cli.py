"""Command-line entry points.

Subcommands: gen-data, train-tokenizer, tokenize, train-car, generate, eval,
sweep, inspect. Every command reads a JSON config (optional), applies CLI
overrides, writes its fully-resolved config next to its outputs before doing
any long work, and renders matplotlib figures alongside the delimited output.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np
import torch

from . import car as car_mod
from . import checkpoint as ckpt
from . import report
from .car import CarConfig, CarModel
from .data import generate_dataset, load_dataset, random_shape, shape_rng
from .errors import ConfigError, DataError, Ns3dError
from .layers import set_precision
from .sweep import fit_power_law
from .tokenizer import CrossScaleTokenizer, TokenizerConfig, codebook_usage
from .training import (
    CarTrainConfig,
    TokenizerTrainConfig,
    evaluate_tokenizer,
    train_car,
    train_tokenizer,
    weight_hash,
)


# ---------------------------------------------------------------------------
# configuration plumbing


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"no config file at {path}")
    with open(path, encoding="utf-8") as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(args, defaults: dict) -> dict:
    """defaults <- config file <- --set overrides <- global flags."""
    cfg = dict(defaults)
    file_cfg = _load_config(args.config)
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg.update(file_cfg)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _parse_value(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    cfg["precision"] = args.precision
    cfg["deterministic"] = bool(args.deterministic)
    return cfg


def _prepare_run(cfg: dict, command: str) -> str:
    out = cfg.get("out") or "."
    os.makedirs(out, exist_ok=True)
    set_precision(cfg.get("precision", "f32"))
    if cfg.get("deterministic"):
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(int(cfg.get("seed", 0)))
    resolved = os.path.join(out, f"{command.replace('-', '_')}_config.json")
    with open(resolved, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


class JsonlLogger:
    def __init__(self, path: str, echo: bool = False):
        self.path = path
        self.echo = echo
        open(path, "w").close()

    def __call__(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        if self.echo:
            print(record)


# ---------------------------------------------------------------------------
# model (de)serialization helpers


def save_tokenizer(path: str, model: CrossScaleTokenizer, meta=None) -> None:
    ckpt.save_checkpoint(path, model, dataclasses.asdict(model.cfg), meta)


def load_tokenizer(path: str) -> CrossScaleTokenizer:
    header, arrays = ckpt.load_checkpoint(path)
    cfg = header["config"]
    cfg["scale_lengths"] = tuple(cfg["scale_lengths"])
    model = CrossScaleTokenizer(TokenizerConfig(**cfg))
    ckpt.restore_model(model, arrays)
    return model


def save_car(path: str, model: CarModel, latent_len: int, meta=None) -> None:
    cfg = dataclasses.asdict(model.cfg)
    cfg["latent_len"] = latent_len
    ckpt.save_checkpoint(path, model, cfg, meta)


def load_car(path: str) -> CarModel:
    header, arrays = ckpt.load_checkpoint(path)
    cfg = dict(header["config"])
    latent_len = cfg.pop("latent_len")
    cfg["scale_lengths"] = tuple(cfg["scale_lengths"])
    model = CarModel(CarConfig(**cfg), latent_len=latent_len)
    ckpt.restore_model(model, arrays)
    return model


# ---------------------------------------------------------------------------
# subcommands

GEN_DATA_DEFAULTS = dict(
    count=64, classes=[0, 1, 2, 3], n_points=2048, n_uniform=2048, n_near=2048,
    sigma=0.02, seed=0, out=None, precision="f32", deterministic=False,
)


def cmd_gen_data(cfg: dict) -> int:
    out = _prepare_run(cfg, "gen-data")
    generate_dataset(
        out, cfg["count"], cfg["classes"], cfg["seed"],
        cfg["n_points"], cfg["n_uniform"], cfg["n_near"], cfg["sigma"],
    )
    print(f"wrote {cfg['count']} shapes to {out}")
    return 0


TOKENIZER_MODEL_KEYS = dict(
    latent_len=256, dim=64, num_heads=4, scale_lengths=[1, 4, 16, 64, 256],
    vocab_size=1024, num_freqs=6, encoder_self_layers=2, decoder_self_layers=2,
    qk_unit_norm=False, reducer="query", commit_weight=0.0, entropy_weight=0.5,
)

TRAIN_TOKENIZER_DEFAULTS = dict(
    dataset=None, phase1_steps=2500, phase2_steps=1000, lr=1e-3, phase2_lr=5e-4,
    batch_size=8, points_per_shape=512, queries_per_shape=384, eval_interval=250,
    eval_shapes=8, weight_decay=0.0,
    seed=0, out=None, precision="f32", deterministic=False,
    **TOKENIZER_MODEL_KEYS,
)


def _tokenizer_config(cfg: dict) -> TokenizerConfig:
    return TokenizerConfig(
        **{k: tuple(cfg[k]) if k == "scale_lengths" else cfg[k] for k in TOKENIZER_MODEL_KEYS}
    )


def cmd_train_tokenizer(cfg: dict) -> int:
    out = _prepare_run(cfg, "train-tokenizer")
    if not cfg["dataset"]:
        raise ConfigError("train-tokenizer requires a 'dataset' path")
    dataset = load_dataset(cfg["dataset"])
    model = CrossScaleTokenizer(_tokenizer_config(cfg))
    train_cfg = TokenizerTrainConfig(
        **{f.name: cfg[f.name] for f in dataclasses.fields(TokenizerTrainConfig)}
    )
    log = JsonlLogger(os.path.join(out, "tokenizer_metrics.jsonl"))
    train_tokenizer(model, dataset, train_cfg, log)
    save_tokenizer(
        os.path.join(out, "tokenizer.ns3d"), model,
        meta={"weight_hash": weight_hash(model)},
    )
    records = [r for r in report.read_jsonl(log.path) if "loss" in r]
    if records:
        report.plot_loss_curve(records, os.path.join(out, "tokenizer_loss.png"))
    print(f"tokenizer checkpoint: {os.path.join(out, 'tokenizer.ns3d')}")
    return 0


TOKENIZE_DEFAULTS = dict(
    dataset=None, tokenizer=None, num_scales=None,
    seed=0, out=None, precision="f32", deterministic=False,
)


def cmd_tokenize(cfg: dict) -> int:
    out = _prepare_run(cfg, "tokenize")
    if not cfg["dataset"] or not cfg["tokenizer"]:
        raise ConfigError("tokenize requires 'dataset' and 'tokenizer' paths")
    dataset = load_dataset(cfg["dataset"])
    model = load_tokenizer(cfg["tokenizer"])
    S = cfg["num_scales"] or model.cfg.num_scales
    scales = model.cfg.scale_lengths[:S]
    per_scale = [[] for _ in range(S)]
    dt = torch.get_default_dtype()
    with torch.no_grad():
        for i in range(dataset.count):
            feats = torch.as_tensor(dataset.points(i), dtype=dt)[None]
            tokens = model.quantize_multiscale(model.encode_points(feats))
            for s in range(S):
                per_scale[s].append(tokens.indices[s][0].numpy().astype(np.int32))
    token_ds = ckpt.TokenDataset(
        vocab_size=model.cfg.vocab_size,
        scale_lengths=scales,
        shape_ids=[dataset.shape_id(i) for i in range(dataset.count)],
        class_ids=dataset.class_ids,
        cond_params=np.stack([dataset.cond_params(i) for i in range(dataset.count)])
        if dataset.count
        else np.zeros((0, 8)),
        indices=[np.stack(rows) if rows else np.zeros((0, ls), np.int32)
                 for rows, ls in zip(per_scale, scales)],
    )
    path = os.path.join(out, "tokens.nstk")
    ckpt.save_tokens(path, token_ds)
    usage = codebook_usage(
        [torch.as_tensor(a) for a in token_ds.indices], model.cfg.vocab_size
    ) if dataset.count else 0.0
    with open(os.path.join(out, "tokenize_report.json"), "w", encoding="utf-8") as f:
        json.dump({"count": dataset.count, "usage": usage}, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"token dataset: {path} (usage {usage:.3f})")
    return 0


CAR_MODEL_KEYS = dict(dim=64, depth=6, num_heads=4, num_classes=8, param_dim=8,
                      qk_unit_norm=True)

TRAIN_CAR_DEFAULTS = dict(
    tokens=None, tokenizer=None, steps=2000, lr=1e-3, batch_size=8,
    weight_decay=0.05, eval_interval=200, progressive=True,
    seed=0, out=None, precision="f32", deterministic=False,
    **CAR_MODEL_KEYS,
)


def _build_car(cfg: dict, tokenizer: CrossScaleTokenizer, scales) -> CarModel:
    car_cfg = CarConfig(
        vocab_size=tokenizer.cfg.vocab_size,
        scale_lengths=tuple(scales),
        tok_dim=tokenizer.cfg.dim,
        tok_heads=tokenizer.cfg.num_heads,
        **{k: cfg[k] for k in CAR_MODEL_KEYS},
    )
    model = CarModel(car_cfg, latent_len=tokenizer.cfg.latent_len)
    model.init_from_tokenizer(tokenizer)
    return model


def cmd_train_car(cfg: dict) -> int:
    out = _prepare_run(cfg, "train-car")
    if not cfg["tokens"] or not cfg["tokenizer"]:
        raise ConfigError("train-car requires 'tokens' and 'tokenizer' paths")
    tokenizer = load_tokenizer(cfg["tokenizer"])
    tokens = ckpt.load_tokens(
        cfg["tokens"],
        expect_vocab=tokenizer.cfg.vocab_size,
        expect_scales=tokenizer.cfg.scale_lengths,
    )
    model = _build_car(cfg, tokenizer, tokens.scale_lengths)
    train_cfg = CarTrainConfig(
        **{f.name: cfg[f.name] for f in dataclasses.fields(CarTrainConfig) if f.name in cfg}
    )
    log = JsonlLogger(os.path.join(out, "car_metrics.jsonl"))
    train_car(model, tokens, train_cfg, log)
    save_car(os.path.join(out, "car.ns3d"), model, tokenizer.cfg.latent_len,
             meta={"params": model.parameter_count()})
    records = report.read_jsonl(log.path)
    if records:
        report.plot_loss_curve(
            records, os.path.join(out, "car_loss.png"),
            keys=("train_loss", "test_loss"), title="CAR loss (nats/token)",
        )
    print(f"car checkpoint: {os.path.join(out, 'car.ns3d')} "
          f"({model.parameter_count()} params)")
    return 0


GENERATE_DEFAULTS = dict(
    tokenizer=None, car=None, count=1, class_id=0, resolution=48,
    temperature=1.0, top_k=0,
    seed=0, out=None, precision="f32", deterministic=False,
)


def cmd_generate(cfg: dict) -> int:
    from .geometry import save_obj

    out = _prepare_run(cfg, "generate")
    if not cfg["tokenizer"] or not cfg["car"]:
        raise ConfigError("generate requires 'tokenizer' and 'car' paths")
    tokenizer = load_tokenizer(cfg["tokenizer"])
    model = load_car(cfg["car"])
    gen = torch.Generator().manual_seed(int(cfg["seed"]))
    dt = torch.get_default_dtype()
    for i in range(cfg["count"]):
        rng = shape_rng(int(cfg["seed"]), i)
        _, params = random_shape(int(cfg["class_id"]), rng)
        class_ids = torch.tensor([int(cfg["class_id"])])
        params_t = torch.as_tensor(params, dtype=dt)[None]
        indices, grid, mesh = car_mod.generate(
            model, tokenizer, class_ids, params_t,
            resolution=cfg["resolution"], temperature=cfg["temperature"],
            top_k=cfg["top_k"], generator=gen,
        )
        sidecar = {
            "class_id": int(cfg["class_id"]),
            "cond_params": [round(float(x), 8) for x in params],
            "seed": int(cfg["seed"]),
            "sample": i,
            "empty_mesh": mesh.is_empty,
            "tokens": {f"scale_{s}": r[0].tolist() for s, r in enumerate(indices)},
        }
        with open(os.path.join(out, f"sample_{i:03d}.json"), "w", encoding="utf-8") as f:
            json.dump(sidecar, f, sort_keys=True)
            f.write("\n")
        if not mesh.is_empty:
            save_obj(os.path.join(out, f"sample_{i:03d}.obj"), mesh)
    print(f"wrote {cfg['count']} samples to {out}")
    return 0


EVAL_DEFAULTS = dict(
    dataset=None, tokenizer=None, split="test", resolution=64, max_shapes=16,
    n_surface=4096, mode="tokenizer",
    seed=0, out=None, precision="f32", deterministic=False,
)


def cmd_eval(cfg: dict) -> int:
    out = _prepare_run(cfg, "eval")
    if not cfg["dataset"]:
        raise ConfigError("eval requires a 'dataset' path")
    dataset = load_dataset(cfg["dataset"])
    ids = dataset.split_ids(cfg["split"])[: cfg["max_shapes"]]
    if not ids:
        raise DataError(f"no shapes in split {cfg['split']!r}")
    if cfg["mode"] == "gt":
        rep = _eval_ground_truth(dataset, ids, cfg)
    else:
        if not cfg["tokenizer"]:
            raise ConfigError("eval mode 'tokenizer' requires a 'tokenizer' path")
        model = load_tokenizer(cfg["tokenizer"])
        rep = evaluate_tokenizer(
            model, dataset, ids, cfg["resolution"], cfg["n_surface"]
        )
    with open(os.path.join(out, "eval_report.json"), "w", encoding="utf-8") as f:
        json.dump(rep, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out, "eval_per_shape.csv"), "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["shape_id", "iou", "chamfer", "fscore", "accuracy"]
        )
        writer.writeheader()
        for rec in rep["per_shape"]:
            writer.writerow(rec)
    report.plot_metric_summary(rep["per_shape"], os.path.join(out, "eval_summary.png"))
    print(json.dumps({k: v for k, v in rep.items() if k != "per_shape"}, sort_keys=True))
    return 0


def _eval_ground_truth(dataset, ids, cfg) -> dict:
    """Sanity path: evaluates the ground truth against itself (all-perfect report)."""
    from .geometry import (
        iou, chamfer, fscore, occupancy_accuracy, QueryBatch,
        sample_surface, sdf_eval, shape_occupancy_grid,
    )

    per_shape = []
    for i in ids:
        shape = dataset.shape(int(i))
        grid = shape_occupancy_grid(shape, cfg["resolution"])
        pts = sample_surface(shape, cfg["n_surface"], np.random.default_rng(int(i))).positions
        q = dataset.queries(int(i))
        batch = QueryBatch(q[:, :3], q[:, 3])
        per_shape.append({
            "shape_id": dataset.shape_id(int(i)),
            "iou": iou(grid, grid),
            "chamfer": chamfer(pts, pts),
            "fscore": fscore(pts, pts),
            "accuracy": occupancy_accuracy(
                lambda p: (sdf_eval(shape, p) < 0).astype(float), batch
            ),
        })
    rep = {"per_shape": per_shape, "usage": None}
    for key in ("iou", "chamfer", "fscore", "accuracy"):
        rep[f"mean_{key}"] = float(np.mean([r[key] for r in per_shape]))
    return rep


SWEEP_DEFAULTS = dict(
    tokens=None, tokenizer=None,
    sizes=[{"dim": 64, "depth": 6}, {"dim": 128, "depth": 8}, {"dim": 256, "depth": 10}],
    steps=600, lr=1e-3, batch_size=8, weight_decay=0.05, eval_interval=200,
    progressive=True, fit_irreducible=0.0,
    seed=0, out=None, precision="f32", deterministic=False,
)


def cmd_sweep(cfg: dict) -> int:
    out = _prepare_run(cfg, "sweep")
    if not cfg["tokens"] or not cfg["tokenizer"]:
        raise ConfigError("sweep requires 'tokens' and 'tokenizer' paths")
    if len(cfg["sizes"]) < 3:
        raise ConfigError("sweep needs at least 3 model sizes")
    tokenizer = load_tokenizer(cfg["tokenizer"])
    tokens = ckpt.load_tokens(
        cfg["tokens"], expect_vocab=tokenizer.cfg.vocab_size,
        expect_scales=tokenizer.cfg.scale_lengths,
    )
    rows = []
    for k, size in enumerate(cfg["sizes"]):
        run_cfg = dict(cfg)
        run_cfg.update(size)
        run_cfg.setdefault("num_heads", max(4, run_cfg["dim"] // 32))
        for key in CAR_MODEL_KEYS:
            run_cfg.setdefault(key, TRAIN_CAR_DEFAULTS[key])
        model = _build_car(run_cfg, tokenizer, tokens.scale_lengths)
        train_cfg = CarTrainConfig(
            steps=cfg["steps"], lr=cfg["lr"], batch_size=cfg["batch_size"],
            weight_decay=cfg["weight_decay"], eval_interval=cfg["eval_interval"],
            progressive=cfg["progressive"], seed=cfg["seed"],
        )
        log = JsonlLogger(os.path.join(out, f"sweep_size{k}_metrics.jsonl"))
        curves = train_car(model, tokens, train_cfg, log)
        final = curves[-1]
        rows.append({
            "params": model.parameter_count(),
            "loss": final.get("test_loss", final["train_loss"]),
        })
        print(f"size {k}: {rows[-1]['params']} params, loss {rows[-1]['loss']:.4f}")
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["params", "loss"])
        writer.writeheader()
        writer.writerows(rows)
    params = np.array([r["params"] for r in rows], dtype=float)
    losses = np.array([r["loss"] for r in rows], dtype=float)
    fit = fit_power_law(params, losses, irreducible=cfg["fit_irreducible"])
    result = {
        "exponent": fit.exponent, "coefficient": fit.coefficient,
        "irreducible": fit.irreducible, "r_squared": fit.r_squared,
        "no_scaling": fit.no_scaling,
    }
    with open(os.path.join(out, "sweep_fit.json"), "w", encoding="utf-8") as f:
        json.dump(result, f, indent=2, sort_keys=True)
        f.write("\n")
    report.plot_sweep_fit(params, losses, fit, os.path.join(out, "sweep_fit.png"))
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_inspect(path: str) -> int:
    if not os.path.exists(path):
        raise DataError(f"no file at {path}")
    with open(path, "rb") as f:
        head = f.read(4)
    if head == ckpt.MAGIC:
        header, arrays = ckpt.load_checkpoint(path)
        print(json.dumps({
            "kind": "checkpoint",
            "tensors": len(arrays),
            "parameters": int(sum(int(np.prod(r["shape"])) for r in header["tensors"])),
            "config": header["config"],
            "meta": header["meta"],
        }, indent=2, sort_keys=True))
    elif head == ckpt.TOKEN_MAGIC:
        tokens = ckpt.load_tokens(path)
        print(json.dumps({
            "kind": "tokens",
            "samples": tokens.count,
            "vocab_size": tokens.vocab_size,
            "scale_lengths": list(tokens.scale_lengths),
        }, indent=2, sort_keys=True))
    else:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        print(json.dumps({"kind": "json", "keys": sorted(doc)[:20]}, indent=2))
    return 0


# ---------------------------------------------------------------------------

COMMANDS = {
    "gen-data": (GEN_DATA_DEFAULTS, cmd_gen_data),
    "train-tokenizer": (TRAIN_TOKENIZER_DEFAULTS, cmd_train_tokenizer),
    "tokenize": (TOKENIZE_DEFAULTS, cmd_tokenize),
    "train-car": (TRAIN_CAR_DEFAULTS, cmd_train_car),
    "generate": (GENERATE_DEFAULTS, cmd_generate),
    "eval": (EVAL_DEFAULTS, cmd_eval),
    "sweep": (SWEEP_DEFAULTS, cmd_sweep),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ns3d")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--out", default=None)
        p.add_argument("--precision", choices=["f32", "f64"], default="f32")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p = sub.add_parser("inspect")
    p.add_argument("path")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "inspect":
        return cmd_inspect(args.path)
    defaults, fn = COMMANDS[args.command]
    cfg = resolve_config(args, defaults)
    return fn(cfg)


def main(argv=None) -> None:
    try:
        sys.exit(run(argv))
    except Ns3dError as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)


if __name__ == "__main__":
    main()
