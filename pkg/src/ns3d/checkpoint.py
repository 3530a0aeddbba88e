"""Binary artifact containers: "NS3D" weight checkpoints and token datasets.

Checkpoint layout: magic "NS3D", u32 version, u64 header length, UTF-8 JSON
header (tensor manifest with name/shape/offset, config snapshot, RNG state),
then a payload of little-endian float32 values. Token files use the same
header-then-payload scheme with magic "NSTK" and an int32 payload.
"""

from __future__ import annotations

import base64
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"NS3D"
TOKEN_MAGIC = b"NSTK"
VERSION = 1


def _atomic_write(path: str, blob: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<IQ", VERSION, len(hdr)) + hdr + payload


def _unpack(blob: bytes, magic: bytes) -> tuple[dict, bytes]:
    if blob[:4] != magic:
        raise CheckpointError(f"bad magic: expected {magic!r}, got {blob[:4]!r}")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    return header, blob[16 + hlen :]


def save_checkpoint(path: str, model: torch.nn.Module, config: dict, meta: dict | None = None) -> None:
    tensors, chunks = [], []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "kind": "checkpoint",
        "config": config,
        "meta": meta or {},
        "rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
        "payload_floats": offset,
        "tensors": tensors,
    }
    _atomic_write(path, _pack(MAGIC, header, b"".join(chunks)))


def load_checkpoint(path: str) -> tuple[dict, dict]:
    """Returns (header, named float32 arrays)."""
    if not os.path.exists(path):
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path, "rb") as f:
        header, payload = _unpack(f.read(), MAGIC)
    floats = np.frombuffer(payload, dtype="<f4")
    if len(floats) != header["payload_floats"]:
        raise CheckpointError("payload length does not match manifest")
    arrays, prev_end = {}, 0
    for rec in header["tensors"]:
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        if rec["offset"] != prev_end:
            raise CheckpointError("overlapping or gapped tensor offsets")
        arrays[rec["name"]] = floats[rec["offset"] : rec["offset"] + n].reshape(
            rec["shape"]
        )
        prev_end = rec["offset"] + n
    return header, arrays


def restore_model(model: torch.nn.Module, arrays: dict) -> None:
    expected = model.state_dict()
    if set(arrays) != set(expected):
        raise CheckpointError("checkpoint tensors do not match model parameters")
    model.load_state_dict(
        {
            k: torch.as_tensor(arrays[k].copy()).to(dtype=v.dtype)
            for k, v in expected.items()
        }
    )


def restore_rng(header: dict) -> None:
    raw = base64.b64decode(header["rng"])
    torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))


@dataclass
class TokenDataset:
    vocab_size: int
    scale_lengths: tuple
    shape_ids: list
    class_ids: np.ndarray  # [N]
    cond_params: np.ndarray  # [N, P]
    indices: list  # per scale: int32 array [N, L_s]

    def __post_init__(self):
        self.scale_lengths = tuple(int(x) for x in self.scale_lengths)
        for arr in self.indices:
            if arr.size and arr.max() >= self.vocab_size:
                raise CheckpointError("token index out of vocabulary range")
        for ls, arr in zip(self.scale_lengths, self.indices):
            if arr.shape[1] != ls:
                raise CheckpointError("token lengths do not match the scale schedule")

    @property
    def count(self) -> int:
        return len(self.shape_ids)

    def sample(self, i: int) -> list:
        return [arr[i] for arr in self.indices]


def save_tokens(path: str, ds: TokenDataset) -> None:
    payload = b"".join(arr.astype("<i4").tobytes() for arr in ds.indices)
    header = {
        "kind": "tokens",
        "vocab_size": ds.vocab_size,
        "scale_lengths": list(ds.scale_lengths),
        "shape_ids": ds.shape_ids,
        "class_ids": [int(c) for c in ds.class_ids],
        "cond_params": [[round(float(x), 8) for x in row] for row in ds.cond_params],
    }
    _atomic_write(path, _pack(TOKEN_MAGIC, header, payload))


def load_tokens(path: str, expect_vocab: int | None = None, expect_scales=None) -> TokenDataset:
    if not os.path.exists(path):
        raise CheckpointError(f"no token file at {path}")
    with open(path, "rb") as f:
        header, payload = _unpack(f.read(), TOKEN_MAGIC)
    vocab = header["vocab_size"]
    scales = tuple(header["scale_lengths"])
    if expect_vocab is not None and vocab != expect_vocab:
        raise CheckpointError(f"vocab mismatch: file {vocab}, expected {expect_vocab}")
    if expect_scales is not None:
        expect_scales = tuple(int(x) for x in expect_scales)
        if scales != expect_scales[: len(scales)]:
            raise CheckpointError(
                f"scale schedule mismatch: file {scales}, expected prefix of {expect_scales}"
            )
    n = len(header["shape_ids"])
    flat = np.frombuffer(payload, dtype="<i4")
    if len(flat) != n * sum(scales):
        raise CheckpointError("token payload length does not match manifest")
    indices, off = [], 0
    for ls in scales:
        indices.append(flat[off : off + n * ls].reshape(n, ls).copy())
        off += n * ls
    return TokenDataset(
        vocab_size=vocab,
        scale_lengths=scales,
        shape_ids=header["shape_ids"],
        class_ids=np.array(header["class_ids"]),
        cond_params=np.array(header["cond_params"]),
        indices=indices,
    )
