"""Attention layers, normalization, and positional encoding.

All modules here operate on unbatched token sets shaped [L, C] or batched
[B, L, C]. Cross-attention canonicalizes key/value row order when running in
float64 so that outputs are bitwise invariant under permutation of the
key/value rows (float64 is the verification precision; see set_precision).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError

_INIT_STD = 0.02


def set_precision(mode: str) -> None:
    """Switch the global default dtype: "f32" for training, "f64" for verification."""
    if mode == "f32":
        torch.set_default_dtype(torch.float32)
    elif mode == "f64":
        torch.set_default_dtype(torch.float64)
    else:
        raise ValueError(f"unknown precision mode: {mode!r}")


def trunc_normal_(t: torch.Tensor, std: float = _INIT_STD) -> torch.Tensor:
    return nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std)


@dataclass
class AttentionConfig:
    model_dim: int
    num_heads: int
    qk_unit_norm: bool = False

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0:
            raise ValueError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product with an explicit inner-extent check."""
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-stabilized softmax. Rejects NaN inputs instead of propagating them."""
    if torch.isnan(x).any():
        raise NumericError("softmax received NaN input")
    shifted = x - x.amax(dim=axis, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def fourier_posemb(p: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """[raw p, sin(2^k pi p), cos(2^k pi p)] for k = 0..num_freqs-1, concatenated.

    Input [..., D] -> output [..., D * (2 * num_freqs + 1)].
    """
    parts = [p]
    for k in range(num_freqs):
        ang = (2.0**k) * math.pi * p
        parts.append(torch.sin(ang))
        parts.append(torch.cos(ang))
    return torch.cat(parts, dim=-1)


def _canonical_kv_order(kv: torch.Tensor) -> torch.Tensor:
    """Lexicographic row order of kv, making reductions order-independent."""
    arr = kv.detach().cpu().numpy()
    order = np.lexsort(arr.T[::-1])
    return torch.as_tensor(order.copy(), device=kv.device, dtype=torch.long)


def _split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    # [..., L, C] -> [..., H, L, C/H]
    *lead, L, C = x.shape
    x = x.view(*lead, L, num_heads, C // num_heads)
    return x.transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    # [..., H, L, C/H] -> [..., L, C]
    x = x.transpose(-3, -2).contiguous()
    *lead, L, H, D = x.shape
    return x.view(*lead, L, H * D)


class CrossAttention(nn.Module):
    """Multi-head scaled-dot-product attention from a query set onto a key/value set.

    With qk_unit_norm, per-head query and key vectors are L2-normalized before
    the dot product and a learned per-head temperature restores expressiveness.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.model_dim
        self.q_proj = nn.Linear(C, C)
        self.k_proj = nn.Linear(C, C)
        self.v_proj = nn.Linear(C, C)
        self.out_proj = nn.Linear(C, C)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            trunc_normal_(lin.weight)
            nn.init.zeros_(lin.bias)
        if cfg.qk_unit_norm:
            self.qk_scale = nn.Parameter(torch.full((cfg.num_heads, 1, 1), 10.0))

    def forward(
        self,
        q_in: torch.Tensor,
        kv_in: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if kv_in.shape[-2] == 0:
            raise ValueError("cross-attention over an empty key/value set")
        if q_in.shape[-1] != kv_in.shape[-1]:
            raise ValueError("query and key/value model dims disagree")
        if mask is None and kv_in.dtype == torch.float64:
            # verification mode: canonical kv order => bitwise permutation invariance
            if kv_in.dim() == 2:
                kv_in = kv_in[_canonical_kv_order(kv_in)]
            else:
                kv_in = torch.stack(
                    [row[_canonical_kv_order(row)] for row in kv_in.unbind(0)]
                )
        H = self.cfg.num_heads
        q = _split_heads(self.q_proj(q_in), H)
        k = _split_heads(self.k_proj(kv_in), H)
        v = _split_heads(self.v_proj(kv_in), H)
        if self.cfg.qk_unit_norm:
            q = F.normalize(q, dim=-1)
            k = F.normalize(k, dim=-1)
            logits = (q @ k.transpose(-2, -1)) * self.qk_scale
        else:
            logits = (q @ k.transpose(-2, -1)) / math.sqrt(self.cfg.head_dim)
        if mask is not None:
            if (~mask).all(dim=-1).any():
                raise ValueError("attention mask isolates a position (all-false row)")
            logits = logits.masked_fill(~mask, float("-inf"))
        attn = softmax(logits, axis=-1)
        return self.out_proj(_merge_heads(attn @ v))


def cross_attention(
    q_in: torch.Tensor, kv_in: torch.Tensor, cfg: AttentionConfig
) -> torch.Tensor:
    """Functional form: a fresh CrossAttention layer applied once."""
    return CrossAttention(cfg)(q_in, kv_in)


class Mlp(nn.Module):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * expansion)
        self.fc2 = nn.Linear(dim * expansion, dim)
        trunc_normal_(self.fc1.weight)
        trunc_normal_(self.fc2.weight)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).

    mask[i, j] = True means position i may attend to position j.
    """

    def __init__(self, cfg: AttentionConfig, mlp_expansion: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.attn = CrossAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.model_dim)
        self.mlp = Mlp(cfg.model_dim, mlp_expansion)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, mask=mask)
        return x + self.mlp(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual cross-attention followed by an MLP, on the query side."""

    def __init__(self, cfg: AttentionConfig, mlp_expansion: int = 4):
        super().__init__()
        self.norm_q = nn.LayerNorm(cfg.model_dim)
        self.norm_kv = nn.LayerNorm(cfg.model_dim)
        self.attn = CrossAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.model_dim)
        self.mlp = Mlp(cfg.model_dim, mlp_expansion)

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        x = q + self.attn(self.norm_q(q), self.norm_kv(kv))
        return x + self.mlp(self.norm2(x))
