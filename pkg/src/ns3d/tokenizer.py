"""Cross-scale querying tokenizer.

Encodes an unordered point cloud into a latent token set, quantizes it
residually across scales with learnable downsample/upsample queries and
lookup-free quantization (LFQ), and decodes the summed per-scale features
back to occupancy at arbitrary query points.

A pooled reducer (1D average pooling + linear interpolation + conv) is kept
alongside the query-based reducer purely as an ablation baseline; it is
order-dependent by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .layers import (
    AttentionConfig,
    CrossAttention,
    CrossAttentionBlock,
    SelfAttentionBlock,
    fourier_posemb,
    trunc_normal_,
)

DESK_SCALES = (1, 4, 16, 64, 256)
FULL_SCALES = (1, 4, 16, 64, 256, 576, 1024, 2304)


@dataclass
class TokenizerConfig:
    latent_len: int = 256
    dim: int = 64
    num_heads: int = 4
    scale_lengths: tuple = DESK_SCALES
    vocab_size: int = 1024
    num_freqs: int = 6
    encoder_self_layers: int = 2
    decoder_self_layers: int = 2
    qk_unit_norm: bool = False
    reducer: str = "query"  # "query" (cross-attention) or "pool" (ablation baseline)
    # Commitment defaults to zero: any pull of zeta toward its current sign
    # freezes the codes of the still-untrained quantizer path into a single
    # pattern during phase-2 training (measured on the desk config; the
    # codebook never recovers). The term stays implemented and configurable.
    commit_weight: float = 0.0
    entropy_weight: float = 0.5
    # None derives the bit width from the vocabulary; an explicit value keeps
    # the alternative of tying it to log2(dim) available behind the config.
    bit_width: int | None = None

    def __post_init__(self):
        self.scale_lengths = tuple(int(x) for x in self.scale_lengths)
        if self.vocab_size & (self.vocab_size - 1) or self.vocab_size < 2:
            raise ConfigError("vocab_size must be a power of two")
        if self.scale_lengths[0] != 1:
            raise ConfigError("the coarsest scale must hold exactly one token")
        if any(a >= b for a, b in zip(self.scale_lengths, self.scale_lengths[1:])):
            raise ConfigError("scale_lengths must be strictly increasing")
        if self.scale_lengths[-1] > self.latent_len:
            raise ConfigError("finest scale cannot exceed the latent length")
        if self.reducer not in ("query", "pool"):
            raise ConfigError(f"unknown reducer {self.reducer!r}")

    @property
    def num_scales(self) -> int:
        return len(self.scale_lengths)

    @property
    def bits(self) -> int:
        return self.bit_width if self.bit_width is not None else int(math.log2(self.vocab_size))

    @classmethod
    def full(cls) -> "TokenizerConfig":
        return cls(
            latent_len=2304,
            dim=512,
            num_heads=8,
            scale_lengths=FULL_SCALES,
            vocab_size=8192,
            encoder_self_layers=12,
            decoder_self_layers=16,
        )


@dataclass
class MultiScaleTokens:
    """Per-scale code indices plus the dequantized and upsampled features."""

    indices: list  # S tensors, each [B, L_s] long
    dequantized: list  # S tensors, each [B, L_s, C]
    upsampled: list  # S tensors, each [B, L, C]
    final_residual: torch.Tensor  # [B, L, C]
    aux: dict = field(default_factory=dict)

    def summed(self) -> torch.Tensor:
        return torch.stack(self.upsampled).sum(dim=0)


class LfqLayer(nn.Module):
    """Lookup-free quantization: sign bits of a projected feature form the code."""

    def __init__(self, dim: int, bits: int):
        super().__init__()
        self.bits = bits
        self.in_proj = nn.Linear(dim, bits)
        self.out_proj = nn.Linear(bits, dim)
        trunc_normal_(self.in_proj.weight)
        trunc_normal_(self.out_proj.weight)
        nn.init.zeros_(self.in_proj.bias)
        nn.init.zeros_(self.out_proj.bias)
        weights = 2 ** torch.arange(bits)
        self.register_buffer("bit_weights", weights, persistent=False)

    def signs_to_indices(self, signs: torch.Tensor) -> torch.Tensor:
        bits = (signs > 0).long()
        return (bits * self.bit_weights).sum(dim=-1)

    def indices_to_signs(self, indices: torch.Tensor) -> torch.Tensor:
        bits = (indices.long().unsqueeze(-1) // self.bit_weights) % 2
        return bits.to(self.out_proj.weight.dtype) * 2.0 - 1.0

    def dequantize_indices(self, indices: torch.Tensor) -> torch.Tensor:
        return self.out_proj(self.indices_to_signs(indices))

    def forward(self, e: torch.Tensor):
        """Returns (indices, dequantized, aux) for features e of shape [..., C].

        Gradients pass straight through the sign; sign(0) is defined as -1.
        """
        zeta = self.in_proj(e)
        signs = torch.where(zeta > 0, 1.0, -1.0).to(zeta.dtype)
        indices = self.signs_to_indices(zeta)
        quantized = zeta + (signs - zeta).detach()
        deq = self.out_proj(quantized)
        commit = ((zeta - signs.detach()) ** 2).mean()
        aux = {"commit": commit, "entropy": self._entropy_loss(zeta)}
        return indices, deq, aux

    def _entropy_loss(self, zeta: torch.Tensor) -> torch.Tensor:
        """Negative entropy of the batch-mean bit probabilities (factorized).

        Pure diversity pressure: minimized when every bit splits the batch
        evenly. A per-sample confidence term (pushing each token's bits away
        from 0.5) is deliberately absent; like the commitment term, it
        amplifies whatever sign pattern the untrained quantizer path starts
        with and collapses the codebook onto a handful of codes.
        """
        p = torch.sigmoid(2.0 * zeta).clamp(1e-6, 1.0 - 1e-6)
        mean_p = p.reshape(-1, self.bits).mean(dim=0)
        return (mean_p * mean_p.log() + (1 - mean_p) * (1 - mean_p).log()).mean()


class PooledReducer(nn.Module):
    """Order-dependent baseline: average pooling down, linear interpolation + conv up."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel_size=3, padding=1)
        nn.init.dirac_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def down(self, z: torch.Tensor, length: int) -> torch.Tensor:
        return F.adaptive_avg_pool1d(z.transpose(-2, -1), length).transpose(-2, -1)

    def up(self, e: torch.Tensor, length: int) -> torch.Tensor:
        x = e.transpose(-2, -1)
        if x.shape[-1] == 1:
            x = x.expand(*x.shape[:-1], length).contiguous()
        else:
            x = F.interpolate(x, size=length, mode="linear", align_corners=True)
        return self.conv(x).transpose(-2, -1)


class CrossScaleTokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.dim
        attn = AttentionConfig(C, cfg.num_heads, cfg.qk_unit_norm)
        pe_dim = 3 * (2 * cfg.num_freqs + 1)

        self.latent = nn.Parameter(trunc_normal_(torch.empty(cfg.latent_len, C)))
        self.point_proj = nn.Linear(pe_dim + 3, C)
        self.enc_cross = CrossAttentionBlock(attn)
        self.enc_self = nn.ModuleList(
            SelfAttentionBlock(attn) for _ in range(cfg.encoder_self_layers)
        )
        self.mid_norm = nn.LayerNorm(C)

        self.down_queries = nn.ParameterList(
            nn.Parameter(torch.randn(ls, C)) for ls in cfg.scale_lengths
        )
        self.up_queries = nn.ParameterList(
            nn.Parameter(torch.randn(cfg.latent_len, C)) for _ in cfg.scale_lengths
        )
        self.down_attn = CrossAttention(attn)
        self.up_attn = CrossAttention(attn)
        self.down_norm = nn.LayerNorm(C)
        self.up_norm = nn.LayerNorm(C)
        self.lfq = LfqLayer(C, cfg.bits)
        self.pooled = PooledReducer(C)
        # The cross-scale attentions and LFQ projections sit outside any
        # residual stream, so the small-std init used inside transformer
        # blocks would attenuate their signal ~1000x end to end. Phase-1
        # training never touches this path; starting it scale-preserving
        # (Xavier projections, unit-variance queries) is what lets phase 2
        # learn shape-dependent codes instead of collapsing.
        for mod in (self.down_attn, self.up_attn):
            for lin in (mod.q_proj, mod.k_proj, mod.v_proj, mod.out_proj):
                nn.init.xavier_uniform_(lin.weight)
        nn.init.xavier_uniform_(self.lfq.in_proj.weight)
        nn.init.xavier_uniform_(self.lfq.out_proj.weight)

        self.query_proj = nn.Linear(pe_dim, C)
        self.dec_self = nn.ModuleList(
            SelfAttentionBlock(attn) for _ in range(cfg.decoder_self_layers)
        )
        self.dec_cross = CrossAttentionBlock(attn)
        self.head = nn.Linear(C, 1)

    # ---- encoding -------------------------------------------------------

    def embed_points(self, feats: torch.Tensor) -> torch.Tensor:
        """Point features [..., N, 6] (positions + normals) -> [..., N, C]."""
        pos, normal = feats[..., :3], feats[..., 3:]
        return self.point_proj(
            torch.cat([fourier_posemb(pos, self.cfg.num_freqs), normal], dim=-1)
        )

    def encode_points(self, feats: torch.Tensor) -> torch.Tensor:
        """Point cloud -> latent token set Z of shape [..., L, C]."""
        if feats.shape[-2] == 0:
            raise ValueError("cannot encode an empty point cloud")
        h = self.embed_points(feats)
        lat = self.latent.expand(*feats.shape[:-2], *self.latent.shape)
        z = self.enc_cross(lat, h)
        for block in self.enc_self:
            z = block(z)
        return z

    # ---- cross-scale quantization ---------------------------------------

    def downsample(self, z_s: torch.Tensor, s: int) -> torch.Tensor:
        q = self.down_queries[s].expand(*z_s.shape[:-2], -1, -1)
        return self.down_attn(q, self.down_norm(z_s))

    def upsample(self, e_hat: torch.Tensor, s: int) -> torch.Tensor:
        q = self.up_queries[s].expand(*e_hat.shape[:-2], -1, -1)
        return self.up_attn(q, self.up_norm(e_hat))

    def quantize_multiscale(self, z: torch.Tensor) -> MultiScaleTokens:
        return self._quantize(z, pooled=self.cfg.reducer == "pool")

    def pooled_quantize_baseline(self, z: torch.Tensor) -> MultiScaleTokens:
        return self._quantize(z, pooled=True)

    def _quantize(self, z: torch.Tensor, pooled: bool) -> MultiScaleTokens:
        residual = z
        indices, deq, up = [], [], []
        aux_commit = aux_entropy = None
        for s, length in enumerate(self.cfg.scale_lengths):
            if pooled:
                e_s = self.pooled.down(residual, length)
            else:
                e_s = self.downsample(residual, s)
            r_s, e_hat, aux = self.lfq(e_s)
            if pooled:
                z_tilde = self.pooled.up(e_hat, self.cfg.latent_len)
            else:
                z_tilde = self.upsample(e_hat, s)
            residual = residual - z_tilde
            indices.append(r_s)
            deq.append(e_hat)
            up.append(z_tilde)
            aux_commit = aux["commit"] if aux_commit is None else aux_commit + aux["commit"]
            aux_entropy = aux["entropy"] if aux_entropy is None else aux_entropy + aux["entropy"]
        tokens = MultiScaleTokens(indices, deq, up, residual)
        tokens.aux = {
            "commit": aux_commit / self.cfg.num_scales,
            "entropy": aux_entropy / self.cfg.num_scales,
        }
        return tokens

    # ---- decoding ---------------------------------------------------------

    def _decode_logits(self, features: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        h = features
        for block in self.dec_self:
            h = block(h)
        q = self.query_proj(fourier_posemb(p, self.cfg.num_freqs))
        return self.head(self.dec_cross(q, h)).squeeze(-1)

    def decode_occupancy(
        self, features: torch.Tensor, p: torch.Tensor, chunk: int = 8192
    ) -> torch.Tensor:
        """Occupancy probabilities in (0, 1) for query points p of shape [..., M, 3]."""
        if p.shape[-2] == 0:
            return p.new_zeros(p.shape[:-1])
        outs = [
            torch.sigmoid(self._decode_logits(features, p[..., i : i + chunk, :]))
            for i in range(0, p.shape[-2], chunk)
        ]
        return torch.cat(outs, dim=-1)

    # ---- end-to-end --------------------------------------------------------

    def forward(self, feats: torch.Tensor, p: torch.Tensor, mode: str = "quant"):
        """Returns (occupancy logits over p, aux dict with LFQ losses and tokens)."""
        if mode not in ("no_quant", "quant"):
            raise ValueError(f"unknown mode {mode!r}")
        z = self.encode_points(feats)
        if mode == "no_quant":
            zero = z.new_zeros(())
            features = self.mid_norm(z)
            aux = {"commit": zero, "entropy": zero, "tokens": None}
        else:
            tokens = self.quantize_multiscale(z)
            features = self.mid_norm(tokens.summed())
            aux = {**tokens.aux, "tokens": tokens}
        return self._decode_logits(features, p), aux


def tokenizer_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    aux: dict,
    commit_weight: float = 0.0,
    entropy_weight: float = 0.5,
) -> torch.Tensor:
    """Binary cross-entropy on occupancy plus weighted quantizer terms."""
    bce = F.binary_cross_entropy_with_logits(logits, labels)
    return bce + commit_weight * aux["commit"] + entropy_weight * aux["entropy"]


def codebook_usage(index_stream, vocab_size: int) -> float:
    """Fraction of the vocabulary observed in a stream of code indices."""
    if isinstance(index_stream, torch.Tensor):
        flat = index_stream.reshape(-1).tolist()
    else:
        flat = []
        for item in index_stream:
            if isinstance(item, torch.Tensor):
                flat.extend(item.reshape(-1).tolist())
            else:
                flat.append(int(item))
    if not flat:
        raise ValueError("empty index stream")
    return len(set(int(i) for i in flat)) / vocab_size
