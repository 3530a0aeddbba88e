"""Cross-scale autoregressive model.

A decoder-only transformer that, given condition tokens and the token maps of
all coarser scales, predicts the full token map of the next scale. Positions
within a scale block are conditionally independent given the prefix, so each
scale is sampled in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .layers import AttentionConfig, CrossAttention, SelfAttentionBlock, trunc_normal_
from .tokenizer import CrossScaleTokenizer, MultiScaleTokens


@dataclass
class CarConfig:
    vocab_size: int
    scale_lengths: tuple
    tok_dim: int  # channel dim of the paired tokenizer's latents
    tok_heads: int = 4
    dim: int = 64
    depth: int = 6
    num_heads: int = 4
    num_classes: int = 8
    param_dim: int = 8
    cond_tokens: int = 2
    qk_unit_norm: bool = True
    dropout: float = 0.0
    temperature: float = 1.0
    top_k: int = 0

    def __post_init__(self):
        self.scale_lengths = tuple(int(x) for x in self.scale_lengths)
        if self.vocab_size & (self.vocab_size - 1):
            raise ConfigError("vocab_size must be a power of two")
        if self.cond_tokens != 2:
            raise ConfigError("condition interface is fixed at 2 tokens (class, params)")

    @property
    def num_scales(self) -> int:
        return len(self.scale_lengths)

    @property
    def bits(self) -> int:
        return int(self.vocab_size).bit_length() - 1


@dataclass
class SequenceLayout:
    cond_len: int
    scale_lengths: tuple

    @property
    def block_offsets(self) -> tuple:
        # offset of each scale block in the full (cond-prefixed) sequence
        offs, cur = [], self.cond_len
        for ls in self.scale_lengths:
            offs.append(cur)
            cur += ls
        return tuple(offs)

    @property
    def total_len(self) -> int:
        return self.cond_len + sum(self.scale_lengths)

    def block_ids(self) -> torch.Tensor:
        ids = [-1] * self.cond_len
        for s, ls in enumerate(self.scale_lengths):
            ids.extend([s] * ls)
        return torch.tensor(ids)

    def mask(self) -> torch.Tensor:
        """Block-causal boolean mask: attend to condition, earlier blocks, own block."""
        ids = self.block_ids()
        return ids[None, :] <= ids[:, None]


def indices_to_signs(indices: torch.Tensor, bits: int, dtype=None) -> torch.Tensor:
    weights = 2 ** torch.arange(bits, device=indices.device)
    b = (indices.long().unsqueeze(-1) // weights) % 2
    return b.to(dtype or torch.get_default_dtype()) * 2.0 - 1.0


class ScaleAligner(nn.Module):
    """Aligns scale-s tokens to the length of scale s+1 via two cross-attentions.

    Tokens are first lifted to the full latent length with upsample queries,
    then reduced to the next scale's length with downsample queries. Weights
    initialize from the tokenizer's quantizer layers and train further.
    """

    def __init__(self, cfg: CarConfig, latent_len: int):
        super().__init__()
        attn = AttentionConfig(cfg.tok_dim, cfg.tok_heads)
        self.up_attn = CrossAttention(attn)
        self.down_attn = CrossAttention(attn)
        self.up_norm = nn.LayerNorm(cfg.tok_dim)
        self.down_norm = nn.LayerNorm(cfg.tok_dim)
        self.up_queries = nn.ParameterList(
            nn.Parameter(trunc_normal_(torch.empty(latent_len, cfg.tok_dim)))
            for _ in cfg.scale_lengths[:-1]
        )
        self.down_queries = nn.ParameterList(
            nn.Parameter(trunc_normal_(torch.empty(ls, cfg.tok_dim)))
            for ls in cfg.scale_lengths[1:]
        )

    def forward(self, e_hat: torch.Tensor, s: int) -> torch.Tensor:
        """Scale-s dequantized tokens [B, L_s, C] -> features [B, L_{s+1}, C]."""
        up_q = self.up_queries[s].expand(*e_hat.shape[:-2], -1, -1)
        lifted = self.up_attn(up_q, self.up_norm(e_hat))
        down_q = self.down_queries[s].expand(*e_hat.shape[:-2], -1, -1)
        return self.down_attn(down_q, self.down_norm(lifted))

    @torch.no_grad()
    def init_from_tokenizer(self, tok: CrossScaleTokenizer) -> None:
        self.up_attn.load_state_dict(tok.up_attn.state_dict())
        self.down_attn.load_state_dict(tok.down_attn.state_dict())
        self.up_norm.load_state_dict(tok.up_norm.state_dict())
        self.down_norm.load_state_dict(tok.down_norm.state_dict())
        for s, q in enumerate(self.up_queries):
            q.copy_(tok.up_queries[s])
        for s, q in enumerate(self.down_queries):
            q.copy_(tok.down_queries[s + 1])


class CarModel(nn.Module):
    def __init__(self, cfg: CarConfig, latent_len: int = 256):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        self.token_dequant = nn.Linear(cfg.bits, cfg.tok_dim)
        self.aligner = ScaleAligner(cfg, latent_len)
        self.word_embed = nn.Linear(cfg.tok_dim, D)
        self.start_token = nn.Parameter(trunc_normal_(torch.empty(1, D)))
        self.class_embed = nn.Embedding(cfg.num_classes, D)
        self.param_proj = nn.Linear(cfg.param_dim, D)
        self.level_embed = nn.Embedding(cfg.num_scales, D)
        self.cond_level = nn.Parameter(trunc_normal_(torch.empty(1, D)))
        trunc_normal_(self.class_embed.weight)
        trunc_normal_(self.level_embed.weight)
        attn = AttentionConfig(D, cfg.num_heads, cfg.qk_unit_norm)
        self.blocks = nn.ModuleList(SelfAttentionBlock(attn) for _ in range(cfg.depth))
        self.out_norm = nn.LayerNorm(D)
        self.head = nn.Linear(D, cfg.vocab_size)

    @torch.no_grad()
    def init_from_tokenizer(self, tok: CrossScaleTokenizer) -> None:
        self.aligner.init_from_tokenizer(tok)
        self.token_dequant.load_state_dict(tok.lfq.out_proj.state_dict())

    def embed_condition(self, class_ids: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
        """(class id [B], params [B, param_dim]) -> condition tokens [B, 2, D]."""
        tok = torch.stack(
            [self.class_embed(class_ids.long()), self.param_proj(params)], dim=-2
        )
        return tok + self.cond_level

    def build_input_sequence(
        self, indices: list, class_ids: torch.Tensor, params: torch.Tensor
    ):
        """Token maps for scales 1..k plus condition -> (embedded sequence, layout).

        The block at position s is the input that predicts scale s+1's codes, so
        only scales 1..k-1 of the provided maps feed the sequence for k scales.
        """
        S = len(indices) if indices else 0
        if S > self.cfg.num_scales:
            raise ConfigError("more token maps than configured scales")
        for s, r in enumerate(indices):
            if r.shape[-1] != self.cfg.scale_lengths[s]:
                raise ConfigError(
                    f"scale {s} has {r.shape[-1]} tokens, schedule says "
                    f"{self.cfg.scale_lengths[s]}"
                )
        cond = self.embed_condition(class_ids, params)
        B = cond.shape[0]
        pieces = [cond, (self.start_token + self.level_embed.weight[0]).expand(B, 1, -1)]
        n_blocks = min(S + 1, self.cfg.num_scales)
        for s in range(n_blocks - 1):
            e_hat = self.token_dequant(indices_to_signs(indices[s], self.cfg.bits))
            f_s = self.aligner(e_hat, s)
            pieces.append(self.word_embed(f_s) + self.level_embed.weight[s + 1])
        seq = torch.cat(pieces, dim=-2)
        layout = SequenceLayout(self.cfg.cond_tokens, self.cfg.scale_lengths[:n_blocks])
        return seq, layout

    def forward_logits(self, seq: torch.Tensor, layout: SequenceLayout) -> torch.Tensor:
        """Per-position code distributions for every to-be-predicted token."""
        mask = layout.mask().to(seq.device)
        h = seq
        for block in self.blocks:
            h = block(h, mask=mask)
        return self.head(self.out_norm(h[..., layout.cond_len :, :]))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def car_loss(
    logits: torch.Tensor,
    targets: list,
    scale_lengths: tuple,
    active_scales: int | None = None,
):
    """Mean cross-entropy in nats/token over active scales, with per-scale means."""
    active = active_scales if active_scales is not None else len(scale_lengths)
    per_scale, total, count = {}, 0.0, 0
    off = 0
    for s in range(active):
        ls = scale_lengths[s]
        t = targets[s]
        if (t < 0).any() or (t >= logits.shape[-1]).any():
            raise ValueError("target token index out of range")
        block = logits[..., off : off + ls, :]
        ce = F.cross_entropy(block.reshape(-1, block.shape[-1]), t.reshape(-1))
        n = t.numel()
        per_scale[s] = ce
        total = total + ce * n
        count += n
        off += ls
    return total / count, per_scale


def sample_next_scale(
    model: CarModel,
    indices: list,
    class_ids: torch.Tensor,
    params: torch.Tensor,
    temperature: float = 1.0,
    top_k: int = 0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Sample all tokens of scale len(indices)+1 in parallel from the prefix."""
    s = len(indices)
    if s >= model.cfg.num_scales:
        raise ConfigError("no next scale to sample")
    seq, layout = model.build_input_sequence(indices, class_ids, params)
    logits = model.forward_logits(seq, layout)
    off = sum(model.cfg.scale_lengths[:s])
    block = logits[..., off : off + model.cfg.scale_lengths[s], :]
    if top_k == 1 or temperature <= 0.0:
        return block.argmax(dim=-1)
    block = block / temperature
    if top_k > 0:
        kth = block.topk(top_k, dim=-1).values[..., -1:]
        block = block.masked_fill(block < kth, float("-inf"))
    probs = F.softmax(block, dim=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    draw = torch.multinomial(flat, 1, generator=generator).squeeze(-1)
    return draw.reshape(probs.shape[:-1])


@torch.no_grad()
def generate(
    model: CarModel,
    tokenizer: CrossScaleTokenizer,
    class_ids: torch.Tensor,
    params: torch.Tensor,
    resolution: int = 64,
    temperature: float = 1.0,
    top_k: int = 0,
    generator: torch.Generator | None = None,
    num_scales: int | None = None,
):
    """Sample token maps coarse-to-fine, decode to an occupancy grid and a mesh."""
    from .geometry import OccupancyGrid, grid_centers, marching_cubes

    if tuple(model.cfg.scale_lengths) != tuple(
        tokenizer.cfg.scale_lengths[: model.cfg.num_scales]
    ):
        raise ConfigError("model and tokenizer scale schedules disagree")
    S = num_scales if num_scales is not None else model.cfg.num_scales
    indices: list = []
    for _ in range(S):
        indices.append(
            sample_next_scale(
                model, indices, class_ids, params, temperature, top_k, generator
            )
        )
    summed = None
    for s, r in enumerate(indices):
        z_tilde = tokenizer.upsample(tokenizer.lfq.dequantize_indices(r), s)
        summed = z_tilde if summed is None else summed + z_tilde
    features = tokenizer.mid_norm(summed)
    pts = torch.as_tensor(
        grid_centers(resolution).reshape(-1, 3), dtype=features.dtype
    )
    occ = tokenizer.decode_occupancy(features[0] if features.dim() == 3 else features, pts)
    grid = OccupancyGrid(resolution, occ.detach().cpu().numpy().astype(np.float64))
    mesh = marching_cubes(grid, iso=0.5)
    return indices, grid, mesh
