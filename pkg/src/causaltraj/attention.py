"""Targeted multi-view attention: the target token queries spatial, BEV and
temporal token sets, and an aggregation MLP merges the three views.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from causaltraj.config import AttentionConfig


@dataclass
class ContextToken:
    values: torch.Tensor
    backdoor_index: int = 0


class TargetedAttention(nn.Module):
    """Single-query scaled dot-product attention.

    Returns ``(output, weights, empty)``. ``weights`` are the softmax weights
    over keys (exactly zero on masked keys); rows without any valid key get a
    zero output and ``empty=True``.
    """

    def __init__(self, d_model: int, heads: int = 1, residual: bool = True, dropout: float = 0.0):
        super().__init__()
        if d_model % heads:
            raise ValueError("heads must divide d_model")
        self.heads = heads
        self.residual = residual
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.norm = nn.LayerNorm(d_model) if residual else nn.Identity()
        self.drop = nn.Dropout(dropout)

    def forward(self, query: torch.Tensor, keys: torch.Tensor, mask: torch.Tensor | None = None):
        # query: (..., D); keys: (..., N, D); mask: (..., N)
        *lead, n, d = keys.shape
        if n == 0:
            zeros = query.new_zeros(query.shape)
            return zeros, keys.new_zeros(*lead, self.heads, 0), torch.ones(lead, dtype=torch.bool)
        if mask is None:
            mask = torch.ones(*lead, n, dtype=torch.bool)
        hd = d // self.heads
        q = self.q(query).reshape(*lead, self.heads, 1, hd)
        k = self.k(keys).reshape(*lead, n, self.heads, hd).transpose(-2, -3)
        v = self.v(keys).reshape(*lead, n, self.heads, hd).transpose(-2, -3)
        scores = (q @ k.transpose(-1, -2)).squeeze(-2) / math.sqrt(hd)  # (..., heads, N)
        scores = scores.masked_fill(~mask[..., None, :], float("-inf"))
        empty = ~mask.any(dim=-1)
        scores = scores.masked_fill(empty[..., None, None], 0.0)
        weights = torch.softmax(scores, dim=-1)
        weights = torch.where(empty[..., None, None], torch.zeros_like(weights), weights)
        pooled = (self.drop(weights)[..., None, :] @ v).squeeze(-2).reshape(*lead, d)
        out = self.o(pooled)
        if self.residual:
            out = self.norm(query + out)
        out = torch.where(empty[..., None], torch.zeros_like(out), out)
        return out, weights, empty


class AggregateContext(nn.Module):
    """Two-layer MLP over the concatenation [x_s, x_b, x_t, X^h]."""

    def __init__(self, d_model: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(4 * d_model, d_model), nn.ReLU(), nn.Linear(d_model, d_model))

    def forward(self, x_s, x_b, x_t, xh):
        return self.net(torch.cat([x_s, x_b, x_t, xh], dim=-1))


class MultiViewAttention(nn.Module):
    def __init__(self, d_model: int, cfg: AttentionConfig | None = None):
        super().__init__()
        cfg = cfg or AttentionConfig()
        kw = dict(heads=cfg.heads, residual=cfg.residual, dropout=cfg.dropout)
        self.spatial = TargetedAttention(d_model, **kw)
        self.bev = TargetedAttention(d_model, **kw)
        self.temporal = TargetedAttention(d_model, **kw)
        self.aggregate = AggregateContext(d_model)

    def forward(self, xh, s_tokens, s_mask, b_tokens, t_tokens, t_mask, use_bev: bool = True):
        """Context token per backdoor sample.

        xh: (B, D); s_tokens: (B, n, N_m, D); b_tokens: (B, N_b, D);
        t_tokens: (B, N_a, D). Returns (B, n, D).
        """
        n = s_tokens.shape[1]
        xq = xh[:, None].expand(-1, n, -1)
        x_s, _, _ = self.spatial(xq, s_tokens, s_mask[:, None].expand(-1, n, -1))
        if use_bev:
            x_b, _, _ = self.bev(xh, b_tokens)
        else:
            x_b = torch.zeros_like(xh)
        x_t, _, _ = self.temporal(xh, t_tokens, t_mask)
        x_b = x_b[:, None].expand(-1, n, -1)
        x_t = x_t[:, None].expand(-1, n, -1)
        return self.aggregate(x_s, x_b, x_t, xq)


# Vector-level wrappers ------------------------------------------------------


def spatial_attention(xh: torch.Tensor, shi: torch.Tensor, module: TargetedAttention):
    """Attention of a single target token over one backdoor sample (N_m, D)."""
    if shi.shape[0] == 0:
        raise ValueError("spatial attention needs at least one key")
    out, weights, _ = module(xh, shi)
    return out, weights


def bev_attention(xh: torch.Tensor, bh: torch.Tensor, module: TargetedAttention):
    out, weights, _ = module(xh, bh)
    return out, weights


def temporal_attention(xh: torch.Tensor, th: torch.Tensor, mask: torch.Tensor, module: TargetedAttention):
    """Returns ``(context, weights, no_valid_neighbors)``."""
    out, weights, empty = module(xh, th, mask)
    return out, weights, bool(empty)


def aggregate_context(x_s, x_b, x_t, xh, module: AggregateContext, index: int = 0) -> ContextToken:
    for name, v in (("x_s", x_s), ("x_b", x_b), ("x_t", x_t), ("xh", xh)):
        if not torch.all(torch.isfinite(v)):
            raise ValueError(f"{name} is not finite")
    return ContextToken(module(x_s, x_b, x_t, xh), index)
