"""Token extraction: spatial (GRU + graph attention), temporal (GRU), BEV (multi-kernel pyramid)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from causaltraj.config import EncoderConfig
from causaltraj.exceptions import EncodingError, SceneValidationError


@dataclass
class SpatialTokens:
    values: torch.Tensor  # (N_m, D)


@dataclass
class TemporalTokens:
    target: torch.Tensor         # (D,)
    neighbors: torch.Tensor      # (N_a, D)
    neighbor_mask: torch.Tensor  # (N_a,) bool


@dataclass
class BevTokens:
    values: torch.Tensor  # (N_b, D)


class GraphAttention(nn.Module):
    """Single-head graph attention over a fully connected node set."""

    def __init__(self, d_model: int):
        super().__init__()
        self.proj = nn.Linear(d_model, d_model, bias=False)
        self.att_src = nn.Parameter(torch.randn(d_model) / math.sqrt(d_model))
        self.att_dst = nn.Parameter(torch.randn(d_model) / math.sqrt(d_model))
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # x: (B, N, D), mask: (B, N)
        wh = self.proj(x)
        scores = (wh @ self.att_dst)[..., :, None] + (wh @ self.att_src)[..., None, :]
        scores = F.leaky_relu(scores, 0.2)
        scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = torch.nan_to_num(attn, nan=0.0)
        agg = attn @ wh
        out = x + F.elu(self.out(agg))
        return out * mask[..., None]


# metres -> O(1) network inputs
COORD_SCALE = 0.1
# metres per frame -> O(1)
DISP_SCALE = 0.5
# metres per frame^2 -> O(1)
ACC_SCALE = 5.0


class SpatialEncoder(nn.Module):
    """Per-polyline GRU over waypoints, then graph attention across polylines."""

    def __init__(self, map_width: int = 4, d_model: int = 32):
        super().__init__()
        self.d_model = d_model
        self.embed = nn.Linear(map_width, d_model)
        self.gru = nn.GRU(d_model, d_model, batch_first=True)
        self.gat = GraphAttention(d_model)

    def forward(self, map_points: torch.Tensor, map_mask: torch.Tensor) -> torch.Tensor:
        # map_points: (B, N_m, n, W_m)
        if map_points.shape[1] == 0:
            raise EncodingError("spatial encoder needs at least one polyline")
        b, n_m, n, w = map_points.shape
        x = torch.relu(self.embed(COORD_SCALE * map_points.reshape(b * n_m, n, w)))
        _, h = self.gru(x)
        tokens = h[-1].reshape(b, n_m, -1) * map_mask[..., None]
        return self.gat(tokens, map_mask)


class TemporalEncoder(nn.Module):
    """One-layer GRU shared by the target and every neighbour track.

    Each frame is fed as [position, first difference, second difference], each
    rescaled to O(1).
    """

    def __init__(self, state_width: int = 2, d_model: int = 32):
        super().__init__()
        self.gru = nn.GRU(3 * state_width, d_model, batch_first=True)

    def forward(self, hist: torch.Tensor) -> torch.Tensor:
        # hist: (..., H, W_a) -> (..., D)
        if hist.shape[-2] == 0:
            raise EncodingError("temporal encoder needs at least one history frame")
        lead = hist.shape[:-2]
        flat = hist.reshape(-1, *hist.shape[-2:])
        if flat.shape[0] == 0:
            return hist.new_zeros(*lead, self.gru.hidden_size)
        disp = torch.diff(flat, dim=-2, prepend=flat[:, :1])
        acc = torch.diff(disp, dim=-2, prepend=disp[:, :1])
        x = torch.cat([COORD_SCALE * flat, DISP_SCALE * disp, ACC_SCALE * acc], dim=-1)
        _, h = self.gru(x)
        return h[-1].reshape(*lead, -1)


class BevEncoder(nn.Module):
    """Multi-kernel convolutions per semantic layer, pooled to a fixed grid, then an MLP."""

    def __init__(self, d_model: int = 32, kernel_sizes=(3, 5, 7), channels: int = 4, grid: int = 4):
        super().__init__()
        self.grid = grid
        self.convs = nn.ModuleList()
        for _layer in range(3):
            self.convs.append(nn.ModuleList(
                nn.Conv2d(1, channels, k, padding=k // 2, stride=2) for k in kernel_sizes
            ))
        width = 3 * len(kernel_sizes) * channels
        self.mlp = nn.Sequential(nn.Linear(width, d_model), nn.ReLU(), nn.Linear(d_model, d_model))

    def forward(self, bev: torch.Tensor) -> torch.Tensor:
        # bev: (B, 3, H, W) -> (B, grid*grid, D)
        if bev.dim() != 4 or bev.shape[1] != 3:
            raise EncodingError("BEV input must have shape (B, 3, H, W)")
        feats = []
        for layer, convs in enumerate(self.convs):
            x = bev[:, layer : layer + 1]
            for conv in convs:
                y = torch.relu(conv(x))
                feats.append(F.adaptive_avg_pool2d(y, self.grid))
        f = torch.cat(feats, dim=1)  # (B, C, g, g)
        f = f.flatten(2).transpose(1, 2)
        return self.mlp(f)


def build_encoders(cfg: EncoderConfig) -> tuple[SpatialEncoder, TemporalEncoder, BevEncoder]:
    return (
        SpatialEncoder(cfg.map_width, cfg.d_model),
        TemporalEncoder(cfg.state_width, cfg.d_model),
        BevEncoder(cfg.d_model, cfg.kernel_sizes, cfg.bev_channels, cfg.pyramid_grid),
    )


# Scene-level wrappers ------------------------------------------------------


def encode_spatial(polylines, encoder: SpatialEncoder) -> SpatialTokens:
    """Encode a list of MapPolyline into one D-token per polyline."""
    if len(polylines) == 0:
        raise EncodingError("empty map: supply at least one polyline (a null placeholder is fine)")
    shapes = {pl.points.shape for pl in polylines}
    if len(shapes) != 1:
        raise EncodingError("all polylines must share the same waypoint count")
    param = next(encoder.parameters())
    pts = torch.as_tensor(np.stack([pl.points for pl in polylines]), dtype=param.dtype)[None]
    mask = torch.ones(1, len(polylines), dtype=torch.bool)
    return SpatialTokens(encoder(pts, mask)[0])


def encode_temporal(target, neighbors, encoder: TemporalEncoder, state_width: int = 2) -> TemporalTokens:
    """Final GRU state for the target history and each neighbour history."""
    if target.history_len == 0:
        raise EncodingError("zero-length history")
    dtype = next(encoder.parameters()).dtype
    x = torch.as_tensor(target.history[:, :state_width], dtype=dtype)
    tgt = encoder(x[None])[0]
    if neighbors:
        nb = torch.as_tensor(np.stack([n.history[:, :state_width] for n in neighbors]), dtype=dtype)
        nbt = encoder(nb)
    else:
        nbt = torch.zeros(0, encoder.gru.hidden_size, dtype=dtype)
    return TemporalTokens(tgt, nbt, torch.ones(len(neighbors), dtype=torch.bool))


def encode_bev(bev, encoder: BevEncoder) -> BevTokens:
    """Encode a BevRaster into a fixed number of tokens."""
    shapes = {bev.agent.shape, bev.map.shape, bev.raster.shape}
    if len(shapes) != 1:
        raise SceneValidationError("bev: semantic layers have mismatched shapes")
    dtype = next(encoder.parameters()).dtype
    x = torch.as_tensor(bev.stack(), dtype=dtype)[None]
    return BevTokens(encoder(x)[0])
