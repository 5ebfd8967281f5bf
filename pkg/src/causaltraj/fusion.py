"""Cross-modal progressive fusion and dual-scale (target / social grid) fusion."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import torch
from torch import nn

from causaltraj.config import FusionConfig


@dataclass
class AnchorQuery:
    values: torch.Tensor  # (..., K, D)
    stage: int = 0
    history: list[torch.Tensor] = field(default_factory=list, repr=False)
    skipped: bool = False


@dataclass
class FusionFeature:
    values: torch.Tensor  # (..., D)


class RefineStep(nn.Module):
    """One refinement: the K anchor rows attend over [context, anchors], then an FFN.

    Both updates are residual, so zeroing ``out`` and the last FFN layer makes
    the step an identity map.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.ffn = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.ReLU(), nn.Linear(2 * d_model, d_model))

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        # query: (..., K, D); context: (..., D)
        tokens = torch.cat([context[..., None, :], query], dim=-2)
        q, k, v = self.q(query), self.k(tokens), self.v(tokens)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        x = query + self.out(att @ v)
        return x + self.ffn(x)


class ProgressiveFusion(nn.Module):
    def __init__(self, d_model: int, num_modes: int):
        super().__init__()
        # anchor-free initial query, one row per maneuver mode
        self.q0 = nn.Parameter(torch.randn(num_modes, d_model) * 0.1)
        self.step = RefineStep(d_model)

    def initial(self, lead: tuple[int, ...]) -> AnchorQuery:
        return AnchorQuery(self.q0.expand(*lead, *self.q0.shape), 0)

    def forward(self, context: torch.Tensor, t_rec: int, start: AnchorQuery | None = None,
                keep_history: bool = False) -> AnchorQuery:
        """Refine until stage ``t_rec``; ``start`` resumes from a stored stage."""
        q = start if start is not None else self.initial(tuple(context.shape[:-1]))
        if t_rec == 0:
            warnings.warn("T_rec = 0: returning the initial query unrefined", stacklevel=2)
            return AnchorQuery(q.values, q.stage, [], skipped=True)
        values, history = q.values, []
        for _ in range(q.stage, t_rec):
            values = self.step(values, context)
            if keep_history:
                history.append(values)
        return AnchorQuery(values, t_rec, history)


def progressive_fuse(context, q0: AnchorQuery, t_rec: int, module: ProgressiveFusion) -> AnchorQuery:
    """Refine ``q0`` against one context token for ``t_rec`` stages."""
    ctx = context if isinstance(context, torch.Tensor) else context.values
    if t_rec == 0:
        warnings.warn("T_rec = 0: returning the initial query unrefined", stacklevel=2)
        return AnchorQuery(q0.values, q0.stage, [], skipped=True)
    return module(ctx, t_rec, start=q0, keep_history=True)


class DualScaleFusion(nn.Module):
    """Fine scale: 1-D convolutions over the target's displacements.
    Coarse scale: neighbour features scattered on a social grid around the
    target, then 2-D convolutions. Both use displacements / relative
    positions only, so a global translation leaves the output unchanged.
    """

    def __init__(self, d_model: int, history_len: int, cfg: FusionConfig | None = None):
        super().__init__()
        cfg = cfg or FusionConfig()
        c = cfg.channels
        self.grid = tuple(cfg.grid)
        self.cell = cfg.cell_size
        self.fine = nn.Sequential(
            nn.Conv1d(2, c, 3, padding=1), nn.ReLU(), nn.Conv1d(c, c, 3, padding=1), nn.ReLU()
        )
        self.nbr_embed = nn.Linear(2 * max(history_len - 1, 1), c, bias=False)
        # no biases so that an empty grid maps to an exactly zero coarse feature
        self.coarse = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1, bias=False), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1, bias=False), nn.ReLU(),
        )
        self.merge = nn.Sequential(nn.Linear(2 * c, d_model), nn.ReLU(), nn.Linear(d_model, d_model))

    @staticmethod
    def displacements(hist: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Frame-to-frame displacements, zero wherever either frame is missing."""
        pos = hist[..., :2]
        disp = pos[..., 1:, :] - pos[..., :-1, :]
        ok = valid[..., 1:] & valid[..., :-1]
        return disp * ok[..., None]

    def target_features(self, target_hist, target_valid) -> torch.Tensor:
        d = self.displacements(target_hist, target_valid) * 0.5  # m/step -> O(1)
        return self.fine(d.transpose(-1, -2)).amax(dim=-1)

    def social_grid(self, target_hist, target_valid, nbr_hist, nbr_valid, nbr_mask) -> torch.Tensor:
        b, n_a = nbr_mask.shape
        gx, gy = self.grid
        c = self.nbr_embed.out_features
        grid = target_hist.new_zeros(b, gx * gy, c)
        if n_a == 0:
            return grid.transpose(1, 2).reshape(b, c, gx, gy)
        feats = self.nbr_embed(0.5 * self.displacements(nbr_hist, nbr_valid).flatten(2))
        rel = nbr_hist[:, :, -1, :2] - target_hist[:, None, -1, :2]
        ix = torch.floor(rel[..., 0] / self.cell + gx / 2).long()
        iy = torch.floor(rel[..., 1] / self.cell + gy / 2).long()
        inside = (ix >= 0) & (ix < gx) & (iy >= 0) & (iy < gy) & nbr_mask & nbr_valid[:, :, -1]
        cell = (ix.clamp(0, gx - 1) * gy + iy.clamp(0, gy - 1))
        feats = feats * inside[..., None]
        grid = grid.scatter_add(1, cell[..., None].expand(-1, -1, c), feats)
        return grid.transpose(1, 2).reshape(b, c, gx, gy)

    def forward(self, target_hist, target_valid, nbr_hist, nbr_valid, nbr_mask) -> torch.Tensor:
        fine = self.target_features(target_hist, target_valid)
        grid = self.social_grid(target_hist, target_valid, nbr_hist, nbr_valid, nbr_mask)
        coarse = self.coarse(grid).amax(dim=(-1, -2))
        return self.merge(torch.cat([fine, coarse], dim=-1))

    def target_branch(self, target_hist, target_valid) -> torch.Tensor:
        """Output with an empty neighbourhood."""
        fine = self.target_features(target_hist, target_valid)
        return self.merge(torch.cat([fine, torch.zeros_like(fine)], dim=-1))


def dual_scale_fuse(batch, module: DualScaleFusion) -> FusionFeature:
    return FusionFeature(module(batch.target_hist, batch.target_valid, batch.nbr_hist,
                                batch.nbr_valid, batch.nbr_mask))


def counterfactual_dual_scale(batch, module: DualScaleFusion) -> FusionFeature:
    return dual_scale_fuse(batch.counterfactual(), module)
