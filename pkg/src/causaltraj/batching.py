"""Collate scenes into padded tensors with explicit masks."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np
import torch

from causaltraj.data import Scene


@dataclass
class SceneBatch:
    target_hist: torch.Tensor   # (B, H, W_a)
    target_valid: torch.Tensor  # (B, H) bool
    nbr_hist: torch.Tensor      # (B, N_a, H, W_a)
    nbr_valid: torch.Tensor     # (B, N_a, H) bool
    nbr_mask: torch.Tensor      # (B, N_a) bool
    map_points: torch.Tensor    # (B, N_m, n, W_m)
    map_mask: torch.Tensor      # (B, N_m) bool
    bev: torch.Tensor           # (B, 3, H_b, W_b)
    future: torch.Tensor        # (B, t_f, 2)
    future_valid: torch.Tensor  # (B, t_f) bool
    maneuver: torch.Tensor      # (B,) long, -1 when unlabeled
    classes: list[str]
    ids: list[str]
    dt: float

    def __len__(self) -> int:
        return self.target_hist.shape[0]

    def with_target_history(self, hist: torch.Tensor, valid: torch.Tensor | None = None) -> "SceneBatch":
        return replace(self, target_hist=hist, target_valid=self.target_valid if valid is None else valid)

    def counterfactual(self) -> "SceneBatch":
        """do(X = 0): the target history replaced by the all-zero sequence."""
        return self.with_target_history(torch.zeros_like(self.target_hist),
                                        torch.ones_like(self.target_valid))

    def to(self, dtype: torch.dtype) -> "SceneBatch":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, torch.Tensor) and v.is_floating_point():
                kw[f.name] = v.to(dtype)
        return replace(self, **kw)

    def select(self, idx: Sequence[int]) -> "SceneBatch":
        idx_t = torch.as_tensor(list(idx), dtype=torch.long)
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, torch.Tensor):
                kw[f.name] = v[idx_t]
            elif isinstance(v, list):
                kw[f.name] = [v[i] for i in idx]
        return replace(self, **kw)


def collate(scenes: Sequence[Scene], state_width: int = 2, dtype: torch.dtype = torch.float32) -> SceneBatch:
    if not scenes:
        raise ValueError("cannot collate an empty scene list")
    b = len(scenes)
    h = scenes[0].t_h + 1
    t_f = scenes[0].t_f
    for s in scenes:
        if s.t_h + 1 != h or s.t_f != t_f:
            raise ValueError(f"scene {s.scene_id}: t_h/t_f differ within the batch")
    n_a = max(len(s.neighbors) for s in scenes)
    n_m = max(max(len(s.map), 1) for s in scenes)
    n_pts = max((pl.points.shape[0] for s in scenes for pl in s.map), default=2)
    w_m = max((pl.points.shape[1] for s in scenes for pl in s.map), default=4)
    bev_shape = next((s.bev.agent.shape for s in scenes if s.bev is not None), (64, 64))

    target_hist = np.zeros((b, h, state_width))
    target_valid = np.zeros((b, h), bool)
    nbr_hist = np.zeros((b, n_a, h, state_width))
    nbr_valid = np.zeros((b, n_a, h), bool)
    nbr_mask = np.zeros((b, n_a), bool)
    map_points = np.zeros((b, n_m, n_pts, w_m))
    map_mask = np.zeros((b, n_m), bool)
    bev = np.zeros((b, 3, *bev_shape))
    future = np.zeros((b, t_f, 2))
    future_valid = np.zeros((b, t_f), bool)
    maneuver = np.full(b, -1, np.int64)

    for i, s in enumerate(scenes):
        target_hist[i] = s.target.history[:, :state_width]
        target_valid[i] = s.target.history_valid
        future[i] = s.target.trajectory.points[h:]
        future_valid[i] = s.target.future_valid
        for j, nb in enumerate(s.neighbors):
            nbr_hist[i, j] = nb.history[:, :state_width]
            nbr_valid[i, j] = nb.history_valid
            nbr_mask[i, j] = True
        if s.map:
            for j, pl in enumerate(s.map):
                pts = pl.points
                if len(pts) < n_pts:
                    # pad by repeating the last waypoint
                    pts = np.concatenate([pts, np.repeat(pts[-1:], n_pts - len(pts), axis=0)])
                map_points[i, j, :, : pts.shape[1]] = pts
                map_mask[i, j] = True
        else:
            # null placeholder polyline so the spatial encoder always has one token
            map_mask[i, 0] = True
        if s.bev is not None:
            bev[i] = s.bev.stack()
        if s.maneuver_label is not None:
            maneuver[i] = s.maneuver_label

    t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return SceneBatch(
        t(target_hist), torch.as_tensor(target_valid), t(nbr_hist), torch.as_tensor(nbr_valid),
        torch.as_tensor(nbr_mask), t(map_points), torch.as_tensor(map_mask), t(bev), t(future),
        torch.as_tensor(future_valid), torch.as_tensor(maneuver),
        [s.target.class_label for s in scenes], [s.scene_id for s in scenes], scenes[0].dt,
    )
