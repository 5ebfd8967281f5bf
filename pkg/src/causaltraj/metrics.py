"""Displacement metrics. Inputs are numpy arrays or tensors in metres."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

METRIC_NAMES = ("ade", "fde", "min_ade_k", "rmse", "wsade", "wsfde")
AGENT_CLASSES = ("vehicle", "pedestrian", "bicycle")
# ApolloScape trajectory challenge convention
DEFAULT_CLASS_WEIGHTS = {"vehicle": 0.20, "pedestrian": 0.58, "bicycle": 0.22}


@dataclass
class MetricSpec:
    name: str
    k: int = 1
    class_weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in METRIC_NAMES:
            raise ValueError(f"unknown metric {self.name!r}; expected one of {', '.join(METRIC_NAMES)}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.class_weights:
            w = np.array(list(self.class_weights.values()), dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("class weights must be nonnegative and sum to 1")


def _np(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _np(pred)[..., :2], _np(gt)[..., :2]
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if p.shape[-2] < 1:
        raise ValueError("trajectories need at least one frame")
    return p, g


def displacement(pred, gt) -> np.ndarray:
    p, g = _pair(pred, gt)
    return np.linalg.norm(p - g, axis=-1)


def ade(pred, gt) -> float | np.ndarray:
    """Mean Euclidean displacement over frames (per leading index when batched)."""
    return displacement(pred, gt).mean(-1)


def fde(pred, gt) -> float | np.ndarray:
    return displacement(pred, gt)[..., -1]


def min_ade_k(modes, probs, gt, k: int) -> float | np.ndarray:
    """Minimum ADE over the ``k`` most probable of K modes.

    modes (..., K, T, 2); probs (..., K); gt (..., T, 2). Ties in probability
    keep the lower mode index.
    """
    m, p, g = _np(modes)[..., :2], _np(probs), _np(gt)[..., :2]
    big_k = m.shape[-3]
    if k < 1 or k > big_k:
        raise ValueError(f"k must lie in [1, {big_k}], got {k}")
    order = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    errs = ade(m, np.broadcast_to(g[..., None, :, :], m.shape))
    return np.take_along_axis(errs, order, axis=-1).min(-1)


def top_mode(modes, probs) -> np.ndarray:
    m, p = _np(modes), _np(probs)
    idx = np.argmax(p, axis=-1)
    return np.take_along_axis(m, idx[..., None, None, None], axis=-3)[..., 0, :, :]


def rmse_by_horizon(preds, gts, horizons: Sequence[int]) -> np.ndarray:
    """Root of the mean squared displacement over scenes at each 1-based horizon frame."""
    p, g = _pair(preds, gts)
    if p.ndim == 2:
        p, g = p[None], g[None]
    t_f = p.shape[-2]
    out = []
    for h in horizons:
        if not 1 <= int(h) <= t_f:
            raise ValueError(f"horizon frame {h} outside 1..{t_f}")
        sq = ((p[:, int(h) - 1] - g[:, int(h) - 1]) ** 2).sum(-1)
        out.append(np.sqrt(sq.mean()))
    return np.array(out)


def horizon_frames(horizons_s: Sequence[float], dt: float, t_f: int) -> list[int]:
    """Seconds to 1-based frame indices; horizons past t_f are dropped."""
    frames = [int(round(h / dt)) for h in horizons_s]
    return [f for f in frames if 1 <= f <= t_f]


def weighted_sum(per_class: Mapping[str, float], weights: Mapping[str, float]) -> float:
    total = 0.0
    for c, w in weights.items():
        if w == 0:
            continue
        if c not in per_class:
            raise ValueError(f"class {c!r} has weight {w} but no scenes")
        total += w * per_class[c]
    return float(total)


def wsade(per_class_ade: Mapping[str, float], weights: Mapping[str, float] | None = None) -> float:
    return weighted_sum(per_class_ade, weights or DEFAULT_CLASS_WEIGHTS)


def wsfde(per_class_fde: Mapping[str, float], weights: Mapping[str, float] | None = None) -> float:
    return weighted_sum(per_class_fde, weights or DEFAULT_CLASS_WEIGHTS)


def per_class_mean(values: np.ndarray, classes: Sequence[str]) -> dict[str, float]:
    out: dict[str, float] = {}
    arr = np.asarray(values, dtype=float)
    for c in sorted(set(classes)):
        sel = np.array([x == c for x in classes])
        out[c] = float(arr[sel].mean())
    return out
