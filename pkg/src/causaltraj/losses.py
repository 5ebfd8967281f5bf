"""Intention and trajectory losses plus optional learnable loss weights."""
from __future__ import annotations

import math
import warnings

import torch
import torch.nn.functional as F
from torch import nn

from causaltraj.config import DATASET_KINDS, LossWeight
from causaltraj.decoder import MixturePrediction, mixture_nll
from causaltraj.exceptions import ConfigError

PROB_FLOOR = 1e-12


def intention_loss(pred_probs: torch.Tensor, gt_maneuver) -> torch.Tensor:
    """Cross-entropy against a one-hot maneuver label: ``-log p[gt]``.

    Batched input (B, K) returns the batch mean.
    """
    p = torch.as_tensor(pred_probs)
    gt = torch.as_tensor(gt_maneuver, dtype=torch.long)
    picked = p[gt] if p.dim() == 1 else p[torch.arange(p.shape[0]), gt]
    if torch.any(picked < PROB_FLOOR):
        warnings.warn("zero probability at the labelled maneuver; clamping to 1e-12", stacklevel=2)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def _masked_ade(means: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
    # means (..., t_f, 2), gt (..., t_f, 2) -> (...)
    dist = torch.linalg.vector_norm(means - gt, dim=-1)
    if valid is None:
        return dist.mean(-1)
    v = valid.to(dist.dtype)
    return (dist * v).sum(-1) / v.sum(-1).clamp_min(1.0)


def _batched(pred: MixturePrediction, gt, maneuver, valid):
    if pred.trajectories.dim() == 3:
        pred = MixturePrediction(pred.maneuver_probs[None], pred.trajectories[None])
        gt = gt[None]
        maneuver = torch.as_tensor([int(maneuver)])
        valid = None if valid is None else valid[None]
    return pred, gt, torch.as_tensor(maneuver, dtype=torch.long), valid


def base_displacement_loss(pred: MixturePrediction, gt: torch.Tensor, maneuver, kind: str,
                           valid: torch.Tensor | None = None, k: int = 3, classes=None,
                           class_weights: dict[str, float] | None = None) -> torch.Tensor:
    """The dataset-dependent displacement term, averaged over the batch.

    nuscenes-like: minADE_k over the k most probable modes; apolloscape-like:
    class-weighted ADE of the labelled mode; highway-like and synthetic: RMSE of
    the labelled mode.
    """
    if kind not in DATASET_KINDS:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    pred, gt, maneuver, valid = _batched(pred, gt, maneuver, valid)
    b, kk = pred.maneuver_probs.shape
    means = pred.means
    labelled = means[torch.arange(b), maneuver]
    if kind == "nuscenes-like":
        k = min(k, kk)
        top = torch.topk(pred.maneuver_probs, k, dim=-1).indices
        cand = torch.gather(means, 1, top[..., None, None].expand(-1, -1, *means.shape[-2:]))
        ade = _masked_ade(cand, gt[:, None], None if valid is None else valid[:, None])
        return ade.min(dim=-1).values.mean()
    if kind == "apolloscape-like":
        ade = _masked_ade(labelled, gt, valid)
        if not class_weights or classes is None:
            return ade.mean()
        total = ade.new_zeros(())
        for c, wc in class_weights.items():
            sel = torch.as_tensor([x == c for x in classes])
            if wc and sel.any():
                total = total + wc * ade[sel].mean()
        return total
    sq = (labelled - gt).pow(2).sum(-1)
    if valid is not None:
        v = valid.to(sq.dtype)
        return torch.sqrt((sq * v).sum() / v.sum().clamp_min(1.0) + 1e-12)
    return torch.sqrt(sq.mean() + 1e-12)


def trajectory_loss(pred: MixturePrediction, gt: torch.Tensor, maneuver, kind: str,
                    lambda_0, lambda_1, valid: torch.Tensor | None = None, detach_means: bool = False,
                    **kw) -> torch.Tensor:
    """``lambda_0 * L_0 + lambda_1 * NLL`` with the NLL averaged over the batch.

    ``detach_means`` stops the NLL gradient into the means so that only the
    spreads learn from it.
    """
    l0 = base_displacement_loss(pred, gt, maneuver, kind, valid, **kw)
    nll_pred = pred
    if detach_means:
        tr = torch.cat([pred.trajectories[..., :2].detach(), pred.trajectories[..., 2:]], dim=-1)
        nll_pred = MixturePrediction(pred.maneuver_probs, tr)
    nll = mixture_nll(nll_pred, gt, maneuver, valid).mean()
    return lambda_0 * l0 + lambda_1 * nll


class LossWeights(nn.Module):
    """λ_0, λ_1, λ_int, λ_traj.

    Learnable weights are softplus-parameterised so they stay positive. Within
    each pair (λ_0, λ_1) and (λ_int, λ_traj) the learnable members are rescaled
    to keep their initial sum when both are learnable, otherwise minimising the
    loss would just drive both weights to zero.
    """

    NAMES = ("lambda_0", "lambda_1", "lambda_int", "lambda_traj")
    PAIRS = (("lambda_0", "lambda_1"), ("lambda_int", "lambda_traj"))

    def __init__(self, **weights: LossWeight):
        super().__init__()
        self.learnable = {}
        self.initial = {}
        for name in self.NAMES:
            w = weights.get(name, LossWeight())
            self.learnable[name] = w.learnable
            self.initial[name] = float(w.value)
            if w.learnable:
                # inverse softplus of the initial value
                raw = math.log(math.expm1(w.value))
                self.register_parameter(name, nn.Parameter(torch.tensor(raw, dtype=torch.float64)))
            else:
                self.register_buffer(name, torch.tensor(float(w.value), dtype=torch.float64))

    def value(self, name: str) -> torch.Tensor:
        t = getattr(self, name)
        if not self.learnable[name]:
            return t
        pair = next(p for p in self.PAIRS if name in p)
        group = [n for n in pair if self.learnable[n]]
        if len(group) == 1:
            return F.softplus(t)
        total = sum(F.softplus(getattr(self, n)) for n in group)
        budget = sum(self.initial[n] for n in group)
        return F.softplus(t) * (budget / total)

    def values(self) -> dict[str, float]:
        return {n: float(self.value(n).detach()) for n in self.NAMES}
