"""Causal decoder: composite tokens, backdoor averaging, counterfactual
subtraction and the maneuver-conditioned bivariate-Gaussian mixture head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from causaltraj.exceptions import NumericalError, UsageError

RHO_LIMIT = 0.999
SIGMA_FLOOR = 1e-4
LOG_SIGMA_LIMIT = 10.0


@dataclass
class CompositeToken:
    values: torch.Tensor  # (..., K, D)
    kind: str = "factual"


@dataclass
class MixturePrediction:
    """K maneuver probabilities and per-mode Gaussian trajectories.

    ``trajectories[..., k, t]`` = (mu_x, mu_y, sigma_x, sigma_y, rho).
    """

    maneuver_probs: torch.Tensor
    trajectories: torch.Tensor

    @property
    def means(self) -> torch.Tensor:
        return self.trajectories[..., :2]

    def check(self, atol: float = 1e-6) -> None:
        p, tr = self.maneuver_probs, self.trajectories
        if not (torch.all(torch.isfinite(p)) and torch.all(torch.isfinite(tr))):
            raise NumericalError("prediction contains non-finite values")
        if torch.any(p < 0) or torch.any((p.sum(-1) - 1).abs() > atol):
            raise NumericalError("maneuver probabilities are not a distribution")
        if torch.any(tr[..., 2:4] <= 0):
            raise NumericalError("sigma must be positive")
        if torch.any(tr[..., 4].abs() >= 1):
            raise NumericalError("|rho| must be < 1")

    def to_json(self) -> dict:
        return {"probs": self.maneuver_probs.detach().double().tolist(),
                "modes": self.trajectories.detach().double().tolist()}

    def scene(self, i: int) -> "MixturePrediction":
        return MixturePrediction(self.maneuver_probs[i], self.trajectories[i])


class Composer(nn.Module):
    """Per-mode MLP over [query row, fusion feature]."""

    def __init__(self, d_model: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * d_model, d_model), nn.ReLU(), nn.Linear(d_model, d_model))

    def forward(self, q: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        # q: (..., K, D); g: (..., D)
        g = g[..., None, :].expand_as(q)
        return self.net(torch.cat([q, g], dim=-1))


def compose_tokens(q, g, module: Composer, kind: str = "factual") -> CompositeToken:
    qv = q if isinstance(q, torch.Tensor) else q.values
    gv = g if isinstance(g, torch.Tensor) else g.values
    return CompositeToken(module(qv, gv), kind)


def backdoor_average(tokens) -> CompositeToken:
    """Uniform-prior average over backdoor samples, P(s_i) = 1/n.

    Accepts a list of CompositeToken or a stacked tensor whose sample axis is
    ``-3``.
    """
    if isinstance(tokens, torch.Tensor):
        if tokens.shape[-3] == 0:
            raise ValueError("backdoor average over an empty set")
        return CompositeToken(tokens.sum(dim=-3) / tokens.shape[-3])
    tokens = list(tokens)
    if not tokens:
        raise ValueError("backdoor average over an empty set")
    kinds = {t.kind for t in tokens}
    if len(kinds) != 1:
        raise UsageError("cannot average factual and counterfactual tokens together")
    stacked = torch.stack([t.values for t in tokens], dim=-3)
    return CompositeToken(stacked.sum(dim=-3) / len(tokens), kinds.pop())


def causal_combine(factual: CompositeToken, counterfactual: CompositeToken) -> CompositeToken:
    """Y = Y_fact - Y_cf."""
    if factual.kind != "factual" or counterfactual.kind != "counterfactual":
        raise UsageError(f"expected (factual, counterfactual), got ({factual.kind}, {counterfactual.kind})")
    return CompositeToken(factual.values - counterfactual.values, "combined")


class TrajectoryDecoder(nn.Module):
    """GRU rollout of t_f steps per mode plus a maneuver logit head."""

    def __init__(self, d_model: int, t_f: int, pos_scale: float = 1.0, num_modes: int = 3):
        super().__init__()
        self.t_f = t_f
        self.pos_scale = pos_scale
        self.init = nn.Linear(d_model, d_model)
        self.cell = nn.GRUCell(d_model, d_model)
        self.head = nn.Linear(d_model, 5)
        # maneuver logits read all K mode tokens jointly
        self.logit = nn.Sequential(nn.Linear(num_modes * d_model, d_model), nn.ReLU(),
                                   nn.Linear(d_model, num_modes))
        # when set, spread gradients stop at the head and never reach the shared rollout state
        self.isolate_spreads = False

    def forward(self, tokens: torch.Tensor):
        """tokens: (B, K, D) -> (logits (B, K), raw params (B, K, t_f, 5))."""
        b, k, d = tokens.shape
        x = tokens.reshape(b * k, d)
        h = torch.tanh(self.init(x))
        steps = []
        for _ in range(self.t_f):
            h = self.cell(x, h)
            if self.isolate_spreads and torch.is_grad_enabled():
                w, bias = self.head.weight, self.head.bias
                steps.append(torch.cat([F.linear(h, w[:2], bias[:2]), F.linear(h.detach(), w[2:], bias[2:])], -1))
            else:
                steps.append(self.head(h))
        raw = torch.stack(steps, dim=1).reshape(b, k, self.t_f, 5)
        logits = self.logit(tokens.reshape(b, k * d))
        return logits, raw

    def activate(self, logits: torch.Tensor, raw: torch.Tensor,
                 anchor: torch.Tensor | None = None) -> MixturePrediction:
        """``anchor`` (B, t_f, 2), if given, is a reference path the modes are offsets from."""
        mu = torch.cumsum(raw[..., :2] * self.pos_scale, dim=-2)
        if anchor is not None:
            mu = mu + anchor[..., None, :, :]
        # log-spread parameterisation adapts to large initial errors in a few steps
        sigma = torch.exp(raw[..., 2:4].clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT)) * self.pos_scale + SIGMA_FLOOR
        rho = RHO_LIMIT * torch.tanh(raw[..., 4:5])
        probs = torch.softmax(logits, dim=-1)
        return MixturePrediction(probs, torch.cat([mu, sigma, rho], dim=-1))


def constant_velocity_path(hist: torch.Tensor, valid: torch.Tensor, t_f: int) -> torch.Tensor:
    """Extrapolate the mean displacement over valid consecutive history frames.

    hist (B, H, >=2), valid (B, H) -> (B, t_f, 2). Starts at the last frame.
    """
    pos = hist[..., :2]
    ok = (valid[..., 1:] & valid[..., :-1]).to(pos.dtype)
    disp = (pos[..., 1:, :] - pos[..., :-1, :]) * ok[..., None]
    vel = disp.sum(-2) / ok.sum(-1, keepdim=True).clamp_min(1.0)
    steps = torch.arange(1, t_f + 1, dtype=pos.dtype)
    return pos[..., -1:, :] + steps[:, None] * vel[..., None, :]


def decode_trajectories(combined, module: TrajectoryDecoder) -> MixturePrediction:
    tok = combined if isinstance(combined, torch.Tensor) else combined.values
    if not torch.all(torch.isfinite(tok)):
        raise NumericalError("composite token is not finite")
    squeeze = tok.dim() == 2
    if squeeze:
        tok = tok[None]
    pred = module.activate(*module(tok))
    if not torch.all(torch.isfinite(pred.trajectories)):
        raise NumericalError("decoder produced non-finite parameters")
    if squeeze:
        pred = pred.scene(0)
    return pred


# ----------------------------------------------------------------- likelihoods


def bivariate_nll(params: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-frame negative log density; params (..., 5), gt (..., 2)."""
    mx, my, sx, sy, rho = params.unbind(-1)
    if torch.any(sx <= 0) or torch.any(sy <= 0):
        raise ValueError("sigma must be positive")
    dx = (gt[..., 0] - mx) / sx
    dy = (gt[..., 1] - my) / sy
    one_m = 1 - rho**2
    z = dx**2 + dy**2 - 2 * rho * dx * dy
    return math.log(2 * math.pi) + torch.log(sx) + torch.log(sy) + 0.5 * torch.log(one_m) + z / (2 * one_m)


def _pick(pred: MixturePrediction, maneuver) -> torch.Tensor:
    tr = pred.trajectories
    if tr.dim() == 3:
        return tr[int(maneuver)]
    idx = torch.as_tensor(maneuver, dtype=torch.long)
    return tr[torch.arange(tr.shape[0]), idx]


def mixture_nll(pred: MixturePrediction, gt_future, maneuver, valid=None) -> torch.Tensor:
    """NLL of the future under the labelled maneuver's mode, summed over frames.

    Batched inputs return one value per scene.
    """
    gt = gt_future.points if hasattr(gt_future, "points") else gt_future
    if valid is None and hasattr(gt_future, "valid"):
        valid = gt_future.valid
    tr = _pick(pred, maneuver)
    gt = torch.as_tensor(np.asarray(gt) if not isinstance(gt, torch.Tensor) else gt, dtype=tr.dtype)
    if gt.shape[-2] != tr.shape[-2]:
        raise ValueError(f"ground truth has {gt.shape[-2]} frames, prediction {tr.shape[-2]}")
    nll = bivariate_nll(tr, gt)
    if valid is not None:
        nll = nll * torch.as_tensor(valid, dtype=torch.bool)
    return nll.sum(-1)


def full_mixture_nll(pred: MixturePrediction, gt: torch.Tensor, valid=None) -> torch.Tensor:
    """-log sum_k p_k prod_t N(gt_t; mode k); batched over scenes."""
    tr = pred.trajectories
    nll = bivariate_nll(tr, gt[..., None, :, :].expand(*tr.shape[:-1], 2))
    if valid is not None:
        nll = nll * valid[..., None, :]
    log_joint = torch.log(pred.maneuver_probs.clamp_min(1e-12)) - nll.sum(-1)
    return -torch.logsumexp(log_joint, dim=-1)
