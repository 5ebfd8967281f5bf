"""Causal wrapper for arbitrary predictors plus a small reference baseline.

A baseline exposes ``encode(batch, spatial_tokens) -> context`` and
``decode(context) -> MixturePrediction``. Wrapping swaps the baseline's own
spatial tokens for diffusion-sampled ones, averages over the samples and
removes the zero-history (counterfactual) response.
"""
from __future__ import annotations

from abc import ABC, abstractmethod

import torch
import torch.nn.functional as F
from torch import nn

from causaltraj.batching import SceneBatch
from causaltraj.config import EncoderConfig
from causaltraj.decoder import RHO_LIMIT, SIGMA_FLOOR, MixturePrediction
from causaltraj.diffusion import Denoiser, DiffusionSchedule, make_schedule, sample_chains
from causaltraj.encoders import SpatialEncoder
from causaltraj.exceptions import UsageError
from causaltraj.model import average_predictions, scene_generators
from causaltraj.training import Checkpoint

COMBINE_MODES = ("context", "output")


class BaselinePredictor(ABC):
    """Interface a predictor implements to be wrapped."""

    #: when True, ``encode``'s context supports subtraction (context-space combination)
    exposes_context: bool = True

    @abstractmethod
    def spatial_tokens(self, batch: SceneBatch) -> torch.Tensor:
        """Spatial tokens (B, N_m, D) the predictor would use by itself."""

    @abstractmethod
    def encode(self, batch: SceneBatch, spatial_tokens: torch.Tensor) -> torch.Tensor:
        """Context vector (B, C) given a spatial token set (B, N_m, D)."""

    @abstractmethod
    def decode(self, context: torch.Tensor) -> MixturePrediction:
        ...

    def predict(self, batch: SceneBatch) -> MixturePrediction:
        return self.decode(self.encode(batch, self.spatial_tokens(batch)))


class ConstantVelocityBaseline(nn.Module, BaselinePredictor):
    """Constant-velocity extrapolation plus a learned residual per maneuver.

    Context = [last position, mean velocity, linear history features, map
    feature]. The first three blocks are bias-free functions of the target
    history, so they vanish for the all-zero history.
    """

    def __init__(self, history_len: int = 7, t_f: int = 10, num_modes: int = 3,
                 encoders: EncoderConfig | None = None, hidden: int = 64):
        super().__init__()
        enc = encoders or EncoderConfig()
        self.t_f, self.num_modes = t_f, num_modes
        self.spatial = SpatialEncoder(enc.map_width, enc.d_model)
        self.map_proj = nn.Linear(enc.d_model, enc.d_model)
        self.hist_proj = nn.Linear(2 * (history_len - 1), 16, bias=False)
        width = 4 + 16 + enc.d_model
        self.context_dim = width
        self.net = nn.Sequential(nn.Linear(width, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU())
        self.traj = nn.Linear(hidden, num_modes * t_f * 5)
        self.logit = nn.Linear(hidden, num_modes)

    def spatial_tokens(self, batch: SceneBatch) -> torch.Tensor:
        return self.spatial(batch.map_points, batch.map_mask)

    def encode(self, batch: SceneBatch, spatial_tokens: torch.Tensor) -> torch.Tensor:
        pos = batch.target_hist[..., :2]
        ok = (batch.target_valid[:, 1:] & batch.target_valid[:, :-1]).to(pos.dtype)
        disp = (pos[:, 1:] - pos[:, :-1]) * ok[..., None]
        vel = disp.sum(1) / ok.sum(1, keepdim=True).clamp_min(1.0)
        m = batch.map_mask.to(pos.dtype)[..., None]
        pooled = (spatial_tokens * m).sum(1) / m.sum(1).clamp_min(1.0)
        return torch.cat([pos[:, -1], vel, self.hist_proj(0.5 * disp.flatten(1)),
                          torch.relu(self.map_proj(pooled))], dim=-1)

    def decode(self, context: torch.Tensor) -> MixturePrediction:
        b = context.shape[0]
        h = self.net(context)
        raw = self.traj(h).reshape(b, self.num_modes, self.t_f, 5)
        steps = torch.arange(1, self.t_f + 1, dtype=context.dtype)
        base = context[:, None, :2] + steps[:, None] * context[:, None, 2:4]
        mu = base[:, None] + torch.cumsum(raw[..., :2], dim=-2)
        sigma = F.softplus(raw[..., 2:4]) + SIGMA_FLOOR
        rho = RHO_LIMIT * torch.tanh(raw[..., 4:5])
        return MixturePrediction(torch.softmax(self.logit(h), -1), torch.cat([mu, sigma, rho], -1))

    def forward(self, batch: SceneBatch, generator=None, seed: int = 0) -> MixturePrediction:
        return self.predict(batch)


def _check_interface(baseline) -> None:
    for name in ("spatial_tokens", "encode", "decode"):
        if not callable(getattr(baseline, name, None)):
            raise UsageError(f"baseline does not implement {name}()")


def combine_predictions(fact: MixturePrediction, cf: MixturePrediction) -> MixturePrediction:
    """Output-space Y - Y_c: means subtract, spreads stay factual, probabilities are renormalised."""
    tr = fact.trajectories.clone()
    tr[..., :2] = fact.trajectories[..., :2] - cf.trajectories[..., :2]
    logp = torch.log(fact.maneuver_probs.clamp_min(1e-12)) - torch.log(cf.maneuver_probs.clamp_min(1e-12))
    tr[..., 2:4] = tr[..., 2:4].clamp_min(SIGMA_FLOOR)
    tr[..., 4] = tr[..., 4].clamp(-RHO_LIMIT, RHO_LIMIT)
    return MixturePrediction(torch.softmax(logp, -1), tr)


class CausalWrapped(nn.Module):
    """Backdoor-averaged, counterfactual-corrected version of a baseline."""

    def __init__(self, baseline: BaselinePredictor, denoiser: Denoiser, schedule: DiffusionSchedule,
                 n: int = 4, combine_mode: str | None = None):
        super().__init__()
        _check_interface(baseline)
        if n < 1:
            raise ValueError("backdoor set size n must be >= 1")
        if combine_mode is None:
            combine_mode = "context" if getattr(baseline, "exposes_context", False) else "output"
        if combine_mode not in COMBINE_MODES:
            raise ValueError(f"combine_mode must be one of {COMBINE_MODES}")
        self.baseline = baseline
        self.diffusion = denoiser
        for p in self.diffusion.parameters():
            p.requires_grad_(False)
        self.schedule = schedule
        self.n = n
        self.combine_mode = combine_mode

    def backdoor_set(self, batch: SceneBatch, generator) -> torch.Tensor:
        sh = self.baseline.spatial_tokens(batch)
        return sample_chains(sh, self.n, self.diffusion, self.schedule, generator, batch.map_mask)

    def contexts(self, batch: SceneBatch, s_bar: torch.Tensor) -> torch.Tensor:
        """(B, n, C): one baseline context per backdoor sample."""
        return torch.stack([self.baseline.encode(batch, s_bar[:, i]) for i in range(s_bar.shape[1])], 1)

    def forward(self, batch: SceneBatch, generator=None, seed: int = 0) -> MixturePrediction:
        if generator is None:
            generator = scene_generators(batch.ids, seed)
        s_bar = self.backdoor_set(batch, generator)
        cf_batch = batch.counterfactual()
        if self.combine_mode == "context":
            c_f = self.contexts(batch, s_bar).sum(1) / s_bar.shape[1]
            c_c = self.contexts(cf_batch, s_bar).sum(1) / s_bar.shape[1]
            return self.baseline.decode(c_f - c_c)
        fact = average_predictions([self.baseline.decode(c) for c in self.contexts(batch, s_bar).unbind(1)])
        cf = average_predictions([self.baseline.decode(c) for c in self.contexts(cf_batch, s_bar).unbind(1)])
        return combine_predictions(fact, cf)


def wrap(baseline: BaselinePredictor, diffusion_ckpt: Checkpoint | None, n: int = 4,
         combine_mode: str | None = None, denoiser: Denoiser | None = None,
         schedule: DiffusionSchedule | None = None) -> CausalWrapped:
    """Wrap ``baseline`` with the denoiser from a stage-1 checkpoint.

    If the checkpoint carries spatial-encoder weights and the baseline has a
    ``spatial`` module, those weights are loaded so the baseline produces the
    token distribution the denoiser was trained on.
    """
    _check_interface(baseline)
    if diffusion_ckpt is not None:
        if diffusion_ckpt.stage != "diffusion":
            raise UsageError(f"expected a diffusion-stage checkpoint, got stage {diffusion_ckpt.stage!r}")
        mcfg = diffusion_ckpt.full_config().model
        dc = mcfg.diffusion
        denoiser = Denoiser(mcfg.encoders.d_model, dc.hidden, dc.blocks)
        dtype = next(iter(diffusion_ckpt.weights.values())).dtype
        denoiser = denoiser.to(dtype)
        denoiser.load_state_dict({k[len("diffusion."):]: v for k, v in diffusion_ckpt.weights.items()
                                  if k.startswith("diffusion.")})
        schedule = make_schedule(dc.schedule, dc.steps)
        spatial = getattr(baseline, "spatial", None)
        if isinstance(spatial, nn.Module):
            spatial.load_state_dict({k[len("spatial."):]: v for k, v in diffusion_ckpt.weights.items()
                                     if k.startswith("spatial.")})
    if denoiser is None or schedule is None:
        raise UsageError("wrap needs a diffusion checkpoint or an explicit denoiser and schedule")
    return CausalWrapped(baseline, denoiser, schedule, n, combine_mode)
