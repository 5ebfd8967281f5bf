"""Full predictor: encoders, backdoor sampling, multi-view attention,
progressive and dual-scale fusion, factual / counterfactual composition and
the mixture decoder, with per-component toggles for ablations.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import torch
from torch import nn

from causaltraj.attention import MultiViewAttention
from causaltraj.batching import SceneBatch
from causaltraj.config import ModelConfig
from causaltraj.decoder import (Composer, CompositeToken, MixturePrediction, TrajectoryDecoder,
                                backdoor_average, causal_combine, constant_velocity_path)
from causaltraj.diffusion import Denoiser, make_schedule, sample_chains
from causaltraj.encoders import build_encoders
from causaltraj.exceptions import ConfigError, NumericalError
from causaltraj.fusion import DualScaleFusion, ProgressiveFusion

VARIANTS = ("A", "B", "C", "D", "E")


def variant_config(cfg: ModelConfig, variant: str) -> ModelConfig:
    """Architecture toggles of an ablation variant.

    A: no BEV encoder; B: single-stage anchor (T_rec = 1); C: no dual-scale
    fusion; D: no causal modules (no backdoor sampling, no counterfactual);
    E: everything on.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}, got {variant!r}")
    on = dict(use_bev=True, use_progressive=True, use_dual_scale=True, use_causal=True)
    off = {"A": "use_bev", "B": "use_progressive", "C": "use_dual_scale", "D": "use_causal"}
    if variant in off:
        on[off[variant]] = False
    return replace(cfg, **on)


@dataclass
class BranchOutput:
    context: torch.Tensor    # (B, n, D)
    query: torch.Tensor      # (B, n, K, D)
    fusion: torch.Tensor     # (B, D)
    composite: torch.Tensor  # (B, n, K, D)


@dataclass
class ModelOutput:
    prediction: MixturePrediction
    logits: torch.Tensor
    factual: BranchOutput
    counterfactual: BranchOutput | None
    backdoor: torch.Tensor   # (B, n, N_m, D)
    decoder_input: torch.Tensor | None  # (B, K, D) when decoding happens once in token space

    @property
    def y_factual(self) -> torch.Tensor:
        return self.factual.composite.mean(dim=1)

    @property
    def y_counterfactual(self) -> torch.Tensor | None:
        if self.counterfactual is None:
            return None
        return self.counterfactual.composite.mean(dim=1)


def scene_generators(ids, seed: int) -> list[torch.Generator]:
    """One generator per scene, keyed on the scene id, so samples do not depend on batching."""
    gens = []
    for sid in ids:
        g = torch.Generator()
        g.manual_seed((int(seed) * 1_000_003 + zlib.crc32(str(sid).encode())) % (2**63))
        gens.append(g)
    return gens


def average_predictions(preds: list[MixturePrediction]) -> MixturePrediction:
    """Output-space mean over backdoor samples (a convex combination keeps the invariants)."""
    p = torch.stack([q.maneuver_probs for q in preds]).mean(0)
    tr = torch.stack([q.trajectories for q in preds]).mean(0)
    return MixturePrediction(p / p.sum(-1, keepdim=True), tr)


def combine_outputs(fact: MixturePrediction, fact_logits: torch.Tensor,
                    cf: MixturePrediction, cf_logits: torch.Tensor) -> MixturePrediction:
    """Output-space Y = Y_fact - Y_cf: means and logits subtract, spreads come from the factual branch."""
    tr = fact.trajectories.clone()
    tr[..., :2] = fact.trajectories[..., :2] - cf.trajectories[..., :2]
    return MixturePrediction(torch.softmax(fact_logits - cf_logits, dim=-1), tr)


class CausalTrajectoryNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, history_len: int = 7):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        self.history_len = history_len
        d = cfg.encoders.d_model
        self.spatial, self.temporal, self.bev = build_encoders(cfg.encoders)
        dc = cfg.diffusion
        self.diffusion = Denoiser(d, dc.hidden, dc.blocks)
        self.schedule = make_schedule(dc.schedule, dc.steps)
        self.attention = MultiViewAttention(d, cfg.attention)
        self.fusion = ProgressiveFusion(d, cfg.decoder.num_modes)
        self.dual_scale = DualScaleFusion(d, history_len, cfg.fusion)
        self.composer = Composer(d)
        self.decoder = TrajectoryDecoder(d, cfg.decoder.t_f, cfg.decoder.pos_scale,
                                         cfg.decoder.num_modes)

    # ------------------------------------------------------------- pieces

    def diffusion_parameters(self):
        return list(self.diffusion.parameters())

    def freeze_diffusion(self) -> None:
        for p in self.diffusion.parameters():
            p.requires_grad_(False)

    def spatial_tokens(self, batch: SceneBatch) -> torch.Tensor:
        return self.spatial(batch.map_points, batch.map_mask)

    def backdoor_set(self, batch: SceneBatch, sh: torch.Tensor, generator) -> torch.Tensor:
        if not self.cfg.use_causal:
            return sh[:, None]
        with torch.set_grad_enabled(torch.is_grad_enabled() and self.cfg.diffusion.grad_through_chain):
            return sample_chains(sh, self.cfg.diffusion.n_samples, self.diffusion, self.schedule,
                                 generator, batch.map_mask)

    def branch(self, batch: SceneBatch, s_bar: torch.Tensor, bev_tokens: torch.Tensor | None,
               nbr_tokens: torch.Tensor) -> BranchOutput:
        """Everything downstream of the backdoor set that depends on the target history."""
        cfg = self.cfg
        xh = self.temporal(batch.target_hist)
        ctx = self.attention(xh, s_bar, batch.map_mask, bev_tokens, nbr_tokens, batch.nbr_mask,
                             use_bev=cfg.use_bev)
        t_rec = cfg.fusion.t_rec if cfg.use_progressive else 1
        q = self.fusion(ctx, t_rec).values
        if cfg.use_dual_scale:
            g = self.dual_scale(batch.target_hist, batch.target_valid, batch.nbr_hist,
                                batch.nbr_valid, batch.nbr_mask)
        else:
            g = ctx.new_zeros(ctx.shape[0], ctx.shape[-1])
        comp = self.composer(q, g[:, None].expand(-1, q.shape[1], -1))
        return BranchOutput(ctx, q, g, comp)

    def _decode(self, tokens: torch.Tensor):
        if not torch.all(torch.isfinite(tokens)):
            raise NumericalError("decoder input is not finite")
        logits, raw = self.decoder(tokens)
        return logits, self.decoder.activate(logits, raw)

    # ------------------------------------------------------------ forward

    def forward(self, batch: SceneBatch, generator=None, seed: int = 0,
                backdoor: torch.Tensor | None = None) -> ModelOutput:
        """``generator``: a torch.Generator shared by the batch; if None, one
        generator per scene derived from ``seed`` and the scene id.
        ``backdoor``: a precomputed (B, n, N_m, D) sample set to use instead of sampling."""
        cfg = self.cfg
        if backdoor is not None:
            s_bar = backdoor
        else:
            if generator is None:
                generator = scene_generators(batch.ids, seed)
            s_bar = self.backdoor_set(batch, self.spatial_tokens(batch), generator)
        bev_tokens = self.bev(batch.bev) if cfg.use_bev else None
        nbr_tokens = self.temporal(batch.nbr_hist)
        fact = self.branch(batch, s_bar, bev_tokens, nbr_tokens)
        cf = self.branch(batch.counterfactual(), s_bar, bev_tokens, nbr_tokens) if cfg.use_causal else None

        dcfg = cfg.decoder
        if dcfg.average_space == "token":
            y_f = backdoor_average(fact.composite).values
            if cf is None:
                y, dec_in = y_f, y_f
                logits, pred = self._decode(y)
            else:
                y_c = backdoor_average(cf.composite).values
                if dcfg.combine_space == "token":
                    dec_in = causal_combine(CompositeToken(y_f, "factual"),
                                            CompositeToken(y_c, "counterfactual")).values
                    logits, pred = self._decode(dec_in)
                else:
                    dec_in = None
                    lf, pf = self._decode(y_f)
                    lc, pc = self._decode(y_c)
                    pred, logits = combine_outputs(pf, lf, pc, lc), lf - lc
        else:
            # decode every backdoor sample, then average the predictions
            dec_in = None
            b, n, k, d = fact.composite.shape
            preds, all_logits = [], []
            for i in range(n):
                tok_f = fact.composite[:, i]
                if cf is None:
                    lg, pr = self._decode(tok_f)
                elif dcfg.combine_space == "token":
                    lg, pr = self._decode(tok_f - cf.composite[:, i])
                else:
                    lf, pf = self._decode(tok_f)
                    lc, pc = self._decode(cf.composite[:, i])
                    pr, lg = combine_outputs(pf, lf, pc, lc), lf - lc
                preds.append(pr)
                all_logits.append(lg)
            pred = average_predictions(preds)
            logits = torch.log(pred.maneuver_probs.clamp_min(1e-12))
        if dcfg.velocity_anchor:
            # the observed-history path is added after any subtraction so it never cancels
            anchor = constant_velocity_path(batch.target_hist, batch.target_valid, dcfg.t_f)
            offset = torch.cat([anchor, anchor.new_zeros(*anchor.shape[:-1], 3)], dim=-1)
            pred = MixturePrediction(pred.maneuver_probs, pred.trajectories + offset[:, None])
        return ModelOutput(pred, logits, fact, cf, s_bar, dec_in)
