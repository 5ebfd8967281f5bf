"""Two-stage training and checkpoint files.

Stage 1 fits the denoiser on spatial tokens from a fixed spatial encoder.
Stage 2 loads both, freezes the denoiser and trains the rest of the network
with the intention and trajectory losses.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from causaltraj.batching import SceneBatch, collate
from causaltraj.config import Config, ModelConfig, TrainConfig, config_from_dict
from causaltraj.data import PerturbationSpec, Scene
from causaltraj.decoder import MixturePrediction, TrajectoryDecoder
from causaltraj.diffusion import diffusion_loss, sample_chains
from causaltraj.exceptions import ConfigError, NumericalError, UsageError
from causaltraj.losses import LossWeights, intention_loss, trajectory_loss
from causaltraj.model import CausalTrajectoryNet, scene_generators
from causaltraj.perturb import perturb_scene

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "causaltraj-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    weights: dict[str, torch.Tensor]
    fingerprint: str
    stage: str
    step: int
    config: dict
    history_len: int
    losses: list[float] = field(default_factory=list)
    loss_weights: dict[str, float] = field(default_factory=dict)

    def header(self) -> dict:
        return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "fingerprint": self.fingerprint, "stage": self.stage, "step": self.step}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"header": self.header(), "config": self.config, "history_len": self.history_len,
                   "weights": self.weights, "losses": self.losses, "loss_weights": self.loss_weights}
        buf = io.BytesIO()
        torch.save(payload, buf)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:  # torch raises several unrelated types for bad files
            raise ConfigError(f"{path}: not a readable checkpoint ({exc})") from exc
        head = payload.get("header", {}) if isinstance(payload, dict) else {}
        if head.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: header.format is not {CHECKPOINT_FORMAT!r}")
        if head.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported header.version {head.get('version')!r}")
        return cls(payload["weights"], head["fingerprint"], head["stage"], head["step"],
                   payload["config"], payload["history_len"], payload.get("losses", []),
                   payload.get("loss_weights", {}))

    def full_config(self) -> Config:
        return config_from_dict(self.config)


def build_model(cfg: ModelConfig, history_len: int, seed: int = 0,
                dtype: torch.dtype = torch.float32) -> CausalTrajectoryNet:
    torch.manual_seed(seed)
    return CausalTrajectoryNet(cfg, history_len).to(dtype)


def model_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig | None = None) -> CausalTrajectoryNet:
    cfg = cfg or ckpt.full_config().model
    dtype = next(iter(ckpt.weights.values())).dtype
    model = CausalTrajectoryNet(cfg, ckpt.history_len).to(dtype)
    missing, unexpected = model.load_state_dict(ckpt.weights, strict=False)
    if unexpected:
        raise ConfigError(f"checkpoint has weights the model does not: {unexpected[0]}")
    if ckpt.stage == "full" and missing:
        raise ConfigError(f"checkpoint lacks weights for {missing[0]}")
    return model


def _history_len(scenes: Sequence[Scene]) -> int:
    if not scenes:
        raise ConfigError("training needs a non-empty dataset")
    return scenes[0].t_h + 1


def _batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator).tolist()
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _steps(tc: TrainConfig, n: int) -> int:
    per_epoch = math.ceil(n / tc.batch_size)
    total = tc.epochs * per_epoch
    return min(total, tc.max_steps) if tc.max_steps else total


class _CsvLog:
    def __init__(self, path: str, columns: list[str]):
        self.fh = None
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", newline="")
            self.writer = csv.writer(self.fh)
            self.writer.writerow(columns)

    def row(self, values) -> None:
        if self.fh:
            self.writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in values])

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _check_finite(value: torch.Tensor, step: int, what: str) -> None:
    if not torch.isfinite(value):
        raise NumericalError(f"{what} became non-finite at step {step}; lower the learning rate "
                             "or check the input scenes")


# ------------------------------------------------------------------ stage 1


def zero_predictor_loss(tokens: torch.Tensor, mask: torch.Tensor, cfg: Config, seed: int = 0) -> float:
    """Stage-1 loss of the trivial predictor that always outputs zero noise."""
    model = build_model(cfg.model, 2, seed)
    zero = lambda sj, j, m=None: torch.zeros_like(sj)  # noqa: E731
    return float(diffusion_loss(tokens, zero, model.schedule, seed, mask, cfg.model.diffusion.norm))


def spatial_token_table(model: CausalTrajectoryNet, scenes: Sequence[Scene], batch_size: int = 64):
    """Spatial tokens and masks for every scene, padded to a common N_m."""
    toks, masks = [], []
    with torch.no_grad():
        for i in range(0, len(scenes), batch_size):
            b = collate(scenes[i : i + batch_size], model.cfg.encoders.state_width, _dtype(model))
            toks.append(model.spatial_tokens(b))
            masks.append(b.map_mask)
    n_m = max(t.shape[1] for t in toks)
    pad = lambda t, v: torch.nn.functional.pad(t, (0, 0, 0, n_m - t.shape[1]), value=v)  # noqa: E731
    tokens = torch.cat([pad(t, 0.0) for t in toks])
    mask = torch.cat([torch.nn.functional.pad(m, (0, n_m - m.shape[1]), value=False) for m in masks])
    return tokens, mask


def train_diffusion(scenes: Sequence[Scene], cfg: Config) -> Checkpoint:
    """Fit the denoiser on spatial tokens of ``scenes``; the spatial encoder stays at its seeded init."""
    tc = cfg.train_diffusion
    cfg.validate()
    if tc.stage != "diffusion":
        raise UsageError("train_diffusion needs a config with stage 'diffusion'")
    h = _history_len(scenes)
    model = build_model(cfg.model, h, tc.seed)
    tokens, mask = spatial_token_table(model, scenes)
    opt = torch.optim.Adam(model.diffusion.parameters(), lr=tc.learning_rate)
    gen = torch.Generator().manual_seed(tc.seed)
    total = _steps(tc, len(scenes))
    logf = _CsvLog(tc.log_path, ["step", "loss"])
    losses, step = [], 0
    try:
        while step < total:
            for idx in _batches(len(scenes), tc.batch_size, gen):
                if step >= total:
                    break
                seed = int(torch.randint(0, 2**31 - 1, (1,), generator=gen))
                loss = diffusion_loss(tokens[idx], model.diffusion, model.schedule, seed, mask[idx],
                                      cfg.model.diffusion.norm)
                _check_finite(loss, step, "diffusion loss")
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.diffusion.parameters(), tc.grad_clip)
                opt.step()
                step += 1
                losses.append(loss.item())
                logf.row([step, loss.item()])
    finally:
        logf.close()
    weights = {k: v.detach().clone() for k, v in model.state_dict().items()
               if k.startswith(("diffusion.", "spatial."))}
    return Checkpoint(weights, cfg.fingerprint(), "diffusion", step, cfg.portable().to_dict(), h, losses)


# ------------------------------------------------------------------ stage 2


def prediction_losses(pred: MixturePrediction, batch: SceneBatch, weights: LossWeights, tc: TrainConfig):
    """``(total, intention, trajectory)`` for one batch of predictions."""
    labelled = batch.maneuver >= 0
    maneuver = batch.maneuver.clone()
    if not bool(labelled.all()):
        # unlabelled scenes train the mode closest to the ground truth
        err = (pred.means - batch.future[:, None]).norm(dim=-1).mean(-1)
        maneuver = torch.where(labelled, maneuver, err.argmin(-1))
    if bool(labelled.any()):
        l_int = intention_loss(pred.maneuver_probs[labelled], maneuver[labelled])
    else:
        l_int = pred.maneuver_probs.new_zeros(())
    l_traj = trajectory_loss(pred, batch.future, maneuver, tc.dataset_kind, weights.value("lambda_0"),
                             weights.value("lambda_1"), batch.future_valid, tc.nll_detach_means, k=tc.min_ade_k,
                             classes=batch.classes, class_weights=tc.class_weights or None)
    total = weights.value("lambda_int") * l_int + weights.value("lambda_traj") * l_traj
    return total, l_int, l_traj


def scene_losses(model: CausalTrajectoryNet, batch: SceneBatch, weights: LossWeights, tc: TrainConfig,
                 generator=None, seed: int = 0):
    """Total loss, its components and the raw model output for one batch."""
    out = model(batch, generator=generator, seed=seed)
    return (*prediction_losses(out.prediction, batch, weights, tc), out)


def _augment(scenes: Sequence[Scene], alphas: tuple[float, ...], gen: torch.Generator) -> list[Scene]:
    out = []
    for s in scenes:
        pick = int(torch.randint(0, len(alphas) + 1, (1,), generator=gen))
        seed = int(torch.randint(0, 2**31 - 1, (1,), generator=gen))
        if pick == len(alphas) or alphas[pick] == 0:
            out.append(s)
        else:
            out.append(perturb_scene(s, PerturbationSpec("noise", alpha=alphas[pick], rng_seed=seed)))
    return out


def train_predictor(module: torch.nn.Module, scenes: Sequence[Scene], tc: TrainConfig,
                    forward: Callable[[SceneBatch, torch.Generator | None], MixturePrediction],
                    state_width: int = 2, fresh_noise: bool = True,
                    callback: Callable[[int, float], None] | None = None) -> tuple[list[float], LossWeights]:
    """Optimise every trainable parameter of ``module`` on the intention and trajectory losses.

    ``forward(batch, generator)`` returns the prediction; ``generator`` is None
    when ``fresh_noise`` is off so the module keys its noise on scene ids.
    ``callback(step, loss)`` runs after every optimiser step.
    """
    dtype = _dtype(module)
    weights = LossWeights(lambda_0=tc.lambda_0, lambda_1=tc.lambda_1, lambda_int=tc.lambda_int,
                          lambda_traj=tc.lambda_traj).to(dtype)
    params = [p for p in module.parameters() if p.requires_grad] + list(weights.parameters())
    opt = torch.optim.Adam(params, lr=tc.learning_rate)
    gen = torch.Generator().manual_seed(tc.seed)
    noise_gen = torch.Generator().manual_seed(tc.seed + 1) if fresh_noise else None
    total = _steps(tc, len(scenes))
    logf = _CsvLog(tc.log_path, ["step", "loss", "intention", "trajectory", *LossWeights.NAMES])
    losses, step = [], 0
    for sub in module.modules():
        if isinstance(sub, TrajectoryDecoder):
            sub.isolate_spreads = tc.nll_detach_means
    module.train()
    try:
        while step < total:
            for idx in _batches(len(scenes), tc.batch_size, gen):
                if step >= total:
                    break
                chunk = [scenes[i] for i in idx]
                if tc.augment_alpha:
                    chunk = _augment(chunk, tc.augment_alpha, gen)
                batch = collate(chunk, state_width, dtype)
                loss, l_int, l_traj = prediction_losses(forward(batch, noise_gen), batch, weights, tc)
                _check_finite(loss, step, "training loss")
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
                opt.step()
                step += 1
                losses.append(loss.item())
                logf.row([step, loss.item(), l_int.item(), l_traj.item(), *weights.values().values()])
                if callback is not None:
                    callback(step, loss.item())
    finally:
        logf.close()
    module.eval()
    return losses, weights


class BackdoorBank:
    """Precomputed reverse-chain samples per scene for stage-2 training.

    Valid while the denoiser and the spatial tokens stay fixed; each draw picks
    ``n`` distinct bank entries per scene.
    """

    def __init__(self, model: CausalTrajectoryNet, scenes: Sequence[Scene], size: int, seed: int,
                 batch_size: int = 64):
        self.size = size
        self.samples: dict[str, torch.Tensor] = {}
        with torch.no_grad():
            for i in range(0, len(scenes), batch_size):
                chunk = scenes[i : i + batch_size]
                b = collate(chunk, model.cfg.encoders.state_width, _dtype(model))
                gens = scene_generators(b.ids, seed)
                s_bar = sample_chains(model.spatial_tokens(b), size, model.diffusion, model.schedule, gens,
                                      b.map_mask)
                for j, sid in enumerate(b.ids):
                    self.samples[sid] = s_bar[j, :, : int(b.map_mask[j].sum())].clone()

    def draw(self, batch: SceneBatch, n: int, generator: torch.Generator | None) -> torch.Tensor:
        """(B, n, N_m, D) backdoor sets padded to the batch's polyline count."""
        if n > self.size:
            raise ConfigError(f"backdoor set size {n} exceeds the sample bank size {self.size}")
        n_m = batch.map_mask.shape[1]
        first = next(iter(self.samples.values()))
        out = first.new_zeros(len(batch), n, n_m, first.shape[-1])
        for j, sid in enumerate(batch.ids):
            pick = torch.randperm(self.size, generator=generator)[:n]
            bank = self.samples[sid]
            out[j, :, : bank.shape[1]] = bank[pick]
        return out


def train_full(scenes: Sequence[Scene], diffusion_ckpt: Checkpoint | None, cfg: Config,
               model: CausalTrajectoryNet | None = None,
               callback: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Stage 2. The denoiser is loaded from ``diffusion_ckpt`` and frozen.

    ``diffusion_ckpt`` may be None only for variants without the causal modules.
    """
    tc = cfg.train
    cfg.validate()
    if tc.stage != "full":
        raise UsageError("train_full needs a config with stage 'full'")
    h = _history_len(scenes)
    if model is None:
        model = build_model(cfg.model, h, tc.seed)
    if diffusion_ckpt is not None:
        if diffusion_ckpt.stage != "diffusion":
            raise UsageError(f"expected a diffusion-stage checkpoint, got stage {diffusion_ckpt.stage!r}")
        state = {k: v for k, v in diffusion_ckpt.weights.items() if k.startswith(("diffusion.", "spatial."))}
        model.load_state_dict(state, strict=False)
    elif cfg.model.use_causal:
        raise UsageError("the causal model needs a diffusion checkpoint")
    model.freeze_diffusion()
    if not cfg.model.train_spatial_encoder:
        for p in model.spatial.parameters():
            p.requires_grad_(False)
    dc = cfg.model.diffusion
    fresh = not dc.fixed_per_scene
    if cfg.model.use_causal and fresh and dc.sample_bank and not dc.grad_through_chain:
        bank = BackdoorBank(model, scenes, dc.sample_bank, tc.seed)
        forward = lambda b, g: model(b, backdoor=bank.draw(b, dc.n_samples, g)).prediction  # noqa: E731
    else:
        forward = lambda b, g: model(b, generator=g, seed=tc.seed).prediction  # noqa: E731
    losses, weights = train_predictor(model, scenes, tc, forward, cfg.model.encoders.state_width,
                                      fresh_noise=fresh, callback=callback)
    weights_out = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(weights_out, cfg.fingerprint(), "full", len(losses), cfg.portable().to_dict(), h, losses,
                      weights.values())


def state_checksum(tensors: dict[str, torch.Tensor] | torch.nn.Module, prefix: str = "") -> str:
    """sha256 over the raw bytes of every tensor whose name starts with ``prefix``."""
    state = tensors.state_dict() if isinstance(tensors, torch.nn.Module) else tensors
    h = hashlib.sha256()
    for name in sorted(state):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(state[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def fit_pipeline(scenes: Sequence[Scene], cfg: Config) -> tuple[CausalTrajectoryNet, Checkpoint | None, Checkpoint]:
    """Run both stages (stage 1 only when the causal modules are on) and return the trained model."""
    diff = train_diffusion(scenes, cfg) if cfg.model.use_causal else None
    full = train_full(scenes, diff, cfg)
    return model_from_checkpoint(full, cfg.model), diff, full
