"""Evaluation harness: batched inference, metric aggregation, robustness
conditions, cross-domain matrices and ablation runs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from scipy.stats import ks_2samp

from causaltraj import metrics as M
from causaltraj.batching import collate
from causaltraj.config import Config, EvalConfig
from causaltraj.data import PerturbationSpec, Scene
from causaltraj.exceptions import ConfigError, UsageError
from causaltraj.model import CausalTrajectoryNet, variant_config
from causaltraj.perturb import perturb_dataset
from causaltraj.training import Checkpoint, fit_pipeline, model_from_checkpoint


@dataclass
class EvalReport:
    metrics: dict[str, float]
    rmse_by_horizon: dict[str, float]
    n_scenes: int
    perturbation: dict
    fingerprint: str
    split: str = ""
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "rmse_by_horizon": self.rmse_by_horizon, "n_scenes": self.n_scenes,
                "perturbation": self.perturbation, "fingerprint": self.fingerprint, "split": self.split,
                "extras": self.extras}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def check(self) -> None:
        for k, v in {**self.metrics, **self.rmse_by_horizon}.items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"metric {k} = {v} is not finite and nonnegative")


@dataclass
class Predictions:
    ids: list[str]
    classes: list[str]
    modes: np.ndarray    # (N, K, t_f, 2)
    probs: np.ndarray    # (N, K)
    sigmas: np.ndarray   # (N, K, t_f, 3)
    future: np.ndarray   # (N, t_f, 2)
    valid: np.ndarray    # (N, t_f)
    maneuver: np.ndarray  # (N,)
    dt: float


def predict(model: torch.nn.Module, scenes: Sequence[Scene], batch_size: int = 64, seed: int = 0) -> Predictions:
    """Inference in scene-id order; backdoor noise is keyed on each scene id.

    ``model(batch, seed=...)`` may return a ModelOutput or a MixturePrediction.
    """
    if not scenes:
        raise ConfigError("evaluation needs a non-empty dataset")
    scenes = sorted(scenes, key=lambda s: s.scene_id)
    dtype = next(model.parameters()).dtype
    cfg = getattr(model, "cfg", None)
    state_width = cfg.encoders.state_width if cfg is not None else 2
    history_len = getattr(model, "history_len", None)
    model.eval()
    parts = []
    with torch.no_grad():
        for i in range(0, len(scenes), batch_size):
            b = collate(scenes[i : i + batch_size], state_width, dtype)
            if history_len is not None and b.target_hist.shape[1] != history_len:
                raise ConfigError(f"scene history has {b.target_hist.shape[1]} frames but the model "
                                  f"expects {history_len}")
            out = model(b, seed=seed)
            pr = out.prediction if hasattr(out, "prediction") else out
            if pr.trajectories.shape[-2] != b.future.shape[1]:
                raise ConfigError(f"scene t_f = {b.future.shape[1]} but the model predicts "
                                  f"{pr.trajectories.shape[-2]} frames")
            parts.append((b, pr.maneuver_probs.double().numpy(), pr.trajectories.double().numpy()))
    cat = lambda xs: np.concatenate(xs)  # noqa: E731
    return Predictions(
        [i for b, _, _ in parts for i in b.ids], [c for b, _, _ in parts for c in b.classes],
        cat([t[..., :2] for _, _, t in parts]), cat([p for _, p, _ in parts]),
        cat([t[..., 2:] for _, _, t in parts]), cat([b.future.double().numpy() for b, _, _ in parts]),
        cat([b.future_valid.numpy() for b, _, _ in parts]), cat([b.maneuver.numpy() for b, _, _ in parts]),
        scenes[0].dt,
    )


def _masked_mean(x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    v = valid.astype(float)
    return (x * v).sum(-1) / np.maximum(v.sum(-1), 1.0)


def _last_valid(x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    idx = np.where(valid.any(-1), valid.shape[-1] - 1 - np.argmax(valid[..., ::-1], axis=-1), valid.shape[-1] - 1)
    return np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]


def compute_metrics(p: Predictions, cfg: EvalConfig) -> tuple[dict[str, float], dict[str, float]]:
    top = M.top_mode(p.modes, p.probs)
    dist = M.displacement(top, p.future)
    ade_s = _masked_mean(dist, p.valid)
    fde_s = _last_valid(dist, p.valid)
    out: dict[str, float] = {}
    horizons: dict[str, float] = {}
    for name in cfg.metrics:
        if name == "ade":
            out["ade"] = float(ade_s.mean())
        elif name == "fde":
            out["fde"] = float(fde_s.mean())
        elif name == "min_ade_k":
            big_k = p.modes.shape[1]
            for k in sorted({min(cfg.k, big_k), 1, big_k}):
                order = np.argsort(-p.probs, axis=-1, kind="stable")[:, :k]
                errs = _masked_mean(M.displacement(p.modes, np.broadcast_to(p.future[:, None], p.modes.shape)),
                                    p.valid[:, None])
                out[f"min_ade_{k}"] = float(np.take_along_axis(errs, order, axis=-1).min(-1).mean())
        elif name == "rmse":
            frames = M.horizon_frames(cfg.horizons_s, p.dt, p.modes.shape[2])
            vals = M.rmse_by_horizon(top, p.future, frames) if frames else []
            for f, v in zip(frames, vals):
                horizons[f"{f * p.dt:g}s"] = float(v)
            out["rmse"] = float(np.sqrt((dist**2 * p.valid).sum() / max(p.valid.sum(), 1)))
        elif name in ("wsade", "wsfde"):
            per = M.per_class_mean(ade_s if name == "wsade" else fde_s, p.classes)
            weights = cfg.class_weights or M.DEFAULT_CLASS_WEIGHTS
            present = {c: w for c, w in weights.items() if c in per}
            if not cfg.class_weights:
                # default weights renormalised over the classes present in the data
                tot = sum(present.values())
                weights = {c: w / tot for c, w in present.items()}
            out[name] = M.weighted_sum(per, weights)
        else:
            raise ConfigError(f"eval.metrics: unknown metric {name!r}")
    labelled = p.maneuver >= 0
    if labelled.any():
        out["maneuver_accuracy"] = float((p.probs[labelled].argmax(-1) == p.maneuver[labelled]).mean())
    return out, horizons


def evaluate(model: torch.nn.Module | Checkpoint, scenes: Sequence[Scene], cfg: EvalConfig | None = None,
             perturbation: PerturbationSpec | None = None, split: str = "", fingerprint: str = "") -> EvalReport:
    """Perturb the inputs (never the futures), run inference and aggregate metrics."""
    cfg = cfg or EvalConfig()
    perturbation = perturbation or PerturbationSpec()
    if isinstance(model, Checkpoint):
        if model.stage != "full":
            raise UsageError(f"evaluation needs a full-stage checkpoint, got stage {model.stage!r}")
        fingerprint = fingerprint or model.fingerprint
        model = model_from_checkpoint(model)
    inputs = perturb_dataset(list(scenes), perturbation)
    preds = predict(model, inputs, cfg.batch_size, cfg.seed)
    values, horizons = compute_metrics(preds, cfg)
    report = EvalReport(values, horizons, len(preds.ids), perturbation.to_dict(), fingerprint, split)
    report.check()
    return report


# ------------------------------------------------------------ cross-domain


def mean_speeds(scenes: Sequence[Scene]) -> np.ndarray:
    """Mean target speed over valid history frames, per scene."""
    out = []
    for s in scenes:
        h, v = s.target.history[:, :2], s.target.history_valid
        ok = v[1:] & v[:-1]
        d = np.linalg.norm(np.diff(h, axis=0), axis=1)[ok]
        out.append(d.mean() / s.dt if len(d) else 0.0)
    return np.array(out)


@dataclass
class CrossDomainReport:
    domains: list[str]
    matrix: list[list[float]]      # [train domain][test domain]
    metric: str
    ks_pvalues: dict[str, float]
    ks_statistics: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2)


def ks_test(a, b) -> tuple[float, float]:
    res = ks_2samp(np.asarray(a, float), np.asarray(b, float))
    return float(res.statistic), float(res.pvalue)


def cross_domain_eval(model_factory: Callable[[list[Scene]], CausalTrajectoryNet],
                      domain_splits: Mapping[str, Sequence[Scene]], eval_cfg: EvalConfig | None = None,
                      metric: str = "ade", test_fraction: float = 0.3) -> CrossDomainReport:
    """Train on each domain's train part and evaluate on every domain's held-out part."""
    if len(domain_splits) < 2:
        raise ConfigError("cross-domain evaluation needs at least two splits")
    eval_cfg = eval_cfg or EvalConfig()
    names = sorted(domain_splits)
    train, test = {}, {}
    for name in names:
        scenes = sorted(domain_splits[name], key=lambda s: s.scene_id)
        if len(scenes) < 2:
            raise ConfigError(f"split {name!r} has {len(scenes)} scenes; at least 2 are needed")
        n_test = min(max(1, int(round(test_fraction * len(scenes)))), len(scenes) - 1)
        train[name], test[name] = scenes[n_test:], scenes[:n_test]
    matrix = []
    for a in names:
        model = model_factory(train[a])
        row = []
        for b in names:
            rep = evaluate(model, test[b], replace(eval_cfg, metrics=(metric,) if metric in M.METRIC_NAMES else eval_cfg.metrics))
            row.append(rep.metrics[metric])
        matrix.append(row)
    pvals, stats = {}, {}
    speeds = {n: mean_speeds(domain_splits[n]) for n in names}
    for i, a in enumerate(names):
        for b in names[i:]:
            stat, p = ks_test(speeds[a], speeds[b])
            pvals[f"{a}|{b}"], stats[f"{a}|{b}"] = p, stat
    return CrossDomainReport(names, matrix, metric, pvals, stats)


def pipeline_factory(cfg: Config) -> Callable[[list[Scene]], CausalTrajectoryNet]:
    def make(scenes: list[Scene]) -> CausalTrajectoryNet:
        return fit_pipeline(scenes, cfg)[0]
    return make


# ---------------------------------------------------------------- ablation


def ablation_config(cfg: Config, variant: str) -> Config:
    return replace(cfg, model=variant_config(cfg.model, variant))


def run_ablation(variant: str, data: Mapping[str, Sequence[Scene]], cfg: Config,
                 test_splits: Sequence[str] = ("test_iid", "test_shifted"),
                 perturbations: Sequence[PerturbationSpec] = ()) -> dict[str, EvalReport]:
    """Train variant ``variant`` on ``data['train']`` and evaluate on each test split
    (and, if given, each perturbation of each split)."""
    vcfg = ablation_config(cfg, variant)
    vcfg.validate()
    if "train" not in data:
        raise ConfigError("ablation data needs a 'train' split")
    model, _, full = fit_pipeline(list(data["train"]), vcfg)
    out = {}
    for split in test_splits:
        if split not in data:
            raise ConfigError(f"ablation data has no split {split!r}")
        out[split] = evaluate(model, data[split], vcfg.eval, split=split, fingerprint=full.fingerprint)
        for spec in perturbations:
            key = f"{split}@{spec.kind}:{spec.alpha if spec.kind == 'noise' else spec.drop_fraction}"
            out[key] = evaluate(model, data[split], vcfg.eval, spec, split=split, fingerprint=full.fingerprint)
    return out
