"""scikit-learn style estimator over lists of scenes."""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from causaltraj.batching import collate
from causaltraj.config import Config
from causaltraj.data import Scene, validate_scene
from causaltraj.evaluation import evaluate, predict
from causaltraj.exceptions import SceneValidationError
from causaltraj.model import variant_config
from causaltraj.training import Checkpoint, fit_pipeline


def check_scenes(scenes, require_future: bool = True) -> list[Scene]:
    """Validate a scene collection and check that every scene shares t_h, t_f and dt."""
    if isinstance(scenes, Scene):
        scenes = [scenes]
    scenes = list(scenes)
    if not scenes:
        raise SceneValidationError("expected at least one scene")
    for s in scenes:
        if not isinstance(s, Scene):
            raise SceneValidationError(f"expected Scene objects, got {type(s).__name__}")
        validate_scene(s)
    first = scenes[0]
    for s in scenes[1:]:
        if (s.t_h, s.t_f, s.dt) != (first.t_h, first.t_f, first.dt):
            raise SceneValidationError(f"scene {s.scene_id}: (t_h, t_f, dt) differ from scene {first.scene_id}")
    if require_future and not all(s.target.future_valid.any() for s in scenes):
        raise SceneValidationError("every training scene needs at least one valid future frame")
    return scenes


class CausalTrajectoryPredictor(BaseEstimator):
    """Two-stage causal trajectory predictor.

    ``fit`` runs denoiser training (if the variant uses it) and the full stage;
    ``predict`` returns the most probable mode, ``predict_proba`` the maneuver
    probabilities and ``transform`` the decoder input tokens.
    """

    def __init__(self, config: Config | None = None, variant: str = "E", epochs: int | None = None,
                 seed: int = 0):
        self.config = config
        self.variant = variant
        self.epochs = epochs
        self.seed = seed

    def _resolved_config(self) -> Config:
        cfg = dataclasses.replace(self.config) if self.config is not None else Config()
        cfg.model = variant_config(cfg.model, self.variant)
        train = dataclasses.replace(cfg.train, seed=self.seed)
        if self.epochs is not None:
            train = dataclasses.replace(train, epochs=self.epochs)
        cfg.train = train
        cfg.train_diffusion = dataclasses.replace(cfg.train_diffusion, seed=self.seed)
        return cfg.validate()

    def fit(self, X: Sequence[Scene], y=None) -> "CausalTrajectoryPredictor":
        scenes = check_scenes(X)
        cfg = self._resolved_config()
        if cfg.model.decoder.t_f != scenes[0].t_f:
            cfg.model = dataclasses.replace(cfg.model, decoder=dataclasses.replace(cfg.model.decoder, t_f=scenes[0].t_f))
        self.model_, self.diffusion_checkpoint_, self.checkpoint_ = fit_pipeline(scenes, cfg)
        self.config_ = cfg
        self.history_len_ = scenes[0].t_h + 1
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() before using this estimator")

    def _predictions(self, X):
        self._check_fitted()
        scenes = check_scenes(X, require_future=False)
        if scenes[0].t_h + 1 != self.history_len_:
            raise SceneValidationError(f"scenes have {scenes[0].t_h + 1} history frames, "
                                       f"the estimator was fitted on {self.history_len_}")
        return predict(self.model_, scenes, self.config_.eval.batch_size, self.config_.eval.seed)

    def predict(self, X) -> np.ndarray:
        """Most probable mode per scene, (N, t_f, 2), in scene-id order."""
        p = self._predictions(X)
        idx = p.probs.argmax(-1)
        return p.modes[np.arange(len(idx)), idx]

    def predict_proba(self, X) -> np.ndarray:
        return self._predictions(X).probs

    def transform(self, X) -> np.ndarray:
        """Decoder input tokens (N, K, D) in scene-id order."""
        self._check_fitted()
        scenes = sorted(check_scenes(X, require_future=False), key=lambda s: s.scene_id)
        dtype = next(self.model_.parameters()).dtype
        with torch.no_grad():
            out = self.model_(collate(scenes, self.model_.cfg.encoders.state_width, dtype), seed=self.config_.eval.seed)
        tokens = out.decoder_input if out.decoder_input is not None else out.y_factual
        return tokens.double().numpy()

    def score(self, X, y=None) -> float:
        """Negative ADE of the most probable mode (higher is better)."""
        self._check_fitted()
        rep = evaluate(self.model_, check_scenes(X), dataclasses.replace(self.config_.eval, metrics=("ade",)))
        return -rep.metrics["ade"]

    @property
    def checkpoint(self) -> Checkpoint:
        self._check_fitted()
        return self.checkpoint_
