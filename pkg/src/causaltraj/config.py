"""Structured configuration.

Configs are plain dataclasses so they can be built in code, loaded from
YAML/JSON files and fingerprinted for checkpoints and reports.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from causaltraj.exceptions import ConfigError


@dataclass
class EncoderConfig:
    d_model: int = 32
    state_width: int = 2
    map_width: int = 4
    kernel_sizes: tuple[int, ...] = (3, 5, 7)
    bev_channels: int = 4
    pyramid_grid: int = 4


@dataclass
class DiffusionConfig:
    steps: int = 50
    n_samples: int = 4
    schedule: str = "cosine"
    norm: str = "squared_l2"
    hidden: int = 64
    blocks: int = 2
    # reuse one backdoor set per scene instead of drawing fresh noise per batch
    fixed_per_scene: bool = False
    # backpropagate through the reverse chain into the spatial encoder; the chain
    # starts from alpha_bar_m ~ 1e-6, so this gradient is tiny and costly
    grad_through_chain: bool = False
    # training only: draw each step's backdoor set from a bank of this many chain
    # samples per scene, computed once (0 runs the chain every step). Used only
    # when the chain's inputs are frozen, i.e. without grad_through_chain.
    sample_bank: int = 16


@dataclass
class AttentionConfig:
    heads: int = 1
    dropout: float = 0.0
    residual: bool = True


@dataclass
class FusionConfig:
    t_rec: int = 3
    grid: tuple[int, int] = (13, 3)
    cell_size: float = 4.0
    channels: int = 16


@dataclass
class DecoderConfig:
    num_modes: int = 3
    t_f: int = 10
    # where Y = Y_fact - Y_cf is taken: "token" or "output"
    combine_space: str = "token"
    # where the backdoor average is taken: "token" or "output"
    average_space: str = "token"
    # metres per decoder step output unit
    pos_scale: float = 1.0
    # decode modes as offsets from a constant-velocity extrapolation of the history
    velocity_anchor: bool = True


@dataclass
class ModelConfig:
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    use_bev: bool = True
    use_progressive: bool = True
    use_dual_scale: bool = True
    use_causal: bool = True
    train_spatial_encoder: bool = True

    def validate(self) -> None:
        if self.encoders.d_model < 1:
            raise ConfigError("model.encoders.d_model must be >= 1")
        if self.diffusion.steps < 1:
            raise ConfigError("model.diffusion.steps must be >= 1")
        if self.diffusion.n_samples < 1:
            raise ConfigError("model.diffusion.n_samples must be >= 1")
        if self.diffusion.sample_bank < 0:
            raise ConfigError("model.diffusion.sample_bank must be >= 0")
        if 0 < self.diffusion.sample_bank < self.diffusion.n_samples:
            raise ConfigError("model.diffusion.sample_bank must be 0 or at least n_samples")
        if self.diffusion.norm not in ("squared_l2", "l2"):
            raise ConfigError(f"model.diffusion.norm: unknown norm {self.diffusion.norm!r}")
        if self.diffusion.schedule not in ("cosine", "linear"):
            raise ConfigError(f"model.diffusion.schedule: unknown schedule {self.diffusion.schedule!r}")
        if self.fusion.t_rec < 0:
            raise ConfigError("model.fusion.t_rec must be >= 0")
        if self.decoder.num_modes < 1:
            raise ConfigError("model.decoder.num_modes must be >= 1")
        for key in ("combine_space", "average_space"):
            if getattr(self.decoder, key) not in ("token", "output"):
                raise ConfigError(f"model.decoder.{key} must be 'token' or 'output'")
        heads = self.attention.heads
        if heads < 1 or self.encoders.d_model % heads:
            raise ConfigError("model.attention.heads must divide model.encoders.d_model")


@dataclass
class LossWeight:
    value: float = 1.0
    learnable: bool = False


DATASET_KINDS = ("synthetic", "nuscenes-like", "apolloscape-like", "highway-like")


@dataclass
class TrainConfig:
    stage: str = "full"
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    # hard cap on optimizer steps; 0 means "epochs only"
    max_steps: int = 0
    grad_clip: float = 5.0
    lambda_0: LossWeight = field(default_factory=lambda: LossWeight(1.0, False))
    lambda_1: LossWeight = field(default_factory=lambda: LossWeight(0.1, False))
    lambda_int: LossWeight = field(default_factory=lambda: LossWeight(1.0, False))
    lambda_traj: LossWeight = field(default_factory=lambda: LossWeight(1.0, False))
    dataset_kind: str = "synthetic"
    min_ade_k: int = 3
    class_weights: dict[str, float] = field(default_factory=dict)
    # when True the likelihood term trains only the spreads (sigma, rho); the means
    # are trained by the displacement term alone
    nll_detach_means: bool = True
    # noise levels for training-time history augmentation; empty disables it
    augment_alpha: tuple[float, ...] = ()
    log_path: str = ""

    def validate(self) -> None:
        if self.stage not in ("diffusion", "full"):
            raise ConfigError(f"train.stage: unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be positive")
        if self.max_steps < 0:
            raise ConfigError("train.max_steps must be >= 0")
        if self.dataset_kind not in DATASET_KINDS:
            raise ConfigError(f"train.dataset_kind: unknown kind {self.dataset_kind!r}")
        if any(a < 0 for a in self.augment_alpha):
            raise ConfigError("train.augment_alpha entries must be >= 0")
        for name in ("lambda_0", "lambda_1", "lambda_int", "lambda_traj"):
            w = getattr(self, name)
            if not (w.value == w.value and abs(w.value) != float("inf")):
                raise ConfigError(f"train.{name}.value must be finite")
            if w.learnable and w.value <= 0:
                raise ConfigError(f"train.{name}.value must be positive when learnable")


@dataclass
class GeneratorConfig:
    n_train: int = 200
    n_test_iid: int = 100
    n_test_shifted: int = 100
    t_h: int = 6
    t_f: int = 10
    dt: float = 0.5
    rho: float = 0.9
    n_points: int = 10
    max_neighbors: int = 3
    speed_range: tuple[float, float] = (8.0, 12.0)
    accel: float = 1.5
    # fraction of the future acceleration already visible in the history
    history_cue: float = 0.1
    obs_noise: float = 0.1
    bev_size: int = 64
    bev_res: float = 0.5

    def validate(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"generator.rho must lie in [0, 1], got {self.rho}")
        if self.t_h < 1 or self.t_f < 1:
            raise ConfigError("generator.t_h and generator.t_f must be >= 1")
        if min(self.n_train, self.n_test_iid, self.n_test_shifted) < 0:
            raise ConfigError("generator scene counts must be >= 0")
        if self.dt <= 0:
            raise ConfigError("generator.dt must be positive")
        if self.n_points < 2:
            raise ConfigError("generator.n_points must be >= 2")


@dataclass
class EvalConfig:
    metrics: tuple[str, ...] = ("ade", "fde", "min_ade_k", "rmse")
    k: int = 1
    horizons_s: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0)
    seed: int = 0
    batch_size: int = 64
    class_weights: dict[str, float] = field(default_factory=dict)


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train_diffusion: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage="diffusion", epochs=80, batch_size=32)
    )
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        self.model.validate()
        self.train_diffusion.validate()
        self.train.validate()
        self.generator.validate()
        if self.train_diffusion.stage != "diffusion":
            raise ConfigError("train_diffusion.stage must be 'diffusion'")
        if self.train.stage != "full":
            raise ConfigError("train.stage must be 'full'")
        return self

    def to_dict(self) -> dict[str, Any]:
        return to_dict(self)

    def portable(self) -> "Config":
        """Copy without output locations, so artifacts do not depend on where they are written."""
        return dataclasses.replace(self, train=dataclasses.replace(self.train, log_path=""),
                                   train_diffusion=dataclasses.replace(self.train_diffusion, log_path=""))

    def fingerprint(self) -> str:
        return fingerprint(self.portable())


def to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_dict(v) for k, v in obj.items()}
    return obj


def fingerprint(obj: Any) -> str:
    """Stable sha256 over the canonical JSON form of a config object."""
    blob = json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def from_dict(cls: type, data: dict[str, Any] | None, path: str = "", base: Any = None) -> Any:
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys.

    Missing keys keep their value in ``base`` (the class defaults when None).
    """
    base = cls() if base is None else base
    if data is None:
        return base
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{path + '.' if path else ''}{key}: unknown config key")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        where = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(hint, value, where, getattr(base, name))
    return dataclasses.replace(base, **kwargs)


def _coerce(hint: Any, value: Any, where: str, current: Any = None) -> Any:
    if dataclasses.is_dataclass(hint):
        if isinstance(value, (int, float)) and hint is LossWeight:
            return LossWeight(float(value), False)
        return from_dict(hint, value, where, current)
    origin = typing.get_origin(hint)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(hint)
        inner = args[0]
        return tuple(_coerce(inner, v, where) for v in value)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return {str(k): float(v) for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def load_config(path: str | Path | None) -> Config:
    """Load a YAML or JSON config file; ``None`` gives the defaults."""
    if path is None:
        return Config().validate()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    return from_dict(Config, data or {}).validate()


def config_from_dict(data: dict[str, Any]) -> Config:
    return from_dict(Config, data).validate()
