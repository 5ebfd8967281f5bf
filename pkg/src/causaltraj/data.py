"""Scene data model and JSON-lines ingestion.

One scene per line::

    {"id": str, "dt": float, "t_h": int, "t_f": int,
     "target": TRACK, "neighbors": [TRACK, ...],
     "map": [{"id": int, "points": [[x, y, road_type, lane_id], ...]}, ...],
     "bev": {"agent": [[...]], "map": [[...]], "raster": [[...]], "res": float},
     "maneuver": int | null}

    TRACK = {"class": "vehicle" | "pedestrian" | "bicycle",
             "history": [[x, y, ...], ...],          # t_h + 1 rows
             "future": [[x, y, ...], ...],           # t_f rows
             "history_valid": [bool, ...], "future_valid": [bool, ...]}

Masked-out frames hold zeros.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from causaltraj.exceptions import SceneParseError, SceneValidationError

AGENT_CLASSES = ("vehicle", "pedestrian", "bicycle")
SPLITS = ("train", "val", "test", "test_iid", "test_shifted")

ROAD_LANE = 0
ROAD_CROSSWALK = 1


@dataclass
class Trajectory:
    points: np.ndarray
    valid: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class AgentTrack:
    """Full track of one agent: ``history_len`` observed frames then the future.

    ``trajectory.points`` holds (x, y); any further state attributes
    (velocity, heading, ...) live in ``extras`` so that ``state_width`` is
    ``2 + extras.shape[1]``.
    """

    trajectory: Trajectory
    history_len: int
    class_label: str = "vehicle"
    extras: np.ndarray | None = None

    @property
    def state_width(self) -> int:
        return 2 if self.extras is None else 2 + self.extras.shape[1]

    @property
    def states(self) -> np.ndarray:
        if self.extras is None:
            return self.trajectory.points
        return np.concatenate([self.trajectory.points, self.extras], axis=1)

    @property
    def history(self) -> np.ndarray:
        return self.states[: self.history_len]

    @property
    def history_valid(self) -> np.ndarray:
        return self.trajectory.valid[: self.history_len]

    @property
    def future(self) -> np.ndarray:
        return self.states[self.history_len :]

    @property
    def future_valid(self) -> np.ndarray:
        return self.trajectory.valid[self.history_len :]

    def copy(self) -> "AgentTrack":
        return AgentTrack(
            Trajectory(self.trajectory.points.copy(), self.trajectory.valid.copy(), self.trajectory.dt),
            self.history_len,
            self.class_label,
            None if self.extras is None else self.extras.copy(),
        )


@dataclass
class MapPolyline:
    points: np.ndarray  # (n, W_m): x, y, road type, lane id
    polyline_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)


@dataclass
class BevRaster:
    agent: np.ndarray
    map: np.ndarray
    raster: np.ndarray
    resolution: float = 0.5

    def __post_init__(self):
        self.agent = np.asarray(self.agent, dtype=np.float64)
        self.map = np.asarray(self.map, dtype=np.float64)
        self.raster = np.asarray(self.raster, dtype=np.float64)

    def stack(self) -> np.ndarray:
        return np.stack([self.agent, self.map, self.raster])


@dataclass
class Scene:
    scene_id: str
    dt: float
    t_h: int
    t_f: int
    target: AgentTrack
    neighbors: list[AgentTrack] = field(default_factory=list)
    map: list[MapPolyline] = field(default_factory=list)
    bev: BevRaster | None = None
    maneuver_label: int | None = None

    def validate(self) -> "Scene":
        validate_scene(self)
        return self

    def replace_tracks(self, target: AgentTrack, neighbors: list[AgentTrack]) -> "Scene":
        return Scene(self.scene_id, self.dt, self.t_h, self.t_f, target, neighbors,
                     self.map, self.bev, self.maneuver_label)


@dataclass
class PerturbationSpec:
    kind: str = "none"
    alpha: float = 0.0
    drop_fraction: float = 0.0
    delta_t: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("noise", "frame_drop", "none"):
            raise SceneValidationError(f"perturbation.kind: unknown kind {self.kind!r}")
        if self.alpha < 0:
            raise SceneValidationError("perturbation.alpha must be >= 0")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise SceneValidationError("perturbation.drop_fraction must lie in [0, 1)")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "PerturbationSpec":
        """Parse ``none``, ``noise:<alpha>`` or ``drop:<fraction>``."""
        text = (text or "none").strip()
        if text == "none":
            return cls(rng_seed=seed)
        kind, _, value = text.partition(":")
        try:
            number = float(value)
        except ValueError:
            raise SceneValidationError(f"perturbation: cannot parse {text!r}") from None
        if kind == "noise":
            return cls("noise", alpha=number, rng_seed=seed)
        if kind in ("drop", "frame_drop"):
            return cls("frame_drop", drop_fraction=number, rng_seed=seed)
        raise SceneValidationError(f"perturbation.kind: unknown kind {kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "drop_fraction": self.drop_fraction,
                "delta_t": self.delta_t, "rng_seed": self.rng_seed}


def _fail(field_name: str, msg: str):
    raise SceneValidationError(f"{field_name}: {msg}")


def _validate_track(track: AgentTrack, t_h: int, t_f: int, name: str) -> None:
    if track.class_label not in AGENT_CLASSES:
        _fail(f"{name}.class", f"unknown class {track.class_label!r}")
    if track.history_len != t_h + 1:
        _fail(f"{name}.history", f"expected {t_h + 1} frames, got {track.history_len}")
    n_future = len(track.trajectory) - track.history_len
    if n_future != t_f:
        _fail(f"{name}.future", f"expected {t_f} frames, got {n_future}")
    pts = track.trajectory.points
    if pts.ndim != 2 or pts.shape[1] != 2:
        _fail(f"{name}.history", "each frame needs at least (x, y)")
    if track.trajectory.valid.shape != (len(pts),):
        _fail(f"{name}.history_valid", "mask length does not match the frame count")
    if not np.all(np.isfinite(track.states)):
        _fail(f"{name}.history", "non-finite coordinates")
    if np.any(track.states[~track.trajectory.valid] != 0):
        _fail(f"{name}.history_valid", "masked-out frames must hold zeros")


def validate_scene(scene: Scene) -> None:
    if not scene.dt > 0:
        _fail("dt", "must be positive")
    if scene.t_h < 0 or scene.t_f < 1:
        _fail("t_h", "t_h must be >= 0 and t_f >= 1")
    _validate_track(scene.target, scene.t_h, scene.t_f, "target")
    width = scene.target.state_width
    for i, nb in enumerate(scene.neighbors):
        _validate_track(nb, scene.t_h, scene.t_f, f"neighbors[{i}]")
        if nb.state_width != width:
            _fail(f"neighbors[{i}].history", "state width differs from the target's")
    n_points = None
    for i, pl in enumerate(scene.map):
        if pl.points.ndim != 2 or len(pl.points) < 2:
            _fail(f"map[{i}].points", "a polyline needs at least 2 waypoints")
        if n_points is None:
            n_points = pl.points.shape
        elif pl.points.shape != n_points:
            _fail(f"map[{i}].points", "all polylines must share the same point count and width")
        if not np.all(np.isfinite(pl.points)):
            _fail(f"map[{i}].points", "non-finite values")
    if scene.bev is not None:
        shape = scene.bev.agent.shape
        for layer in ("agent", "map", "raster"):
            arr = getattr(scene.bev, layer)
            if arr.ndim != 2 or arr.shape != shape:
                _fail(f"bev.{layer}", "all semantic layers must share one H x W shape")
            if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
                _fail(f"bev.{layer}", "intensities must lie in [0, 1]")
        if not scene.bev.resolution > 0:
            _fail("bev.res", "must be positive")
    if scene.maneuver_label is not None and scene.maneuver_label < 0:
        _fail("maneuver", "must be a non-negative integer")


# ---------------------------------------------------------------- JSON I/O


def _track_from_record(rec: dict, t_h: int, dt: float, name: str) -> AgentTrack:
    try:
        hist = np.asarray(rec["history"], dtype=np.float64)
        fut = np.asarray(rec["future"], dtype=np.float64)
    except KeyError as exc:
        _fail(f"{name}.{exc.args[0]}", "missing field")
    except (TypeError, ValueError):
        _fail(f"{name}.history", "frames must be equal-length numeric rows")
    if hist.ndim != 2 or hist.shape[1] < 2:
        _fail(f"{name}.history", "each frame needs at least (x, y)")
    if fut.ndim != 2:
        fut = fut.reshape(0, hist.shape[1])
    if fut.shape[1] != hist.shape[1]:
        _fail(f"{name}.future", "state width differs from history")
    hv = np.asarray(rec.get("history_valid", [True] * len(hist)), dtype=bool)
    fv = np.asarray(rec.get("future_valid", [True] * len(fut)), dtype=bool)
    if hv.shape != (len(hist),):
        _fail(f"{name}.history_valid", "length does not match history")
    if fv.shape != (len(fut),):
        _fail(f"{name}.future_valid", "length does not match future")
    states = np.concatenate([hist, fut], axis=0)
    extras = states[:, 2:] if states.shape[1] > 2 else None
    traj = Trajectory(states[:, :2], np.concatenate([hv, fv]), dt)
    return AgentTrack(traj, len(hist), rec.get("class", "vehicle"), extras)


def scene_from_record(rec: dict) -> Scene:
    """Build and validate a Scene from one decoded JSON record."""
    for key in ("id", "dt", "t_h", "t_f", "target"):
        if key not in rec:
            _fail(key, "missing field")
    dt = float(rec["dt"])
    t_h, t_f = int(rec["t_h"]), int(rec["t_f"])
    target = _track_from_record(rec["target"], t_h, dt, "target")
    neighbors = [_track_from_record(nb, t_h, dt, f"neighbors[{i}]")
                 for i, nb in enumerate(rec.get("neighbors", []))]
    polylines = []
    for i, pl in enumerate(rec.get("map", [])):
        try:
            pts = np.asarray(pl["points"], dtype=np.float64)
        except (KeyError, TypeError, ValueError):
            _fail(f"map[{i}].points", "missing or malformed")
        polylines.append(MapPolyline(pts, int(pl.get("id", i))))
    bev = None
    if rec.get("bev") is not None:
        b = rec["bev"]
        try:
            bev = BevRaster(b["agent"], b["map"], b["raster"], float(b.get("res", 0.5)))
        except KeyError as exc:
            _fail(f"bev.{exc.args[0]}", "missing layer")
        except (TypeError, ValueError):
            _fail("bev", "layers must be rectangular numeric grids")
    maneuver = rec.get("maneuver")
    scene = Scene(str(rec["id"]), dt, t_h, t_f, target, neighbors, polylines, bev,
                  None if maneuver is None else int(maneuver))
    validate_scene(scene)
    return scene


def _track_to_record(track: AgentTrack) -> dict:
    states = track.states
    return {
        "class": track.class_label,
        "history": states[: track.history_len].tolist(),
        "future": states[track.history_len :].tolist(),
        "history_valid": track.history_valid.tolist(),
        "future_valid": track.future_valid.tolist(),
    }


def scene_to_record(scene: Scene) -> dict:
    rec = {
        "id": scene.scene_id,
        "dt": scene.dt,
        "t_h": scene.t_h,
        "t_f": scene.t_f,
        "target": _track_to_record(scene.target),
        "neighbors": [_track_to_record(nb) for nb in scene.neighbors],
        "map": [{"id": pl.polyline_id, "points": pl.points.tolist()} for pl in scene.map],
        "bev": None,
        "maneuver": scene.maneuver_label,
    }
    if scene.bev is not None:
        rec["bev"] = {"agent": scene.bev.agent.tolist(), "map": scene.bev.map.tolist(),
                      "raster": scene.bev.raster.tolist(), "res": scene.bev.resolution}
    return rec


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_record(scene), separators=(",", ":"))


def read_jsonl(path: str | os.PathLike) -> list[Scene]:
    path = Path(path)
    scenes = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneParseError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise SceneParseError(f"{path}: line {lineno}: record must be a JSON object")
            try:
                scenes.append(scene_from_record(rec))
            except SceneValidationError as exc:
                raise SceneValidationError(f"{path}: line {lineno}: {exc}") from exc
    return sorted(scenes, key=lambda s: s.scene_id)


def write_jsonl(scenes: Iterable[Scene], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for scene in scenes:
            fh.write(dumps_scene(scene))
            fh.write("\n")
    return path


def load_dataset(path: str | os.PathLike, split: str = "train") -> list[Scene]:
    """Load one split.

    ``path`` is either a ``.jsonl`` file or a directory holding
    ``<split>.jsonl``. Scenes come back sorted by id.
    """
    if split not in SPLITS:
        raise SceneValidationError(f"split: unknown split {split!r}")
    path = Path(path)
    if path.is_dir():
        path = path / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return read_jsonl(path)


def save_dataset(scenes: Sequence[Scene], directory: str | os.PathLike, split: str) -> Path:
    return write_jsonl(scenes, Path(directory) / f"{split}.jsonl")
