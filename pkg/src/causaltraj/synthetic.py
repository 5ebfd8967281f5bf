"""Synthetic confounded crosswalk benchmark.

Three maneuvers (keep speed, accelerate, stop) on a straight three-lane road.
A crosswalk polyline is spuriously tied to the accelerate maneuver: in the
train split a fraction ``rho`` of scenes *agree* (crosswalk present exactly
when the target accelerates); ``test_iid`` keeps that rate and
``test_shifted`` flips it to ``1 - rho``. The history carries the genuine cue,
an early fraction of the future acceleration.

All scenes are expressed in a target-centric frame: the target's true
position at the present frame is the origin and it drives along +x.
"""
from __future__ import annotations

import numpy as np

from causaltraj.config import GeneratorConfig
from causaltraj.data import (ROAD_CROSSWALK, ROAD_LANE, AgentTrack, BevRaster, MapPolyline,
                             Scene, Trajectory)

KEEP, ACCELERATE, STOP = 0, 1, 2
MANEUVERS = ("keep-speed", "accelerate", "stop")
LANE_OFFSETS = (-3.5, 0.0, 3.5)
SPLIT_NAMES = ("train", "test_iid", "test_shifted")


def has_crosswalk(scene: Scene) -> bool:
    return any(np.any(pl.points[:, 2] == ROAD_CROSSWALK) for pl in scene.map)


def cooccurrence_rate(scenes: list[Scene]) -> float:
    """Fraction of scenes where crosswalk presence agrees with 'accelerate'."""
    if not scenes:
        return float("nan")
    agree = [has_crosswalk(s) == (s.maneuver_label == ACCELERATE) for s in scenes]
    return float(np.mean(agree))


def _speed_profile(maneuver: int, v0: float, cfg: GeneratorConfig, rng) -> tuple[float, float]:
    """Return (future acceleration, stop time or inf)."""
    horizon = cfg.t_f * cfg.dt
    if maneuver == KEEP:
        return 0.0, np.inf
    if maneuver == ACCELERATE:
        return cfg.accel, np.inf
    latest = max((cfg.t_f - 1) * cfg.dt, cfg.dt)
    t_stop = min(rng.uniform(0.5, 0.85) * horizon, latest)
    return -v0 / t_stop, t_stop


def _target_track(maneuver: int, cfg: GeneratorConfig, rng) -> AgentTrack:
    v0 = rng.uniform(*cfg.speed_range)
    accel, t_stop = _speed_profile(maneuver, v0, cfg, rng)
    t_hist = np.arange(-cfg.t_h, 1) * cfg.dt
    a_hist = cfg.history_cue * accel
    x_hist = v0 * t_hist + 0.5 * a_hist * t_hist**2
    t_fut = np.arange(1, cfg.t_f + 1) * cfg.dt
    t_move = np.minimum(t_fut, t_stop)
    x_fut = v0 * t_move + 0.5 * accel * t_move**2
    hist = np.stack([x_hist, np.zeros_like(x_hist)], axis=1)
    hist += rng.normal(0.0, cfg.obs_noise, hist.shape)
    fut = np.stack([x_fut, np.zeros_like(x_fut)], axis=1)
    pts = np.concatenate([hist, fut])
    return AgentTrack(Trajectory(pts, np.ones(len(pts), bool), cfg.dt), cfg.t_h + 1, "vehicle")


def _neighbor_tracks(cfg: GeneratorConfig, rng) -> list[AgentTrack]:
    tracks = []
    for _ in range(int(rng.integers(0, cfg.max_neighbors + 1))):
        lane = LANE_OFFSETS[int(rng.integers(0, 3))]
        if lane == 0.0:
            x0 = rng.choice([-1.0, 1.0]) * rng.uniform(15.0, 35.0)
        else:
            x0 = rng.uniform(-25.0, 35.0)
        speed = rng.uniform(6.0, 14.0)
        t = np.arange(-cfg.t_h, cfg.t_f + 1) * cfg.dt
        pts = np.stack([x0 + speed * t, np.full_like(t, lane)], axis=1)
        pts[: cfg.t_h + 1] += rng.normal(0.0, cfg.obs_noise, (cfg.t_h + 1, 2))
        label = "vehicle" if rng.uniform() < 0.8 else "bicycle"
        tracks.append(AgentTrack(Trajectory(pts, np.ones(len(pts), bool), cfg.dt), cfg.t_h + 1, label))
    return tracks


def _map(crosswalk: bool, cfg: GeneratorConfig, rng) -> list[MapPolyline]:
    shift = rng.uniform(-0.3, 0.3)
    xs = np.linspace(-40.0, 80.0, cfg.n_points)
    polylines = []
    for lane_id, y in enumerate(LANE_OFFSETS):
        pts = np.stack([xs, np.full_like(xs, y + shift),
                        np.full_like(xs, ROAD_LANE), np.full_like(xs, lane_id)], axis=1)
        polylines.append(MapPolyline(pts, lane_id))
    if crosswalk:
        xc = rng.uniform(8.0, 30.0)
        ys = np.linspace(-7.0, 7.0, cfg.n_points)
        pts = np.stack([np.full_like(ys, xc), ys, np.full_like(ys, ROAD_CROSSWALK),
                        np.full_like(ys, -1.0)], axis=1)
        polylines.append(MapPolyline(pts, len(polylines)))
    return polylines


def _paint(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray, res: float) -> None:
    size = grid.shape[0]
    half = size * res / 2.0
    cols = np.floor((xs + half) / res).astype(int)
    rows = np.floor((ys + half) / res).astype(int)
    keep = (cols >= 0) & (cols < size) & (rows >= 0) & (rows < size)
    grid[rows[keep], cols[keep]] = 1.0


def _paint_box(grid, cx, cy, length, width, res):
    xs, ys = np.meshgrid(np.arange(cx - length / 2, cx + length / 2, res / 2),
                         np.arange(cy - width / 2, cy + width / 2, res / 2))
    _paint(grid, xs.ravel(), ys.ravel(), res)


def render_bev(target: AgentTrack, neighbors: list[AgentTrack], polylines: list[MapPolyline],
               size: int = 64, res: float = 0.5) -> BevRaster:
    """Rasterize a target-centric scene into Agent / Map / Raster layers."""
    agent = np.zeros((size, size))
    road = np.zeros((size, size))
    drivable = np.zeros((size, size))
    for tr in (target, *neighbors):
        if tr.history_valid[-1]:
            x, y = tr.trajectory.points[tr.history_len - 1]
            dims = (4.5, 2.0) if tr.class_label == "vehicle" else (1.8, 0.8)
            _paint_box(agent, x, y, *dims, res)
    for pl in polylines:
        pts = pl.points
        if np.all(pts[:, 2] == ROAD_CROSSWALK):
            x = pts[0, 0]
            _paint_box(road, x, 0.5 * (pts[0, 1] + pts[-1, 1]), 3.0, abs(pts[-1, 1] - pts[0, 1]), res)
            continue
        for a, b in zip(pts[:-1], pts[1:]):
            seg = np.linalg.norm(b[:2] - a[:2])
            k = max(int(np.ceil(seg / (res / 2))), 1)
            s = np.linspace(0.0, 1.0, k + 1)
            _paint(road, a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), res)
    half = size * res / 2
    xs, ys = np.meshgrid(np.arange(-half, half, res / 2), np.arange(-5.25, 5.25, res / 2))
    _paint(drivable, xs.ravel(), ys.ravel(), res)
    return BevRaster(agent, road, drivable, res)


def _split(name: str, n: int, rate: float, cfg: GeneratorConfig, seed: int, index: int) -> list[Scene]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    maneuvers = rng.permutation(np.arange(n) % 3)
    n_agree = int(np.floor(rate * n + 0.5))
    agree = np.zeros(n, bool)
    agree[rng.permutation(n)[:n_agree]] = True
    scenes = []
    for i in range(n):
        m = int(maneuvers[i])
        crosswalk = (m == ACCELERATE) == bool(agree[i])
        target = _target_track(m, cfg, rng)
        neighbors = _neighbor_tracks(cfg, rng)
        polylines = _map(crosswalk, cfg, rng)
        bev = render_bev(target, neighbors, polylines, cfg.bev_size, cfg.bev_res)
        scenes.append(Scene(f"{name}-{i:05d}", cfg.dt, cfg.t_h, cfg.t_f, target, neighbors,
                            polylines, bev, m))
    return scenes


def generate_confounded_dataset(config: GeneratorConfig | None = None, seed: int = 0) -> dict[str, list[Scene]]:
    """Emit ``{"train", "test_iid", "test_shifted"}`` scene lists."""
    cfg = config or GeneratorConfig()
    cfg.validate()
    counts = (cfg.n_train, cfg.n_test_iid, cfg.n_test_shifted)
    rates = (cfg.rho, cfg.rho, 1.0 - cfg.rho)
    return {name: _split(name, n, r, cfg, seed, i)
            for i, (name, n, r) in enumerate(zip(SPLIT_NAMES, counts, rates))}


def speed_regime_split(scenes_per_split: int, speed_ranges: list[tuple[float, float]], seed: int = 0,
                       base: GeneratorConfig | None = None) -> dict[str, list[Scene]]:
    """Independent domains that differ only in their target speed range."""
    base = base or GeneratorConfig()
    out = {}
    for i, rng_ in enumerate(speed_ranges):
        cfg = GeneratorConfig(**{**base.__dict__, "speed_range": tuple(rng_), "n_train": scenes_per_split,
                                 "n_test_iid": 0, "n_test_shifted": 0})
        scenes = _split(f"domain{i}", scenes_per_split, cfg.rho, cfg, seed, 100 + i)
        out[f"domain{i}"] = scenes
    return out
