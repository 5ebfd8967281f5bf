"""Robustness perturbations: curvature-scaled observation noise and frame dropping.

Both only touch history frames; ground-truth futures are never modified.
"""
from __future__ import annotations

import zlib

import numpy as np

from causaltraj.data import AgentTrack, PerturbationSpec, Scene


def curvature(points: np.ndarray, delta_t: int = 1) -> np.ndarray:
    """Squared change of velocity over ``delta_t`` frames, one value per frame.

    Velocities are forward differences. Frames without a forward difference
    reuse the last computable value.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < delta_t + 2:
        raise ValueError(f"need at least {delta_t + 2} frames, got {n}")
    vel = np.diff(points[:, :2], axis=0)
    dv = vel[delta_t:] - vel[:-delta_t]
    gamma = np.sum(dv**2, axis=1)
    out = np.empty(n)
    out[: len(gamma)] = gamma
    out[len(gamma) :] = gamma[-1]
    return out


def inject_noise(track: AgentTrack, alpha: float, delta_t: int = 1, seed: int = 0) -> AgentTrack:
    """Add Gaussian noise with std ``alpha * (gamma_t + 1)`` to every history frame."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if delta_t < 1:
        raise ValueError("delta_t must be >= 1")
    out = track.copy()
    if alpha == 0:
        return out
    h = track.history_len
    hist = track.trajectory.points[:h]
    sigma = alpha * (curvature(hist, delta_t) + 1.0)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((h, 2)) * sigma[:, None]
    valid = track.trajectory.valid[:h]
    out.trajectory.points[:h][valid] += noise[valid]
    return out


def n_dropped(fraction: float, t_h: int) -> int:
    # half-up rounding: round(0.5) would give 0 under banker's rounding
    return int(np.floor(fraction * t_h + 0.5))


def drop_frames(track: AgentTrack, fraction: float, seed: int = 0) -> AgentTrack:
    """Zero ``round(fraction * t_h)`` history frames chosen without replacement."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    out = track.copy()
    h = track.history_len
    k = n_dropped(fraction, h - 1)
    if k == 0:
        return out
    rng = np.random.default_rng(seed)
    idx = rng.choice(h, size=k, replace=False)
    out.trajectory.points[idx] = 0.0
    out.trajectory.valid[idx] = False
    if out.extras is not None:
        out.extras[idx] = 0.0
    return out


def _track_seed(base: int, scene_id: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base, zlib.crc32(scene_id.encode()), index])


def perturb_scene(scene: Scene, spec: PerturbationSpec) -> Scene:
    """Apply ``spec`` to the target and every neighbour history.

    Per-track seeds derive from (spec seed, scene id, track index), so the
    result does not depend on dataset order.
    """
    if spec.kind == "none":
        return scene
    tracks = [scene.target, *scene.neighbors]
    new = []
    for i, tr in enumerate(tracks):
        seed = int(_track_seed(spec.rng_seed, scene.scene_id, i).generate_state(1)[0])
        if spec.kind == "noise":
            new.append(inject_noise(tr, spec.alpha, spec.delta_t, seed))
        else:
            new.append(drop_frames(tr, spec.drop_fraction, seed))
    return scene.replace_tracks(new[0], new[1:])


def perturb_dataset(scenes: list[Scene], spec: PerturbationSpec) -> list[Scene]:
    return [perturb_scene(s, spec) for s in scenes]
