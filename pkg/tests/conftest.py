import dataclasses

import numpy as np
import pytest
import torch

from causaltraj.config import (Config, DecoderConfig, DiffusionConfig, EncoderConfig, FusionConfig,
                               GeneratorConfig, ModelConfig, TrainConfig)
from causaltraj.data import AgentTrack, BevRaster, MapPolyline, Scene, Trajectory
from causaltraj.synthetic import generate_confounded_dataset


def make_track(points, history_len, valid=None, cls="vehicle", dt=0.5):
    points = np.asarray(points, dtype=float)
    valid = np.ones(len(points), bool) if valid is None else np.asarray(valid, bool)
    points = points * valid[:, None]
    return AgentTrack(Trajectory(points, valid, dt), history_len, cls)


def straight_track(t_h=4, t_f=6, v=(1.0, 0.0), start=(0.0, 0.0), cls="vehicle"):
    steps = np.arange(t_h + 1 + t_f)[:, None]
    return make_track(np.asarray(start) + steps * np.asarray(v), t_h + 1, cls=cls)


def make_scene(scene_id="s0", t_h=4, t_f=6, n_neighbors=2, n_polylines=3, seed=0, maneuver=0,
               bev_size=16, cls="vehicle"):
    rng = np.random.default_rng(seed)
    target = straight_track(t_h, t_f, v=(rng.uniform(0.5, 1.5), rng.normal(0, 0.1)), cls=cls)
    nbrs = [straight_track(t_h, t_f, v=(rng.uniform(0.5, 1.5), 0.0), start=(rng.uniform(-8, 8), rng.uniform(-4, 4)))
            for _ in range(n_neighbors)]
    polys = []
    for i in range(n_polylines):
        xs = np.linspace(-20, 20, 5)
        pts = np.stack([xs, np.full(5, 3.5 * (i - 1) + rng.normal(0, 0.1)), np.full(5, i % 2), np.full(5, i)], 1)
        polys.append(MapPolyline(pts, i))
    bev = BevRaster(rng.uniform(0, 1, (bev_size, bev_size)), rng.uniform(0, 1, (bev_size, bev_size)),
                    rng.uniform(0, 1, (bev_size, bev_size)), 0.5)
    return Scene(scene_id, 0.5, t_h, t_f, target, nbrs, polys, bev, maneuver)


def tiny_model_config(d=8, n=2, t_rec=2, t_f=4, steps=5, **over) -> ModelConfig:
    cfg = ModelConfig(
        encoders=EncoderConfig(d_model=d, pyramid_grid=2, bev_channels=2),
        diffusion=DiffusionConfig(steps=steps, n_samples=n, hidden=8, blocks=1),
        fusion=FusionConfig(t_rec=t_rec, channels=4),
        decoder=DecoderConfig(t_f=t_f),
    )
    return dataclasses.replace(cfg, **over)


def small_config(epochs=2, n_train=24, n_test=8, **model_over) -> Config:
    gen = GeneratorConfig(n_train=n_train, n_test_iid=n_test, n_test_shifted=n_test, bev_size=16)
    model = tiny_model_config(d=16, n=2, t_rec=2, t_f=10, steps=5, **model_over)
    return Config(model=model,
                  train_diffusion=TrainConfig(stage="diffusion", epochs=epochs, batch_size=8),
                  train=TrainConfig(epochs=epochs, batch_size=8), generator=gen)


@pytest.fixture
def scene():
    return make_scene()


@pytest.fixture(scope="session")
def small_data():
    cfg = small_config()
    return cfg, generate_confounded_dataset(cfg.generator, seed=0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
