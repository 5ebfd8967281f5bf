import json

import numpy as np
import pytest
from scipy.stats import norm

from causaltraj.config import GeneratorConfig
from causaltraj.data import (PerturbationSpec, load_dataset, save_dataset, scene_from_record,
                             scene_to_record, write_jsonl)
from causaltraj.exceptions import ConfigError, SceneParseError, SceneValidationError
from causaltraj.perturb import curvature, drop_frames, inject_noise, n_dropped, perturb_scene
from causaltraj.synthetic import (ACCELERATE, STOP, cooccurrence_rate, generate_confounded_dataset,
                                  speed_regime_split)

from conftest import make_scene, make_track, straight_track


def test_empty_file_gives_empty_list(tmp_path):
    (tmp_path / "train.jsonl").write_text("")
    assert load_dataset(tmp_path, "train") == []


def test_declared_counts_survive_round_trip(tmp_path):
    s = make_scene(t_h=4, t_f=6, n_neighbors=2, n_polylines=3)
    save_dataset([s], tmp_path, "train")
    (back,) = load_dataset(tmp_path, "train")
    assert (back.t_h, back.t_f, len(back.neighbors), len(back.map)) == (4, 6, 2, 3)
    assert scene_to_record(back) == scene_to_record(s)


def test_records_serialise_field_for_field(tmp_path):
    scenes = [make_scene(f"s{i}", seed=i) for i in range(3)]
    path = write_jsonl(scenes, tmp_path / "x.jsonl")
    lines = path.read_text().splitlines()
    again = write_jsonl(load_dataset(path), tmp_path / "y.jsonl").read_text().splitlines()
    assert [json.loads(a) for a in lines] == [json.loads(b) for b in again]


def test_load_sorts_by_id(tmp_path):
    write_jsonl([make_scene("b"), make_scene("a")], tmp_path / "train.jsonl")
    assert [s.scene_id for s in load_dataset(tmp_path)] == ["a", "b"]


def test_short_history_is_rejected():
    rec = scene_to_record(make_scene(t_h=4))
    rec["target"]["history"] = rec["target"]["history"][:-1]
    rec["target"]["history_valid"] = rec["target"]["history_valid"][:-1]
    with pytest.raises(SceneValidationError, match="target.history"):
        scene_from_record(rec)


def test_malformed_line_names_the_line(tmp_path):
    good = json.dumps(scene_to_record(make_scene()))
    (tmp_path / "train.jsonl").write_text(good + "\n{not json\n")
    with pytest.raises(SceneParseError, match="line 2"):
        load_dataset(tmp_path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.jsonl")


def test_masked_frames_must_be_zero():
    s = make_scene()
    s.target.trajectory.valid[1] = False
    with pytest.raises(SceneValidationError, match="history_valid"):
        s.validate()


def test_bev_layers_must_match():
    s = make_scene()
    s.bev.map = np.zeros((3, 3))
    with pytest.raises(SceneValidationError, match="bev.map"):
        s.validate()


# ------------------------------------------------------------- generator


def test_cooccurrence_rate_matches_rho():
    cfg = GeneratorConfig(n_train=200, n_test_iid=10, n_test_shifted=200, rho=0.9, bev_size=8)
    data = generate_confounded_dataset(cfg, seed=7)
    assert 0.85 <= cooccurrence_rate(data["train"]) <= 0.95
    assert 0.05 <= cooccurrence_rate(data["test_shifted"]) <= 0.15


def test_half_confounding_is_symmetric():
    cfg = GeneratorConfig(n_train=200, n_test_iid=0, n_test_shifted=200, rho=0.5, bev_size=8)
    data = generate_confounded_dataset(cfg, seed=3)
    a, b = cooccurrence_rate(data["train"]), cooccurrence_rate(data["test_shifted"])
    pooled = (a + b) / 2
    z = (a - b) / np.sqrt(pooled * (1 - pooled) * (2 / 200))
    assert 2 * norm.sf(abs(z)) > 0.05


def test_generator_is_byte_deterministic(tmp_path):
    cfg = GeneratorConfig(n_train=20, n_test_iid=5, n_test_shifted=5, bev_size=8)
    for d in ("a", "b"):
        data = generate_confounded_dataset(cfg, seed=11)
        for k, v in data.items():
            save_dataset(v, tmp_path / d, k)
    for k in data:
        assert (tmp_path / "a" / f"{k}.jsonl").read_bytes() == (tmp_path / "b" / f"{k}.jsonl").read_bytes()


def test_rho_out_of_range():
    with pytest.raises(ConfigError, match="rho"):
        generate_confounded_dataset(GeneratorConfig(rho=1.5))


def test_futures_follow_the_maneuver():
    cfg = GeneratorConfig(n_train=60, n_test_iid=0, n_test_shifted=0, bev_size=8)
    for s in generate_confounded_dataset(cfg, seed=2)["train"]:
        pts = s.target.trajectory.points
        v_first = np.linalg.norm(pts[s.t_h + 1] - pts[s.t_h]) / s.dt
        v_last = np.linalg.norm(pts[-1] - pts[-2]) / s.dt
        if s.maneuver_label == STOP:
            assert v_last < 0.1
        elif s.maneuver_label == ACCELERATE:
            assert v_last > v_first


def test_speed_regimes_do_not_overlap():
    d = speed_regime_split(30, [(4, 6), (12, 14)], seed=0, base=GeneratorConfig(bev_size=8))
    assert set(d) == {"domain0", "domain1"}
    assert all(len(v) == 30 for v in d.values())


# ----------------------------------------------------------- perturbation


def test_curvature_hand_example():
    pts = np.array([[0, 0], [1, 0], [3, 0], [6, 0]], float)
    gamma = curvature(pts, 1)
    assert gamma[0] == 1.0 and gamma[1] == 1.0
    # frames without a forward difference reuse the last computable value
    assert gamma[2] == gamma[1] and gamma[3] == gamma[1]


def test_noise_scale_follows_curvature():
    # x = (0, 1, 3, 6): sigma_0 = 2 alpha
    pts = np.array([[0, 0], [1, 0], [3, 0], [6, 0], [10, 0]], float)
    alpha = 0.5
    draws = np.array([inject_noise(make_track(pts, 4), alpha, 1, seed).trajectory.points[0] for seed in range(4000)])
    assert abs(draws.std(0).mean() - 2 * alpha) < 0.05


def test_constant_velocity_track_has_flat_noise():
    tr = straight_track(t_h=6, t_f=2)
    assert np.all(curvature(tr.history) == 0)


def test_zero_alpha_and_zero_fraction_are_identities():
    tr = straight_track()
    assert np.array_equal(inject_noise(tr, 0.0, seed=1).trajectory.points, tr.trajectory.points)
    out = drop_frames(tr, 0.0, seed=1)
    assert np.array_equal(out.trajectory.points, tr.trajectory.points)
    assert np.array_equal(out.trajectory.valid, tr.trajectory.valid)


def test_noise_never_touches_the_future():
    tr = straight_track(t_h=4, t_f=6)
    out = inject_noise(tr, 8.0, seed=3)
    assert np.array_equal(out.future, tr.future)
    assert not np.array_equal(out.history, tr.history)


def test_negative_alpha_rejected():
    with pytest.raises(ValueError):
        inject_noise(straight_track(), -1.0)


def test_drop_count_and_determinism():
    tr = straight_track(t_h=10, t_f=3)
    out = drop_frames(tr, 0.2, seed=5)
    dropped = ~out.history_valid
    assert dropped.sum() == 2
    assert np.all(out.history[dropped] == 0)
    assert np.array_equal(out.future, tr.future)
    a, b = drop_frames(tr, 0.4, seed=9), drop_frames(tr, 0.4, seed=9)
    assert np.array_equal(a.trajectory.valid, b.trajectory.valid)


def test_drop_rounding_is_half_up():
    assert n_dropped(0.25, 2) == 1
    assert n_dropped(0.4, 6) == 2


def test_drop_fraction_must_be_below_one():
    with pytest.raises(ValueError):
        drop_frames(straight_track(), 1.0)
    with pytest.raises(SceneValidationError):
        PerturbationSpec("frame_drop", drop_fraction=1.0)


def test_perturbation_spec_parse():
    assert PerturbationSpec.parse("noise:8").alpha == 8.0
    assert PerturbationSpec.parse("drop:0.4").drop_fraction == 0.4
    assert PerturbationSpec.parse("none").kind == "none"
    with pytest.raises(SceneValidationError):
        PerturbationSpec.parse("blur:1")


def test_perturb_scene_keeps_validity():
    s = make_scene()
    perturb_scene(s, PerturbationSpec("frame_drop", drop_fraction=0.4, rng_seed=1)).validate()
    perturb_scene(s, PerturbationSpec("noise", alpha=2.0, rng_seed=1)).validate()
