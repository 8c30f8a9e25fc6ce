import copy
import json
import math

import numpy as np
import pytest
import torch

from warpnerf import dataio
from warpnerf.dataio import (Blob, DataError, SyntheticSceneConfig, generate_blob_dataset,
                             load_manifest, save_manifest, synth_density_color)
from warpnerf.metrics import psnr
from warpnerf.renderer import RenderConfig, render_image


def test_density_at_center_is_amplitude(single_blob):
    sigma, color = synth_density_color(np.zeros(3), np.zeros(2), single_blob)
    assert sigma == pytest.approx(5.0)
    np.testing.assert_allclose(color, [1.0, 0.5, 0.25])


def test_density_decays(single_blob):
    sigma, _ = synth_density_color(np.array([3.0, 0, 0]), np.zeros(2), single_blob)  # 10 widths
    assert sigma < 5.0 * math.exp(-45)


def test_density_peak_moves_with_expression():
    motion = np.zeros((3, 2))
    motion[:, 0] = [0.5, 0.0, 0.0]
    cfg = SyntheticSceneConfig([Blob(np.array([0.1, -0.2, 0.3]), np.ones(3), 4.0, 0.25, motion)], E=2)
    step = 0.02
    axis = np.arange(-1.0, 1.0 + step / 2, step)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1)
    sigma, _ = synth_density_color(grid, np.array([1.0, 0.0]), cfg)
    peak = grid[np.unravel_index(np.argmax(sigma), sigma.shape)]
    np.testing.assert_allclose(peak, [0.6, -0.2, 0.3], atol=step / 2 + 1e-9)


def test_density_blob_order_invariant(small_scene):
    cfg, _ = small_scene
    rev = copy.deepcopy(cfg)
    rev.blobs = rev.blobs[::-1]
    x = np.random.default_rng(0).uniform(-1, 1, (200, 3))
    d = np.array([0.3, -0.7])
    s1, c1 = synth_density_color(x, d, cfg)
    s2, c2 = synth_density_color(x, d, rev)
    np.testing.assert_allclose(s1, s2, rtol=1e-12)
    np.testing.assert_allclose(c1, c2, atol=1e-12)


def test_density_bounds(small_scene):
    cfg, _ = small_scene
    x = np.random.default_rng(1).uniform(-2, 2, (500, 3))
    s, c = synth_density_color(x, np.array([1.0, -1.0]), cfg)
    assert np.all(s >= 0) and np.all(c >= 0) and np.all(c <= 1)


def test_density_checks_expression_length(single_blob):
    with pytest.raises(ValueError):
        synth_density_color(np.zeros(3), np.zeros(3), single_blob)


def test_generate_deterministic_and_distinct_poses(small_scene):
    cfg, scene = small_scene
    again = generate_blob_dataset(cfg, 6, (32, 32), n_val=1)
    for a, b in zip(scene.frames, again.frames):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.pose, b.pose)
    poses = {tuple(np.round(f.pose[:3, 3], 9)) for f in scene.frames}
    assert len(poses) == 6
    assert scene.splits == {"train": [0, 1, 2, 3, 4], "val": [5]}


def test_generate_empty_scene_is_black():
    cfg = SyntheticSceneConfig(blobs=[], E=2, seed=3)
    scene = generate_blob_dataset(cfg, 2, (8, 8))
    assert all(np.all(f.image == 0) for f in scene.frames)


def test_generate_rejects_bad_size(single_blob):
    with pytest.raises(ValueError):
        generate_blob_dataset(single_blob, 1, (0, 8))
    with pytest.raises(ValueError):
        generate_blob_dataset(single_blob, 0, (8, 8))


def test_oracle_converged(small_scene):
    cfg, scene = small_scene
    f = scene.frames[0]
    doubled = dataio.oracle_render(cfg, f.delta, f.pose, f.intrinsics, 32, 32, scene.near, scene.far,
                                   n_samples=2048)
    assert np.abs(doubled - f.image).max() < 1e-4


def test_renderer_matches_stored_oracle(tmp_path, small_scene):
    cfg, scene = small_scene
    path = dataio.write_scene(tmp_path, cfg, scene)
    loaded = load_manifest(path)
    for f in loaded.frames[:3]:
        def fn(p, d, delta=f.delta):
            s, c = synth_density_color(p.numpy(), delta, cfg)
            return torch.from_numpy(s), torch.from_numpy(c)
        _, fine = render_image(f.intrinsics, f.pose, 32, 32, fn, fn, RenderConfig(256, 0),
                               loaded.near, loaded.far, dtype=torch.float64)
        assert psnr(fine.rgb, f.image) > 40.0


def test_manifest_round_trip(tmp_path, small_scene):
    _, scene = small_scene
    scene = copy.deepcopy(scene)
    save_manifest(scene, tmp_path / "scene.json")
    loaded = load_manifest(tmp_path / "scene.json")
    assert len(loaded.frames) == 6 and loaded.expr_dim == 2
    assert loaded.splits == scene.splits and loaded.near == scene.near and loaded.far == scene.far
    for a, b in zip(scene.frames, loaded.frames):
        assert a.image_path == b.image_path
        assert np.abs(a.delta - b.delta).max() <= 1e-12
        assert np.abs(a.pose - b.pose).max() <= 1e-12
        assert np.abs(np.subtract(a.intrinsics, b.intrinsics)).max() <= 1e-12
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12
    save_manifest(loaded, tmp_path / "again.json", write_images=False)
    assert json.loads((tmp_path / "again.json").read_text()) == json.loads((tmp_path / "scene.json").read_text())


def _write(tmp_path, scene, mutate):
    save_manifest(copy.deepcopy(scene), tmp_path / "scene.json")
    raw = json.loads((tmp_path / "scene.json").read_text())
    mutate(raw)
    (tmp_path / "scene.json").write_text(json.dumps(raw))
    return tmp_path / "scene.json"


def test_manifest_three_frames(tmp_path, small_scene):
    _, scene = small_scene
    p = _write(tmp_path, scene, lambda r: r.update(frames=r["frames"][:3], splits={}))
    m = load_manifest(p)
    assert len(m.frames) == 3 and m.expr_dim == 2


def test_manifest_bad_depth_bounds(tmp_path, small_scene):
    p = _write(tmp_path, small_scene[1], lambda r: r.update(near=3.0, far=3.0))
    with pytest.raises(DataError, match="invalid depth bounds"):
        load_manifest(p)


def test_manifest_delta_length_mismatch(tmp_path, small_scene):
    p = _write(tmp_path, small_scene[1], lambda r: r["frames"][2].update(delta=[0.0, 1.0, 2.0]))
    with pytest.raises(DataError, match="frame 2"):
        load_manifest(p)


def test_manifest_non_orthonormal(tmp_path, small_scene):
    p = _write(tmp_path, small_scene[1], lambda r: r["frames"][1].update(pose_R=[1, 0, 0, 0, 2, 0, 0, 0, 1]))
    with pytest.raises(DataError, match="frame 1.*orthonormal"):
        load_manifest(p)


def test_manifest_missing_file_and_image(tmp_path, small_scene):
    with pytest.raises(DataError, match="not found"):
        load_manifest(tmp_path / "nope.json")
    p = _write(tmp_path, small_scene[1], lambda r: r["frames"][4].update(image="missing.png"))
    with pytest.raises(DataError, match="frame 4"):
        load_manifest(p)


def test_manifest_schema_violation(tmp_path, small_scene):
    p = _write(tmp_path, small_scene[1], lambda r: r["frames"][0].pop("pose_t"))
    with pytest.raises(DataError, match="frame 0"):
        load_manifest(p)


def test_driver_round_trip(tmp_path):
    seq = np.random.default_rng(0).normal(size=(5, 2))
    dataio.write_driver(tmp_path / "d.csv", seq)
    np.testing.assert_array_equal(dataio.read_driver(tmp_path / "d.csv"), seq)
    (tmp_path / "e.csv").write_text("a,b\n")
    with pytest.raises(DataError):
        dataio.read_driver(tmp_path / "e.csv")
