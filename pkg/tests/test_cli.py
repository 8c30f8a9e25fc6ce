import json

import numpy as np
import pytest
from PIL import Image

from warpnerf import dataio
from warpnerf.cli import (EXIT_DATA, EXIT_OK, EXIT_USAGE, cmd_edit, cmd_eval, cmd_reenact, cmd_render,
                          cmd_train, main, showcase_poses)
from warpnerf.renderer import RenderConfig
from warpnerf.training import TrainConfig, load_checkpoint

from conftest import TINY

RC = RenderConfig(6, 6)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "scene"), "--n-frames", "6", "--n-val", "2",
                 "--size", "24", "--seed", "3", "--expressions", "2"]) == EXIT_OK
    manifest = root / "scene" / "scene.json"
    ckpt = root / "model.ckpt"
    cmd_train([manifest], ckpt, TrainConfig(iterations=3, rays_per_step=32), TINY,
              RenderConfig(6, 6, jitter=True), log_path=root / "log.csv")
    return root, manifest, ckpt


def test_gen_data_layout(workspace):
    root, manifest, _ = workspace
    scene = dataio.load_manifest(manifest)
    assert len(scene.frames) == 6 and scene.split("val") == [4, 5]
    assert scene.splits["inputs"] == [0, 1]
    assert dataio.read_scene_config(manifest).E == 2
    assert len((root / "log.csv").read_text().splitlines()) == 4


def test_render_three_views(workspace, tmp_path):
    _, manifest, ckpt = workspace
    code = main(["render", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--inputs", "0,1,2",
                 "--out", str(tmp_path), "--n-coarse", "6", "--n-fine", "6"])
    assert code == EXIT_OK
    pngs = sorted(p.name for p in tmp_path.glob("view_*.png") if "depth" not in p.name)
    assert pngs == ["view_000.png", "view_001.png", "view_002.png"]
    assert (tmp_path / "view_000_depth.png").exists()
    meta = json.loads((tmp_path / "view_000.json").read_text())
    assert meta["inputs"] == [0, 1, 2]


def test_render_pose_file_and_size(workspace, tmp_path):
    _, manifest, ckpt = workspace
    scene = dataio.load_manifest(manifest)
    from warpnerf.cli import write_poses
    write_poses(tmp_path / "poses.json", [scene.frames[4].pose])
    code = main(["render", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--inputs", "0",
                 "--pose-file", str(tmp_path / "poses.json"), "--size", "16", "--out", str(tmp_path / "o"),
                 "--n-coarse", "4", "--n-fine", "0"])
    assert code == EXIT_OK
    assert Image.open(tmp_path / "o" / "view_000.png").size == (16, 16)


def test_missing_frame_id(workspace, tmp_path, capsys):
    _, manifest, ckpt = workspace
    code = main(["render", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--inputs", "0,17",
                 "--out", str(tmp_path)])
    assert code == EXIT_DATA
    assert "17" in capsys.readouterr().err


def test_usage_errors(workspace, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["render", "--manifest", "x"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_missing_checkpoint(workspace, tmp_path):
    _, manifest, _ = workspace
    assert main(["render", "--checkpoint", str(tmp_path / "nope"), "--manifest", str(manifest),
                 "--out", str(tmp_path)]) == EXIT_DATA


def test_edit_at_first_input_matches_render(workspace, tmp_path):
    _, manifest, ckpt = workspace
    state = load_checkpoint(ckpt)
    scene = dataio.load_manifest(manifest)
    poses = showcase_poses(scene)
    a = cmd_render(state, scene, [1, 0], poses, tmp_path / "r", render_cfg=RC)
    b = cmd_edit(state, scene, [1, 0], scene.frames[1].delta, poses, tmp_path / "e", render_cfg=RC)
    for pa, pb in zip(a, b):
        assert np.array_equal(np.asarray(Image.open(pa)), np.asarray(Image.open(pb)))


def test_edit_wrong_length(workspace, tmp_path, capsys):
    _, manifest, ckpt = workspace
    code = main(["edit", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--delta", "0.1,0.2,0.3",
                 "--out", str(tmp_path)])
    assert code == EXIT_DATA
    assert "length 3" in capsys.readouterr().err
    assert main(["edit", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--delta", "a,b",
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_incompatible_expression_dim(workspace, tmp_path):
    root, _, ckpt = workspace
    main(["gen-data", "--out", str(tmp_path / "e3"), "--n-frames", "2", "--n-val", "0", "--size", "16",
          "--expr-dim", "3"])
    assert main(["render", "--checkpoint", str(ckpt), "--manifest", str(tmp_path / "e3" / "scene.json"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def _frames(paths):
    return [np.asarray(Image.open(p)) for p in paths]


def test_reenact_window_zero_is_per_frame_edit(workspace, tmp_path):
    _, manifest, ckpt = workspace
    state = load_checkpoint(ckpt)
    scene = dataio.load_manifest(manifest)
    driver = np.random.default_rng(0).uniform(-1, 1, (4, 2))
    pose = scene.frames[4].pose
    seq = _frames(cmd_reenact(state, scene, [0, 1], driver, 0, pose, tmp_path / "re", render_cfg=RC))
    for t, img in enumerate(seq):
        ref = _frames(cmd_edit(state, scene, [0, 1], driver[t], [pose], tmp_path / f"ed{t}", render_cfg=RC))[0]
        assert np.array_equal(img, ref)


def test_reenact_constant_driver(workspace, tmp_path):
    root, manifest, ckpt = workspace
    dataio.write_driver(tmp_path / "drv.csv", np.tile([[0.3, -0.2]], (5, 1)))
    code = main(["reenact", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--inputs", "0,1",
                 "--driver", str(tmp_path / "drv.csv"), "--window", "2", "--out", str(tmp_path / "o"),
                 "--n-coarse", "6", "--n-fine", "6"])
    assert code == EXIT_OK
    seq = _frames(sorted(p for p in (tmp_path / "o").glob("frame_*.png") if "depth" not in p.name))
    assert len(seq) == 5
    assert all(np.array_equal(seq[0], s) for s in seq[1:])


def test_reenact_empty_driver(workspace, tmp_path):
    _, manifest, ckpt = workspace
    (tmp_path / "empty.csv").write_text("d0,d1\n")
    assert main(["reenact", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                 "--driver", str(tmp_path / "empty.csv"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_eval_rows_and_hook(workspace, tmp_path):
    _, manifest, ckpt = workspace
    scene = dataio.load_manifest(manifest)
    report = cmd_eval(ckpt, scene, "val", tmp_path / "m.json", render_cfg=RC)
    assert len(report.rows) == len(scene.split("val"))
    assert json.loads((tmp_path / "m.json").read_text())["mean"]["psnr"] == pytest.approx(report.mean_psnr)
    perfect = cmd_eval(None, scene, "val", render_fn=lambda j, f: f.image)
    assert all(r.psnr == 99.0 and r.ssim == 1.0 for r in perfect.rows)


def test_eval_empty_split(workspace):
    _, manifest, ckpt = workspace
    scene = dataio.load_manifest(manifest)
    scene.splits["val"] = []
    with pytest.raises(dataio.DataError, match="empty"):
        cmd_eval(ckpt, scene, "val")


def test_render_deterministic(workspace, tmp_path):
    _, manifest, ckpt = workspace
    args = ["render", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--n-coarse", "6", "--n-fine", "6"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("view_000.png", "view_002_depth.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
