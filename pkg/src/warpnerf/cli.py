"""Command-line entry point: gen-data, train, render, edit, reenact, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import dataio
from .dataio import DataError, SceneManifest, TrackedFrame
from .geometry import Intrinsics, orbit_pose
from .metrics import MetricReport
from .model import ModelConfig
from .renderer import RenderConfig, RenderOutput, save_render
from .training import (CheckpointError, NumericError, TrainConfig, TrainState, init_state,
                       load_checkpoint, save_checkpoint, train)

log = logging.getLogger("warpnerf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_PRESETS = {
    "default": ModelConfig(),
    "toy": ModelConfig(channels=(8, 16, 32, 32), d_latent=32, flow_hidden=16, hidden=64,
                       view_layers=1, trunk_layers=2, color_hidden=32),
}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def parse_ids(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse frame list '{text}'") from exc


def parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError as exc:
        raise UsageError(f"cannot parse vector '{text}'") from exc


def default_inputs(manifest: SceneManifest) -> list[int]:
    if manifest.splits.get("inputs"):
        return list(manifest.splits["inputs"])
    return manifest.split("train")[:3]


def pick_frames(manifest: SceneManifest, ids: Sequence[int]) -> list[TrackedFrame]:
    for i in ids:
        if not 0 <= i < len(manifest.frames):
            raise DataError(f"frame id {i} does not exist (manifest has {len(manifest.frames)} frames)")
    return [manifest.frames[i] for i in ids]


def check_compatible(state: TrainState, manifest: SceneManifest):
    if state.model.cfg.E != manifest.expr_dim:
        raise DataError(f"checkpoint expects expression dimension {state.model.cfg.E}, "
                        f"manifest has {manifest.expr_dim}")


def read_poses(path) -> list[tuple[np.ndarray, Optional[Intrinsics]]]:
    """Pose file: JSON list (or ``{"poses": [...]}``) of ``{pose_R, pose_t, intrinsics?}``."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read pose file {path}: {exc}") from exc
    recs = raw["poses"] if isinstance(raw, dict) else raw
    out = []
    for k, rec in enumerate(recs):
        try:
            pose = np.eye(4)
            pose[:3, :3] = np.asarray(rec["pose_R"], dtype=np.float64).reshape(3, 3)
            pose[:3, 3] = np.asarray(rec["pose_t"], dtype=np.float64).reshape(3)
        except (KeyError, ValueError) as exc:
            raise DataError(f"pose {k} in {path}: {exc}") from exc
        intr = Intrinsics(*rec["intrinsics"]) if "intrinsics" in rec else None
        out.append((pose, intr))
    if not out:
        raise DataError(f"pose file {path} lists no poses")
    return out


def write_poses(path, poses: Sequence[np.ndarray]):
    recs = [{"pose_R": np.asarray(p)[:3, :3].reshape(-1).tolist(),
             "pose_t": np.asarray(p)[:3, 3].tolist()} for p in poses]
    Path(path).write_text(json.dumps({"poses": recs}, indent=1))


def showcase_poses(manifest: SceneManifest, yaw_deg: float = 30.0) -> list[np.ndarray]:
    """Frontal, left and right views at the mean camera distance."""
    radius = float(np.mean([np.linalg.norm(f.translation) for f in manifest.frames]))
    return [orbit_pose(radius, math.radians(y), 0.0) for y in (0.0, -yaw_deg, yaw_deg)]


def _camera(ref: TrackedFrame, intr: Optional[Intrinsics], size: Optional[int]):
    H, W = ref.image.shape[:2]
    intr = intr or ref.intrinsics
    if size is None or size == W:
        return intr, H, W
    factor = size / W
    return intr.scaled(factor), int(round(H * factor)), size


def render_poses(state: TrainState, manifest: SceneManifest, inputs: Sequence[int], poses,
                 delta_tar=None, target_code=None, size: Optional[int] = None,
                 render_cfg: Optional[RenderConfig] = None) -> list[RenderOutput]:
    frames = pick_frames(manifest, inputs)
    if not frames:
        raise DataError("no input frames given")
    cfg = render_cfg or RenderConfig(state.render_cfg.n_coarse, state.render_cfg.n_fine)
    model = state.model.eval()
    outs = []
    with torch.no_grad():
        cond = model.condition(frames, delta_tar, target_code)
        for pose, intr in poses:
            intr, H, W = _camera(frames[0], intr, size)
            outs.append(model.render_view(cond, intr, pose, H, W, cfg, manifest.near, manifest.far))
    return outs


def _as_pose_list(poses):
    return [p if isinstance(p, tuple) else (np.asarray(p), None) for p in poses]


# ----------------------------------------------------------------- commands

def cmd_render(checkpoint, manifest, inputs: Sequence[int], poses, out, size=None,
               render_cfg=None) -> list[Path]:
    """Render ``poses`` with the expression of the first input frame."""
    state = load_checkpoint(checkpoint) if not isinstance(checkpoint, TrainState) else checkpoint
    scene = manifest if isinstance(manifest, SceneManifest) else dataio.load_manifest(manifest)
    check_compatible(state, scene)
    first = pick_frames(scene, inputs[:1])[0]
    return _render_and_save(state, scene, inputs, poses, out, first.delta, size, render_cfg)


def cmd_edit(checkpoint, manifest, inputs: Sequence[int], delta_target, poses, out, size=None,
             render_cfg=None) -> list[Path]:
    """Render ``poses`` with an arbitrary target expression."""
    state = load_checkpoint(checkpoint) if not isinstance(checkpoint, TrainState) else checkpoint
    scene = manifest if isinstance(manifest, SceneManifest) else dataio.load_manifest(manifest)
    check_compatible(state, scene)
    delta_target = np.asarray(delta_target, dtype=np.float64).reshape(-1)
    if len(delta_target) != scene.expr_dim:
        raise DataError(f"target expression has length {len(delta_target)}, expected {scene.expr_dim}")
    return _render_and_save(state, scene, inputs, poses, out, delta_target, size, render_cfg)


def _render_and_save(state, scene, inputs, poses, out, delta_tar, size, render_cfg):
    poses = _as_pose_list(poses)
    outs = render_poses(state, scene, inputs, poses, delta_tar, None, size, render_cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, (o, (pose, _)) in enumerate(zip(outs, poses)):
        _check_finite(o)
        paths.append(save_render(o, out / f"view_{k:03d}.png", scene.near, scene.far,
                                 {"inputs": list(inputs), "delta_target": list(map(float, delta_tar)),
                                  "pose": np.asarray(pose).tolist()}))
    return paths


def cmd_reenact(checkpoint, manifest, inputs: Sequence[int], driver, L: int, pose, out,
                size=None, render_cfg=None) -> list[Path]:
    """One frame per driver row, with the target code pooled over a ``2L + 1`` window."""
    if L < 0:
        raise UsageError("window L must be >= 0")
    state = load_checkpoint(checkpoint) if not isinstance(checkpoint, TrainState) else checkpoint
    scene = manifest if isinstance(manifest, SceneManifest) else dataio.load_manifest(manifest)
    check_compatible(state, scene)
    seq = dataio.read_driver(driver) if not isinstance(driver, np.ndarray) else driver
    if len(seq) == 0:
        raise DataError("driver sequence is empty")
    if seq.shape[1] != scene.expr_dim:
        raise DataError(f"driver has {seq.shape[1]} columns, expected {scene.expr_dim}")
    pose = _as_pose_list([pose])[0]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    with torch.no_grad():
        for t in range(len(seq)):
            code = state.model.window_target_code(seq, t, L)
            o = render_poses(state, scene, inputs, [pose], None, code, size, render_cfg)[0]
            _check_finite(o)
            paths.append(save_render(o, out / f"frame_{t:04d}.png", scene.near, scene.far,
                                     {"driver_row": t, "window": L}))
    return paths


def cmd_eval(checkpoint, manifest, split: str = "val", out=None, inputs=None, render_cfg=None,
             render_fn: Optional[Callable] = None, lpips_fn=None) -> MetricReport:
    """Score held-out frames rendered at their recorded pose and expression.

    ``render_fn(frame_index, frame) -> (H, W, 3)`` replaces the model when given.
    """
    scene = manifest if isinstance(manifest, SceneManifest) else dataio.load_manifest(manifest)
    ids = scene.split(split)
    if not ids:
        raise DataError(f"split '{split}' is empty")
    if render_fn is None:
        state = load_checkpoint(checkpoint) if not isinstance(checkpoint, TrainState) else checkpoint
        check_compatible(state, scene)
        inputs = list(inputs) if inputs else default_inputs(scene)

        def render_fn(j, frame):
            o = render_poses(state, scene, inputs, [(frame.pose, frame.intrinsics)], frame.delta,
                             render_cfg=render_cfg)[0]
            _check_finite(o)
            return o.rgb
    report = MetricReport()
    for j in ids:
        frame = scene.frames[j]
        report.add(j, render_fn(j, frame), frame.image, lpips_fn)
    if out is not None:
        report.write(out)
    return report


def _check_finite(o: RenderOutput):
    if not torch.isfinite(o.rgb).all():
        raise NumericError("rendered image contains non-finite values")


def cmd_gen_data(out, n_frames: int, size: int, seed: int, n_val: int = 0, identities: int = 1,
                 expressions: int = 0, template: str = "face", E: int = 2) -> list[Path]:
    """Synthetic blob scenes. With ``expressions=K`` every frame reuses one of K
    expression vectors (validation frames use the first one)."""
    out = Path(out)
    paths = []
    tmpl = dataio.face_template(E) if template == "face" else None
    for k in range(identities):
        cfg = dataio.random_scene_config(seed + k, E=E, template=tmpl)
        deltas = None
        if expressions > 0:
            rng = np.random.default_rng([seed + k, 11])
            base = [dataio.sample_delta(cfg, rng) for _ in range(expressions)]
            n_train = n_frames - n_val
            deltas = [base[i % expressions] for i in range(n_train)] + [base[0]] * n_val
        scene = dataio.generate_blob_dataset(cfg, n_frames, (size, size), n_val=n_val, deltas=deltas)
        if expressions > 0:
            scene.splits["inputs"] = list(range(min(expressions, n_frames - n_val)))
        target = out if identities == 1 else out / f"id_{k:03d}"
        paths.append(dataio.write_scene(target, cfg, scene))
    return paths


def cmd_train(manifests: Sequence, checkpoint, train_cfg: TrainConfig, model_cfg: ModelConfig,
              render_cfg: RenderConfig, log_path=None, resume: bool = False,
              progress=None) -> TrainState:
    videos = [m if isinstance(m, SceneManifest) else dataio.load_manifest(m) for m in manifests]
    if not videos:
        raise DataError("no manifests given")
    dims = {v.expr_dim for v in videos}
    if len(dims) != 1:
        raise DataError(f"manifests disagree on expression dimension: {sorted(dims)}")
    if resume and Path(checkpoint).exists():
        state = load_checkpoint(checkpoint)
    else:
        state = init_state(dataclasses.replace(model_cfg, E=dims.pop()), train_cfg, render_cfg)
    remaining = train_cfg.iterations - state.iteration
    train(state, videos, max(0, remaining), log_path, checkpoint, checkpoint_every=500,
          progress=progress)
    save_checkpoint(state, checkpoint)
    return state


# --------------------------------------------------------------------- argv

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _expand_manifests(items: Sequence[str]) -> list[Path]:
    out = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            found = sorted(p.rglob("scene.json"))
            if not found:
                raise DataError(f"no scene.json under {p}")
            out += found
        else:
            out.append(p)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="warpnerf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate synthetic blob scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--n-frames", type=int, default=30)
    g.add_argument("--n-val", type=int, default=3)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--identities", type=int, default=1)
    g.add_argument("--expressions", type=int, default=0)
    g.add_argument("--expr-dim", type=int, default=2)
    g.add_argument("--template", choices=["face", "random"], default="face")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--manifest", action="append", required=True,
                   help="scene.json or a directory searched for scene.json (repeatable)")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--iterations", type=int, default=1000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--rays", type=int, default=1024)
    t.add_argument("--m-min", type=int, default=1)
    t.add_argument("--m-max", type=int, default=12)
    t.add_argument("--inputs", default=None, help="fixed input frames, e.g. 0,1,2")
    t.add_argument("--n-coarse", type=int, default=64)
    t.add_argument("--n-fine", type=int, default=64)
    t.add_argument("--model", choices=sorted(MODEL_PRESETS), default="default")
    t.add_argument("--log", default=None, help="CSV training log (appended)")
    t.add_argument("--resume", action="store_true")

    def common(p, poses=True):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--inputs", default=None, help="input frame ids, e.g. 0,3,7")
        p.add_argument("--out", required=True)
        p.add_argument("--size", type=int, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--n-coarse", type=int, default=None)
        p.add_argument("--n-fine", type=int, default=None)
        if poses:
            p.add_argument("--pose-file", default=None,
                           help="JSON poses; default frontal/left/right views")

    common(sub.add_parser("render", help="novel views at the first input's expression"))
    e = sub.add_parser("edit", help="novel views at a given expression")
    common(e)
    e.add_argument("--delta", required=True, help='target expression, e.g. "0.1,0.2"')
    r = sub.add_parser("reenact", help="render a driver expression sequence")
    common(r)
    r.add_argument("--driver", required=True)
    r.add_argument("--window", type=int, default=13)
    v = sub.add_parser("eval", help="PSNR/SSIM on a split")
    common(v, poses=False)
    v.add_argument("--split", default="val")
    return ap


def _render_cfg(args, state: TrainState) -> RenderConfig:
    return RenderConfig(args.n_coarse or state.render_cfg.n_coarse,
                        args.n_fine if args.n_fine is not None else state.render_cfg.n_fine)


def run(args) -> int:
    torch.manual_seed(getattr(args, "seed", 0))
    if args.command == "gen-data":
        paths = cmd_gen_data(args.out, args.n_frames, args.size, args.seed, args.n_val,
                             args.identities, args.expressions, args.template, args.expr_dim)
        print("\n".join(str(p) for p in paths))
        return EXIT_OK
    if args.command == "train":
        tc = TrainConfig(lr=args.lr, m_min=args.m_min, m_max=args.m_max, rays_per_step=args.rays,
                         iterations=args.iterations, seed=args.seed,
                         fixed_inputs=parse_ids(args.inputs) if args.inputs else None)
        mc = MODEL_PRESETS[args.model]
        rc = RenderConfig(args.n_coarse, args.n_fine, jitter=True)

        def progress(it, lc, lf):
            if it % 100 == 0:
                log.info("iter %d  loss_coarse %.5f  loss_fine %.5f", it, lc, lf)
        cmd_train(_expand_manifests(args.manifest), args.checkpoint, tc, mc, rc, args.log,
                  args.resume, progress)
        return EXIT_OK

    state = load_checkpoint(args.checkpoint)
    scene = dataio.load_manifest(args.manifest)
    inputs = parse_ids(args.inputs) if args.inputs else default_inputs(scene)
    rc = _render_cfg(args, state)
    if args.command == "eval":
        report = cmd_eval(state, scene, args.split, args.out, inputs, rc)
        print(json.dumps(report.to_dict()["mean"]))
        return EXIT_OK
    poses = read_poses(args.pose_file) if args.pose_file else showcase_poses(scene)
    if args.command == "render":
        paths = cmd_render(state, scene, inputs, poses, args.out, args.size, rc)
    elif args.command == "edit":
        paths = cmd_edit(state, scene, inputs, parse_vector(args.delta), poses, args.out,
                         args.size, rc)
    else:
        paths = cmd_reenact(state, scene, inputs, args.driver, args.window, _as_pose_list(poses)[0],
                            args.out, args.size, rc)
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return run(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
