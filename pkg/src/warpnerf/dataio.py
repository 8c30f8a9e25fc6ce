"""Tracked-frame datasets: manifest IO and the synthetic blob-scene generator.

The synthetic scenes are sums of moving Gaussian blobs whose centers shift
linearly with the expression vector. Their ground-truth images come from a
dense numpy quadrature that shares no code with :mod:`warpnerf.renderer`.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import Intrinsics, orbit_pose

ORTHONORMAL_TOL = 1e-6
ORACLE_SAMPLES = 1024


class DataError(ValueError):
    """Invalid or inconsistent dataset content."""


@dataclass
class TrackedFrame:
    image: Optional[np.ndarray]  # (H, W, 3) float in [0, 1]
    delta: np.ndarray  # (E,)
    pose: np.ndarray  # (4, 4) camera-to-world
    intrinsics: Intrinsics
    image_path: Optional[str] = None

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.pose[:3, 3]


@dataclass
class SceneManifest:
    frames: list[TrackedFrame]
    near: float
    far: float
    splits: dict[str, list[int]] = field(default_factory=dict)
    path: Optional[str] = None

    @property
    def expr_dim(self) -> int:
        return len(self.frames[0].delta)

    @property
    def image_size(self) -> tuple[int, int]:
        h, w = self.frames[0].image.shape[:2]
        return h, w

    def split(self, name: str) -> list[int]:
        if name in self.splits:
            return list(self.splits[name])
        if name == "train":
            return list(range(len(self.frames)))
        return []


@dataclass
class Blob:
    center: np.ndarray  # (3,)
    color: np.ndarray  # (3,)
    amplitude: float
    width: float
    motion: np.ndarray  # (3, E)


@dataclass
class SyntheticSceneConfig:
    blobs: list[Blob]
    E: int = 2
    seed: int = 0
    radius: float = 4.0
    max_yaw: float = math.radians(40.0)
    max_pitch: float = math.radians(20.0)
    delta_scale: float = 1.0
    focal_ratio: float = 1.6  # focal length in units of image width
    near: float = 2.5
    far: float = 5.5

    def __post_init__(self):
        for j, b in enumerate(self.blobs):
            b.center = np.asarray(b.center, dtype=np.float64).reshape(3)
            b.color = np.asarray(b.color, dtype=np.float64).reshape(3)
            b.motion = np.asarray(b.motion, dtype=np.float64).reshape(3, self.E)
            if b.amplitude <= 0 or b.width <= 0:
                raise ValueError(f"blob {j}: amplitude and width must be positive")
            if np.any(b.color < 0) or np.any(b.color > 1):
                raise ValueError(f"blob {j}: color outside [0, 1]")

    def intrinsics(self, H: int, W: int) -> Intrinsics:
        f = self.focal_ratio * W
        return Intrinsics(f, f, W / 2.0, H / 2.0)


# ----------------------------------------------------------------- manifest IO

def _check_rotation(rot: np.ndarray, idx: int):
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err > ORTHONORMAL_TOL:
        raise DataError(f"frame {idx}: rotation is not orthonormal (max |R^T R - I| = {err:.3g})")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, image: np.ndarray):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_manifest(path, load_images: bool = True) -> SceneManifest:
    """Parse and validate a ``scene.json`` manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    for key in ("frames", "near", "far"):
        if key not in raw:
            raise DataError(f"manifest missing key '{key}'")
    near, far = float(raw["near"]), float(raw["far"])
    if not (far > near > 0):
        raise DataError(f"invalid depth bounds: near={near}, far={far}")
    if not isinstance(raw["frames"], list) or not raw["frames"]:
        raise DataError("manifest has no frames")

    frames: list[TrackedFrame] = []
    E = None
    for i, rec in enumerate(raw["frames"]):
        try:
            delta = np.asarray(rec["delta"], dtype=np.float64).reshape(-1)
            rot = np.asarray(rec["pose_R"], dtype=np.float64).reshape(3, 3)
            trans = np.asarray(rec["pose_t"], dtype=np.float64).reshape(3)
            intr = Intrinsics(*map(float, rec["intrinsics"]))
            img_rel = rec["image"]
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"frame {i}: schema violation ({exc})") from exc
        if E is None:
            E = len(delta)
        elif len(delta) != E:
            raise DataError(f"frame {i}: delta has length {len(delta)}, expected {E}")
        _check_rotation(rot, i)
        if intr.fx <= 0 or intr.fy <= 0:
            raise DataError(f"frame {i}: focal lengths must be positive")
        img_path = (path.parent / img_rel).resolve()
        if not img_path.is_file():
            raise DataError(f"frame {i}: image file not found: {img_path}")
        pose = np.eye(4)
        pose[:3, :3], pose[:3, 3] = rot, trans
        image = load_image(img_path) if load_images else None
        frames.append(TrackedFrame(image, delta, pose, intr, str(img_rel)))

    splits = {k: [int(v) for v in vals] for k, vals in raw.get("splits", {}).items()}
    for name, ids in splits.items():
        bad = [j for j in ids if not 0 <= j < len(frames)]
        if bad:
            raise DataError(f"split '{name}' references unknown frames {bad}")
    return SceneManifest(frames, near, far, splits, str(path))


def manifest_dict(manifest: SceneManifest) -> dict:
    return {
        "frames": [
            {
                "image": f.image_path,
                "delta": [float(v) for v in f.delta],
                "pose_R": [float(v) for v in f.rotation.reshape(-1)],
                "pose_t": [float(v) for v in f.translation],
                "intrinsics": [float(v) for v in f.intrinsics],
            }
            for f in manifest.frames
        ],
        "near": float(manifest.near),
        "far": float(manifest.far),
        "splits": {k: [int(v) for v in ids] for k, ids in manifest.splits.items()},
    }


def save_manifest(manifest: SceneManifest, path, write_images: bool = True):
    """Write ``manifest`` as JSON; images without a path get ``frame_XXXX.png`` names."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(manifest.frames):
        if f.image_path is None:
            f.image_path = f"frame_{i:04d}.png"
        if write_images and f.image is not None:
            save_image(path.parent / f.image_path, f.image)
    path.write_text(json.dumps(manifest_dict(manifest), indent=1))
    manifest.path = str(path)


# ------------------------------------------------------------ synthetic field

def synth_density_color(x, delta, cfg: SyntheticSceneConfig):
    """Analytic density and color at points ``x`` (..., 3) for expression ``delta``.

    Density is a sum of Gaussians; color is the density-weighted mix of blob
    colors (zero where the density vanishes).
    """
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if len(delta) != cfg.E:
        raise ValueError(f"delta has length {len(delta)}, expected {cfg.E}")
    sigma = np.zeros(x.shape[:-1])
    weighted = np.zeros(x.shape[:-1] + (3,))
    for b in cfg.blobs:
        mu = b.center + b.motion @ delta
        d2 = np.sum((x - mu) ** 2, axis=-1)
        s = b.amplitude * np.exp(-d2 / (2.0 * b.width**2))
        sigma = sigma + s
        weighted = weighted + s[..., None] * b.color
    safe = np.where(sigma > 0, sigma, 1.0)
    color = np.where(sigma[..., None] > 0, weighted / safe[..., None], 0.0)
    return sigma, np.clip(color, 0.0, 1.0)


def oracle_render(cfg: SyntheticSceneConfig, delta, pose, intrinsics, H: int, W: int,
                  near: float, far: float, n_samples: int = ORACLE_SAMPLES,
                  chunk: int = 512) -> np.ndarray:
    """Dense midpoint quadrature of the analytic field; black background."""
    pose = np.asarray(pose, dtype=np.float64)
    fx, fy, cx, cy = intrinsics
    jj, ii = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    dirs = np.stack([(ii - cx) / fx, (jj - cy) / fy, np.ones_like(ii)], -1).reshape(-1, 3)
    dirs = dirs @ pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = pose[:3, 3]
    dt = (far - near) / n_samples
    t = near + (np.arange(n_samples) + 0.5) * dt
    out = np.zeros((H * W, 3))
    for s in range(0, H * W, chunk):
        d = dirs[s:s + chunk]
        pts = origin + d[:, None, :] * t[None, :, None]
        sigma, color = synth_density_color(pts, delta, cfg)
        tau = sigma * dt
        trans = np.exp(-np.concatenate([np.zeros((len(d), 1)), np.cumsum(tau, -1)[:, :-1]], -1))
        w = trans * (1.0 - np.exp(-tau))
        out[s:s + chunk] = np.einsum("rn,rnc->rc", w, color)
    return np.clip(out.reshape(H, W, 3), 0.0, 1.0)


# ------------------------------------------------------------ scene factories

def random_scene_config(seed: int, E: int = 2, n_blobs: int = 3,
                        template: Optional[Sequence[Blob]] = None, jitter: float = 0.15,
                        **kwargs) -> SyntheticSceneConfig:
    """Random blob scene. With ``template`` the blobs are perturbations of it,
    giving a family of related identities sharing a motion basis."""
    rng = np.random.default_rng([seed, 7])
    blobs = []
    if template is not None:
        for b in template:
            blobs.append(Blob(
                center=np.asarray(b.center) + rng.normal(scale=jitter, size=3),
                color=rng.uniform(0.15, 1.0, size=3),
                amplitude=float(b.amplitude * rng.uniform(0.8, 1.25)),
                width=float(b.width * rng.uniform(0.85, 1.15)),
                motion=np.asarray(b.motion) * rng.uniform(0.8, 1.2),
            ))
    else:
        for _ in range(n_blobs):
            blobs.append(Blob(
                center=rng.uniform(-0.55, 0.55, size=3),
                color=rng.uniform(0.15, 1.0, size=3),
                amplitude=float(rng.uniform(8.0, 16.0)),
                width=float(rng.uniform(0.22, 0.32)),
                motion=rng.normal(scale=0.2, size=(3, E)),
            ))
    return SyntheticSceneConfig(blobs=blobs, E=E, seed=seed, **kwargs)


def _motion(col0, col1, E: int) -> np.ndarray:
    m = np.zeros((3, E))
    m[:, 0] = col0
    if E > 1:
        m[:, 1] = col1
    return m


def face_template(E: int = 2) -> list[Blob]:
    """A fixed arrangement loosely laid out like a head: two 'eyes', a 'mouth'
    that opens with the first coefficient and a large 'face' blob behind."""
    return [
        Blob(np.array([0.0, 0.05, 0.25]), np.array([0.8, 0.6, 0.5]), 6.0, 0.42,
             _motion([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], E)),
        Blob(np.array([-0.28, 0.22, -0.12]), np.array([0.2, 0.3, 0.9]), 14.0, 0.14,
             _motion([0.0, 0.06, 0.0], [0.12, 0.0, 0.0], E)),
        Blob(np.array([0.28, 0.22, -0.12]), np.array([0.2, 0.9, 0.3]), 14.0, 0.14,
             _motion([0.0, 0.06, 0.0], [0.12, 0.0, 0.0], E)),
        Blob(np.array([0.0, -0.32, -0.14]), np.array([0.9, 0.2, 0.2]), 14.0, 0.16,
             _motion([0.0, -0.22, 0.0], [0.18, 0.0, 0.0], E)),
    ]


def _frame_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, 1])


def sample_camera(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    yaw = rng.uniform(-cfg.max_yaw, cfg.max_yaw)
    pitch = rng.uniform(-cfg.max_pitch, cfg.max_pitch)
    return orbit_pose(cfg.radius, yaw, pitch)


def sample_delta(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-cfg.delta_scale, cfg.delta_scale, size=cfg.E)


def generate_blob_dataset(cfg: SyntheticSceneConfig, n_frames: int, image_size: tuple[int, int],
                          n_val: int = 0, deltas: Optional[Sequence] = None,
                          poses: Optional[Sequence] = None) -> SceneManifest:
    """Frames with random poses on a viewing cap and random expressions, rendered by the oracle.

    ``deltas``/``poses`` override the random draws per frame when given.
    The last ``n_val`` frames form the validation split.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    H, W = image_size
    if H <= 0 or W <= 0:
        raise ValueError(f"image_size must be positive, got {image_size}")
    intr = cfg.intrinsics(H, W)
    frames = []
    for i in range(n_frames):
        rng = _frame_rng(cfg.seed, i)
        pose = sample_camera(cfg, rng)
        delta = sample_delta(cfg, rng)
        if poses is not None and poses[i] is not None:
            pose = np.asarray(poses[i], dtype=np.float64)
        if deltas is not None and deltas[i] is not None:
            delta = np.asarray(deltas[i], dtype=np.float64)
        img = oracle_render(cfg, delta, pose, intr, H, W, cfg.near, cfg.far)
        frames.append(TrackedFrame(img, delta, pose, intr))
    n_train = n_frames - n_val
    splits = {"train": list(range(n_train)), "val": list(range(n_train, n_frames))}
    return SceneManifest(frames, cfg.near, cfg.far, splits)


def scene_config_dict(cfg: SyntheticSceneConfig) -> dict:
    d = {k: v for k, v in cfg.__dict__.items() if k != "blobs"}
    d["blobs"] = [
        {"center": b.center.tolist(), "color": b.color.tolist(), "amplitude": b.amplitude,
         "width": b.width, "motion": b.motion.tolist()} for b in cfg.blobs
    ]
    return d


def scene_config_from_dict(d: dict) -> SyntheticSceneConfig:
    d = dict(d)
    blobs = [Blob(np.asarray(b["center"]), np.asarray(b["color"]), float(b["amplitude"]),
                  float(b["width"]), np.asarray(b["motion"])) for b in d.pop("blobs")]
    return SyntheticSceneConfig(blobs=blobs, **d)


def write_scene(directory, cfg: SyntheticSceneConfig, manifest: SceneManifest):
    """Save manifest, images and the generating config (``scene_config.json``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, directory / "scene.json")
    (directory / "scene_config.json").write_text(json.dumps(scene_config_dict(cfg), indent=1))
    return directory / "scene.json"


def read_scene_config(manifest_path) -> Optional[SyntheticSceneConfig]:
    p = Path(manifest_path).parent / "scene_config.json"
    if not p.is_file():
        return None
    return scene_config_from_dict(json.loads(p.read_text()))


def read_driver(path) -> np.ndarray:
    """Driver sequence: one expression vector per line, comma separated; header optional."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            if rows:
                raise DataError(f"{path}:{lineno}: cannot parse '{line}'")
            continue  # header
    if not rows:
        raise DataError(f"driver file {path} is empty")
    if len({len(r) for r in rows}) != 1:
        raise DataError(f"driver file {path}: rows have inconsistent lengths")
    return np.asarray(rows, dtype=np.float64)


def write_driver(path, deltas):
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    header = ",".join(f"d{i}" for i in range(deltas.shape[1]))
    lines = [header] + [",".join(repr(float(v)) for v in row) for row in deltas]
    Path(path).write_text("\n".join(lines) + "\n")
