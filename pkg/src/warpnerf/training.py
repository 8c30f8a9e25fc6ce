"""Few-shot training: tuple sampling, photometric loss, optimisation, checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .dataio import SceneManifest, TrackedFrame
from .geometry import make_rays
from .model import FewShotModel, ModelConfig
from .renderer import RenderConfig

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"WNRFCKPT"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ["iteration", "loss_coarse", "loss_fine", "M", "wall_ms"]


class NumericError(RuntimeError):
    """Non-finite loss or parameters during training."""


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    m_min: int = 1
    m_max: int = 12
    rays_per_step: int = 1024
    iterations: int = 1000
    seed: int = 0
    coarse_fine_loss_weights: tuple = (1.0, 1.0)
    fixed_inputs: Optional[list] = None  # always use these frames as inputs
    dtype: str = "float32"

    def __post_init__(self):
        if not 1 <= self.m_min <= self.m_max:
            raise ValueError(f"need 1 <= m_min <= m_max, got {self.m_min}, {self.m_max}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        self.coarse_fine_loss_weights = tuple(self.coarse_fine_loss_weights)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Batch:
    video: int
    inputs: list[int]
    target: int
    ray_idx: torch.Tensor
    seed: tuple


@dataclass
class TrainState:
    model: FewShotModel
    optimizer: torch.optim.Optimizer
    train_cfg: TrainConfig
    render_cfg: RenderConfig
    iteration: int = 0


# ---------------------------------------------------------------- sampling

def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def sample_tuple(manifest: SceneManifest, cfg: TrainConfig, rng: np.random.Generator):
    """Draw ``(inputs, target)`` frame indices from the training split.

    M is uniform on ``[m_min, min(m_max, n - 1)]``; inputs are distinct and the
    target is drawn from the remaining frames.
    """
    pool = manifest.split("train")
    if cfg.fixed_inputs is not None:
        inputs = [int(i) for i in cfg.fixed_inputs]
        rest = [i for i in pool if i not in inputs]
        if not rest:
            raise ValueError("no training frames left besides the fixed inputs")
        return inputs, int(rest[rng.integers(len(rest))])
    n = len(pool)
    if n < cfg.m_min + 1:
        raise ValueError(f"video too small: {n} training frames, need at least {cfg.m_min + 1}")
    m_hi = min(cfg.m_max, n - 1)
    M = int(rng.integers(cfg.m_min, m_hi + 1))
    perm = rng.permutation(n)
    inputs = [int(pool[j]) for j in perm[:M]]
    target = int(pool[perm[M]])
    return inputs, target


def photometric_loss(pred_rgb: torch.Tensor, gt_rgb: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the squared L2 color error."""
    if pred_rgb.shape != gt_rgb.shape:
        raise ValueError(f"shape mismatch {tuple(pred_rgb.shape)} vs {tuple(gt_rgb.shape)}")
    return ((pred_rgb - gt_rgb) ** 2).sum(dim=-1).mean()


# ------------------------------------------------------------------- state

def _torch_dtype(name: str):
    return {"float32": torch.float32, "float64": torch.float64}[name]


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig,
               render_cfg: Optional[RenderConfig] = None) -> TrainState:
    torch.manual_seed(train_cfg.seed)
    model = FewShotModel(model_cfg).to(_torch_dtype(train_cfg.dtype))
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    return TrainState(model, opt, train_cfg, render_cfg or RenderConfig(jitter=True))


def make_batch(state: TrainState, videos: Sequence[SceneManifest], iteration: int) -> Batch:
    """Everything random about one step, derived from (seed, iteration) only."""
    cfg = state.train_cfg
    rng = iteration_rng(cfg.seed, iteration)
    eligible = [k for k, v in enumerate(videos)
                if cfg.fixed_inputs is not None or len(v.split("train")) >= cfg.m_min + 1]
    if not eligible:
        raise ValueError("no video has enough training frames")
    video = eligible[int(rng.integers(len(eligible)))]
    inputs, target = sample_tuple(videos[video], cfg, rng)
    H, W = videos[video].frames[target].image.shape[:2]
    n_rays = min(cfg.rays_per_step, H * W)
    ray_idx = torch.from_numpy(rng.choice(H * W, size=n_rays, replace=False))
    return Batch(video, inputs, target, ray_idx, (cfg.seed, iteration))


def compute_losses(state: TrainState, videos: Sequence[SceneManifest], batch: Batch,
                   generator: Optional[torch.Generator] = None):
    model = state.model
    scene = videos[batch.video]
    frames = [scene.frames[i] for i in batch.inputs]
    target = scene.frames[batch.target]
    cond = model.condition(frames, target.delta)
    H, W = target.image.shape[:2]
    rays = make_rays(target.intrinsics, target.pose, H, W, scene.near, scene.far,
                     dtype=model.dtype)[batch.ray_idx]
    gt = torch.as_tensor(target.image.reshape(-1, 3), dtype=model.dtype)[batch.ray_idx]
    if generator is None:
        generator = torch.Generator().manual_seed(int(np.random.SeedSequence(batch.seed).generate_state(1)[0]))
    coarse, fine = model.render_rays(rays, cond, state.render_cfg, generator)
    return photometric_loss(coarse.rgb, gt), photometric_loss(fine.rgb, gt)


def total_loss(state: TrainState, loss_c, loss_f):
    wc, wf = state.train_cfg.coarse_fine_loss_weights
    return wc * loss_c + wf * loss_f


def train_step(state: TrainState, videos: Sequence[SceneManifest], batch: Batch):
    """One Adam update. Returns ``(loss_coarse, loss_fine)`` as floats."""
    state.model.train()
    loss_c, loss_f = compute_losses(state, videos, batch)
    loss = total_loss(state, loss_c, loss_f)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at iteration {state.iteration} "
                           f"(video {batch.video}, inputs {batch.inputs}, target {batch.target})")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    for name, p in state.model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericError(f"parameter {name} became non-finite at iteration {state.iteration}")
    state.iteration += 1
    return float(loss_c.detach()), float(loss_f.detach())


def train(state: TrainState, videos: Sequence[SceneManifest], iterations: Optional[int] = None,
          log_path=None, checkpoint_path=None, checkpoint_every: int = 0, progress=None):
    """Run ``iterations`` steps (default: config), appending rows to ``log_path``."""
    n = state.train_cfg.iterations if iterations is None else iterations
    writer, fh = None, None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)
    history = []
    try:
        for _ in range(n):
            t0 = time.perf_counter()
            batch = make_batch(state, videos, state.iteration)
            it = state.iteration
            lc, lf = train_step(state, videos, batch)
            wall = (time.perf_counter() - t0) * 1000.0
            history.append((it, lc, lf, len(batch.inputs)))
            if writer is not None:
                writer.writerow([it, repr(lc), repr(lf), len(batch.inputs), f"{wall:.1f}"])
            if progress is not None:
                progress(it, lc, lf)
            if checkpoint_path and checkpoint_every and state.iteration % checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if fh is not None:
            fh.close()
    return history


# -------------------------------------------------------------- checkpoints

def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().tobytes()


_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def _dtype_name(t: torch.Tensor) -> str:
    return str(t.dtype).replace("torch.", "")


def save_checkpoint(state: TrainState, path):
    """Single versioned binary file: magic, version, JSON header, raw tensor payload."""
    tensors = [(f"model.{k}", v) for k, v in state.model.state_dict().items()]
    opt_sd = state.optimizer.state_dict()
    for idx in sorted(opt_sd["state"]):
        for key in sorted(opt_sd["state"][idx]):
            tensors.append((f"optim.{idx}.{key}", opt_sd["state"][idx][key]))
    index, chunks, offset = [], [], 0
    for name, t in tensors:
        b = _tensor_bytes(t)
        index.append({"name": name, "dtype": _dtype_name(t), "shape": list(t.shape),
                      "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "model_config": asdict(state.model.cfg),
        "train_config": asdict(state.train_cfg),
        "render_config": asdict(state.render_cfg),
        "param_groups": opt_sd["param_groups"],
        "tensors": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    pre = len(CHECKPOINT_MAGIC) + 12
    if len(raw) < pre or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: corrupt checkpoint (bad magic or truncated header)")
    version, hlen = struct.unpack("<IQ", raw[len(CHECKPOINT_MAGIC):pre])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported "
                              f"(this build reads version {CHECKPOINT_VERSION})")
    try:
        header = json.loads(raw[pre:pre + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    if header.get("version") != version:
        raise CheckpointError(f"{path}: corrupt checkpoint (header version {header.get('version')} "
                              f"!= file version {version})")
    payload = raw[pre + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: corrupt checkpoint (payload checksum mismatch, "
                              f"{len(payload)} bytes present)")
    return header, payload


def load_checkpoint(path) -> TrainState:
    header, payload = read_checkpoint_header(path)
    tensors = {}
    for rec in header["tensors"]:
        buf = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(buf, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
        tensors[rec["name"]] = torch.from_numpy(arr)
    model_cfg = ModelConfig.from_dict(header["model_config"])
    train_cfg = TrainConfig.from_dict(header["train_config"])
    rc = dict(header["render_config"])
    rc["background"] = tuple(rc["background"])
    render_cfg = RenderConfig(**rc)
    state = init_state(model_cfg, train_cfg, render_cfg)
    model_sd = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    for key in model_sd:
        if key.startswith("cfw.mapper.window."):
            state.model.cfw.mapper.window_projection(int(key.split(".")[3]))
    state.model.load_state_dict(model_sd)
    opt_state: dict = {}
    for name, t in tensors.items():
        if name.startswith("optim."):
            _, idx, key = name.split(".", 2)
            opt_state.setdefault(int(idx), {})[key] = t
    # window projections are not optimized, so the optimizer built by init_state already matches
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": header["param_groups"]})
    state.iteration = int(header["iteration"])
    return state
