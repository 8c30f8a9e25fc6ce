"""Volumetric compositing and the coarse-to-fine render loop."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .geometry import Rays, SampleBins, importance_sample, make_rays, stratified_sample

DEPTH_EPS = 1e-10

# field(points (R, S, 3), directions (R, 3)) -> (sigma (R, S), rgb (R, S, 3))
FieldFn = Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    jitter: bool = False
    background: Sequence[float] = (0.0, 0.0, 0.0)
    chunk: int = 4096

    def __post_init__(self):
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("need n_coarse >= 1 and n_fine >= 0")


@dataclass
class RenderOutput:
    rgb: torch.Tensor
    depth: torch.Tensor
    acc: torch.Tensor
    weights: Optional[torch.Tensor] = None
    t_values: Optional[torch.Tensor] = None

    def reshape(self, H: int, W: int) -> "RenderOutput":
        return RenderOutput(self.rgb.reshape(H, W, 3), self.depth.reshape(H, W), self.acc.reshape(H, W))


def composite(t: torch.Tensor, sigmas: torch.Tensor, colors: torch.Tensor, far,
              background=(0.0, 0.0, 0.0)):
    """Alpha-composite samples along rays.

    ``t`` and ``sigmas`` are ``(..., N)``, ``colors`` ``(..., N, 3)``. Sample k
    covers ``[t_k, t_{k+1})``; the last one extends to ``far``.
    Returns ``(rgb, depth, acc, weights)``.
    """
    if t.shape != sigmas.shape or colors.shape != t.shape + (3,):
        raise ValueError(f"shape mismatch: t {tuple(t.shape)}, sigma {tuple(sigmas.shape)}, "
                         f"color {tuple(colors.shape)}")
    if t.shape[-1] > 1 and bool((t[..., 1:] < t[..., :-1]).any()):
        raise ValueError("t values must be sorted along each ray")
    far_t = torch.as_tensor(far, dtype=t.dtype).expand(t.shape[:-1] + (1,))
    deltas = torch.diff(torch.cat([t, far_t], dim=-1), dim=-1)
    tau = sigmas * deltas
    optical = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(optical[..., :1]), optical[..., :-1]], dim=-1))
    weights = trans * -torch.expm1(-tau)
    acc = weights.sum(dim=-1)
    bg = torch.as_tensor(background, dtype=colors.dtype)
    rgb = (weights[..., None] * colors).sum(dim=-2) + (1.0 - acc)[..., None] * bg
    depth = (weights * t).sum(dim=-1) / acc.clamp_min(DEPTH_EPS)
    return rgb, depth, acc, weights


def _eval_field(fn: FieldFn, rays: Rays, t: torch.Tensor):
    pts = rays.origins[:, None, :] + rays.directions[:, None, :] * t[..., None]
    return fn(pts, rays.directions)


def render_rays(rays: Rays, coarse_fn: FieldFn, fine_fn: Optional[FieldFn], cfg: RenderConfig,
                generator: Optional[torch.Generator] = None) -> tuple[RenderOutput, RenderOutput]:
    """Coarse pass on stratified samples, then a fine pass on the sorted union
    of the coarse samples and importance samples drawn from the coarse weights."""
    dtype = rays.origins.dtype
    n = len(rays)
    bins = stratified_sample(rays.near, rays.far, n, cfg.n_coarse, cfg.jitter, generator, dtype)
    sigma, rgb = _eval_field(coarse_fn, rays, bins.t_values)
    c_rgb, c_depth, c_acc, c_w = composite(bins.t_values, sigma, rgb, rays.far, cfg.background)
    coarse = RenderOutput(c_rgb, c_depth, c_acc, c_w, bins.t_values)
    if fine_fn is None:
        return coarse, coarse
    if cfg.n_fine > 0:
        fine_bins = importance_sample(bins, c_w, cfg.n_fine, cfg.jitter, generator)
        t_all, _ = torch.sort(torch.cat([bins.t_values, fine_bins.t_values.detach()], dim=-1), dim=-1)
    else:
        t_all = bins.t_values
    sigma, rgb = _eval_field(fine_fn, rays, t_all)
    f_rgb, f_depth, f_acc, f_w = composite(t_all, sigma, rgb, rays.far, cfg.background)
    return coarse, RenderOutput(f_rgb, f_depth, f_acc, f_w, t_all)


def render_image(intrinsics, pose, H: int, W: int, coarse_fn: FieldFn, fine_fn: Optional[FieldFn],
                 cfg: RenderConfig, near: float, far: float, dtype=torch.float32,
                 generator: Optional[torch.Generator] = None) -> tuple[RenderOutput, RenderOutput]:
    """Render a full image in chunks of ``cfg.chunk`` rays."""
    rays = make_rays(intrinsics, pose, H, W, near, far, dtype=dtype)
    outs_c, outs_f = [], []
    with torch.no_grad():
        for s in range(0, len(rays), max(1, cfg.chunk)):
            c, f = render_rays(rays[s:s + cfg.chunk], coarse_fn, fine_fn, cfg, generator)
            outs_c.append(c)
            outs_f.append(f)

    def cat(outs):
        return RenderOutput(torch.cat([o.rgb for o in outs]), torch.cat([o.depth for o in outs]),
                            torch.cat([o.acc for o in outs])).reshape(H, W)
    return cat(outs_c), cat(outs_f)


def save_render(out: RenderOutput, path, near: float, far: float, extra: Optional[dict] = None):
    """Write ``<path>.png`` (8-bit RGB), ``<path>_depth.png`` (16-bit) and ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    rgb = np.clip(np.round(out.rgb.detach().cpu().double().numpy() * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(stem.with_suffix(".png"))
    depth = out.depth.detach().cpu().double().numpy()
    scaled = np.clip((depth - near) / (far - near), 0.0, 1.0)
    depth16 = np.round(scaled * 65535.0).astype(np.uint16)
    Image.fromarray(depth16).save(stem.parent / f"{stem.name}_depth.png")
    meta = {"near": near, "far": far, "depth_png": f"{stem.name}_depth.png",
            "depth_encoding": "uint16 = round(65535 * clip((depth - near) / (far - near), 0, 1))"}
    meta.update(extra or {})
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return stem.with_suffix(".png")


def load_depth(png_path, meta_path) -> np.ndarray:
    meta = json.loads(Path(meta_path).read_text())
    with Image.open(png_path) as im:
        raw = np.asarray(im, dtype=np.float64)
    return meta["near"] + raw / 65535.0 * (meta["far"] - meta["near"])
