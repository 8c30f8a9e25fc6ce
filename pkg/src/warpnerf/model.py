"""Full few-shot model: conditional warping plus coarse and fine radiance fields."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .cfw import ConditionalWarp, FeatureVolume
from .dataio import TrackedFrame
from .field import Cameras, RadianceField, sample_view_features
from .geometry import Rays
from .renderer import RenderConfig, RenderOutput, render_image, render_rays


@dataclass
class ModelConfig:
    E: int = 2
    channels: tuple = (16, 32, 64, 128)
    d_latent: int = 64
    mapper_hidden: int = 64
    flow_hidden: int = 32
    identity_mapper: bool = False
    pos_freqs: int = 6
    dir_freqs: int = 4
    hidden: int = 128
    view_layers: int = 2
    trunk_layers: int = 4
    color_hidden: int = 64
    color_layers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class Conditioning:
    """Warped input features and cameras for one target expression."""
    fhat: FeatureVolume
    cams: Cameras
    feats: Optional[FeatureVolume] = None
    flow: Optional[list] = None


class FewShotModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.cfw = ConditionalWarp(cfg.E, cfg.channels, cfg.d_latent, cfg.mapper_hidden,
                                   cfg.flow_hidden, cfg.identity_mapper)
        kw = dict(feat_dim=sum(cfg.channels), pos_freqs=cfg.pos_freqs, dir_freqs=cfg.dir_freqs,
                  hidden=cfg.hidden, view_layers=cfg.view_layers, trunk_layers=cfg.trunk_layers,
                  color_hidden=cfg.color_hidden, color_layers=cfg.color_layers)
        self.coarse = RadianceField(**kw)
        self.fine = RadianceField(**kw)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def condition(self, frames: Sequence[TrackedFrame], delta_tar=None,
                  target_code: Optional[torch.Tensor] = None, unwarped: bool = False) -> Conditioning:
        """Encode and warp ``frames`` toward ``delta_tar`` (or a precomputed target code).

        ``unwarped=True`` skips the warp and conditions on the raw features.
        """
        dt = self.dtype
        images = torch.stack([torch.as_tensor(np.asarray(f.image), dtype=dt) for f in frames])
        images = images.permute(0, 3, 1, 2)
        deltas = torch.stack([torch.as_tensor(np.asarray(f.delta), dtype=dt) for f in frames])
        tar = None if delta_tar is None else torch.as_tensor(np.asarray(delta_tar), dtype=dt)
        if unwarped:
            feats = self.cfw.encode(images)
            fhat, flow = feats, None
        else:
            feats, fhat, flow = self.cfw.warp_to_target(images, deltas, tar, target_code)
        cams = Cameras(
            torch.stack([torch.as_tensor(np.asarray(f.pose), dtype=dt) for f in frames]),
            torch.tensor([list(f.intrinsics) for f in frames], dtype=dt),
        )
        return Conditioning(fhat, cams, feats, None if flow is None else flow.levels)

    def field_fn(self, cond: Conditioning, which: str = "coarse"):
        net = self.coarse if which == "coarse" else self.fine

        def fn(points: torch.Tensor, dirs: torch.Tensor):
            R, S, _ = points.shape
            x = points.reshape(-1, 3)
            d = dirs[:, None, :].expand(R, S, 3).reshape(-1, 3)
            views = sample_view_features(cond.fhat, x, cond.cams)
            sigma, rgb = net(x, d, views)
            return sigma.reshape(R, S), rgb.reshape(R, S, 3)
        return fn

    def render_rays(self, rays: Rays, cond: Conditioning, cfg: RenderConfig,
                    generator: Optional[torch.Generator] = None):
        return render_rays(rays, self.field_fn(cond, "coarse"), self.field_fn(cond, "fine"), cfg,
                           generator)

    def render_view(self, cond: Conditioning, intrinsics, pose, H: int, W: int, cfg: RenderConfig,
                    near: float, far: float) -> RenderOutput:
        """Fine-pass render of a full view (deterministic unless ``cfg.jitter``)."""
        _, fine = render_image(intrinsics, pose, H, W, self.field_fn(cond, "coarse"),
                               self.field_fn(cond, "fine"), cfg, near, far, dtype=self.dtype)
        return fine

    def window_target_code(self, delta_seq, center: int, L: int) -> torch.Tensor:
        seq = torch.as_tensor(np.asarray(delta_seq), dtype=self.dtype)
        return self.cfw.mapper.window_code(seq, center, L)
