"""Conditional radiance field over pixel-aligned, warped features.

Density depends only on position and the aggregated view features; the
view direction enters the color head alone.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cfw import FeatureVolume, bilinear_sample
from .geometry import encoded_size, positional_encode, project_points


@dataclass
class ViewFeatures:
    v: torch.Tensor  # (M, P, sum C_l), zero where invalid
    valid: torch.Tensor  # (M, P) bool


@dataclass
class Cameras:
    poses: torch.Tensor  # (M, 4, 4) camera-to-world
    intrinsics: torch.Tensor  # (M, 4) fx, fy, cx, cy


def sample_view_features(fhat: FeatureVolume, x: torch.Tensor, cams: Cameras) -> ViewFeatures:
    """Project ``x`` (P, 3) into every input view and bilinearly sample each level."""
    M = cams.poses.shape[0]
    H, W = fhat.image_size
    left, top = fhat.pad
    uv, valid = [], []
    for m in range(M):
        uv_m, _, in_front = project_points(x, tuple(cams.intrinsics[m]), cams.poses[m])
        inside = (uv_m[:, 0] >= 0) & (uv_m[:, 0] <= W) & (uv_m[:, 1] >= 0) & (uv_m[:, 1] <= H)
        uv.append(uv_m)
        valid.append(in_front & inside)
    uv, valid = torch.stack(uv), torch.stack(valid)  # (M, P, 2), (M, P)
    offset = uv.new_tensor([left, top])
    per_level = [bilinear_sample(lvl[:M], (uv + offset) * s - 0.5) for lvl, s in zip(fhat.levels, fhat.scales)]
    v = torch.cat(per_level, dim=-1)
    return ViewFeatures(torch.where(valid[..., None], v, torch.zeros_like(v)), valid)


class RadianceField(nn.Module):
    def __init__(self, feat_dim: int, pos_freqs: int = 6, dir_freqs: int = 4, hidden: int = 128,
                 view_layers: int = 2, trunk_layers: int = 4, color_hidden: int = 64,
                 color_layers: int = 1):
        super().__init__()
        self.pos_freqs, self.dir_freqs = pos_freqs, dir_freqs
        in_dim = encoded_size(3, pos_freqs) + feat_dim
        layers = []
        for k in range(view_layers):
            layers += [nn.Linear(in_dim if k == 0 else hidden, hidden), nn.ReLU()]
        self.view_mlp = nn.Sequential(*layers)
        self.trunk = nn.Sequential(*[m for _ in range(trunk_layers)
                                     for m in (nn.Linear(hidden, hidden), nn.ReLU())])
        self.sigma_head = nn.Linear(hidden, 1)
        color, cin = [], hidden + encoded_size(3, dir_freqs)
        for _ in range(color_layers):
            color += [nn.Linear(cin, color_hidden), nn.ReLU()]
            cin = color_hidden
        color.append(nn.Linear(cin, 3))
        self.color_head = nn.Sequential(*color)
        nn.init.constant_(self.sigma_head.bias, -1.0)

    def aggregate(self, x_enc: torch.Tensor, views: ViewFeatures) -> torch.Tensor:
        """Mean of the per-view embeddings over valid views (all views if none is valid)."""
        M, P = views.valid.shape
        # first layer split so the position term is computed once, not once per view
        first = self.view_mlp[0]
        nx = x_enc.shape[-1]
        h = F.linear(views.v, first.weight[:, nx:]) + F.linear(x_enc, first.weight[:, :nx], first.bias)
        h = self.view_mlp[1:](h)
        mask = views.valid.to(h.dtype)
        none = mask.sum(0, keepdim=True) == 0
        mask = torch.where(none, torch.ones_like(mask), mask)
        return (h * mask[..., None]).sum(0) / mask.sum(0)[..., None]

    def forward(self, x: torch.Tensor, d: torch.Tensor, views: ViewFeatures):
        """``x``, ``d``: (P, 3). Returns ``(sigma (P,), rgb (P, 3))``."""
        latent = self.trunk(self.aggregate(positional_encode(x, self.pos_freqs), views))
        sigma = F.softplus(self.sigma_head(latent)[..., 0])
        d_enc = positional_encode(d, self.dir_freqs)
        rgb = torch.sigmoid(self.color_head(torch.cat([latent, d_enc], dim=-1)))
        return sigma, rgb


def aggregate_views(model: RadianceField, x_enc: torch.Tensor, views: ViewFeatures) -> torch.Tensor:
    if views.v.shape[0] == 0:
        raise ValueError("aggregate_views needs at least one view")
    return model.aggregate(x_enc, views)


def query_field(model: RadianceField, x, d, fhat: FeatureVolume, cams: Cameras):
    """Evaluate the field at points ``x`` (P, 3) with directions ``d`` (P, 3)."""
    views = sample_view_features(fhat, x, cams)
    return model(x, d, views)
