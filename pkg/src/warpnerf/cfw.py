"""Expression-conditioned 2D feature warping.

Each input frame is encoded into a feature pyramid; a flow field predicted
from the pyramid and a motion descriptor (source code + target code) moves
the features to the target expression.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

ADAIN_EPS = 1e-5
MIN_IMAGE_SIDE = 16
PAD_MULTIPLE = 32


@dataclass
class FeatureVolume:
    """Batched feature pyramid. ``levels[l]`` is ``(B, C_l, H_l, W_l)``.

    A continuous pixel coordinate ``u`` of the original image maps to level
    coordinate ``(u + pad[0]) * scales[l]``.
    """
    levels: list[torch.Tensor]
    scales: list[float]
    pad: tuple[int, int] = (0, 0)  # (left, top)
    image_size: Optional[tuple[int, int]] = None  # (H, W) before padding

    @property
    def channels(self) -> list[int]:
        return [lvl.shape[1] for lvl in self.levels]

    def select(self, idx) -> "FeatureVolume":
        return FeatureVolume([lvl[idx] for lvl in self.levels], self.scales, self.pad, self.image_size)


@dataclass
class FlowField:
    levels: list[torch.Tensor]  # (B, 2, H_l, W_l) offsets (du, dv) in level pixels


# ------------------------------------------------------------------ sampling

def bilinear_sample(feat: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``feat`` (B, C, H, W) at ``coords`` (B, N, 2) given as (x, y) in
    cell-index units (cell ``j`` centered at ``j``). Out-of-range coordinates
    clamp to the border. Returns (B, N, C)."""
    B, C, H, W = feat.shape
    x = coords[..., 0].clamp(0, W - 1)
    y = coords[..., 1].clamp(0, H - 1)
    x0 = x.floor().clamp(max=max(W - 2, 0))
    y0 = y.floor().clamp(max=max(H - 2, 0))
    wx, wy = x - x0, y - y0
    x0, y0 = x0.long(), y0.long()
    x1, y1 = (x0 + 1).clamp(max=W - 1), (y0 + 1).clamp(max=H - 1)
    rows = feat.reshape(B, C, H * W).transpose(1, 2)  # (B, HW, C)
    N = x.shape[1]
    idx = torch.cat([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1], dim=1)  # (B, 4N)
    corners = rows[torch.arange(B).unsqueeze(1), idx].reshape(B, 4, N, C)
    w = torch.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], dim=1)
    return (corners * w.unsqueeze(-1)).sum(1)


def warp_level(feat: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """``out(p) = feat(p + flow(p))`` with bilinear interpolation, border clamp."""
    if feat.shape[0] != flow.shape[0] or feat.shape[2:] != flow.shape[2:] or flow.shape[1] != 2:
        raise ValueError(f"flow {tuple(flow.shape)} does not match features {tuple(feat.shape)}")
    B, C, H, W = feat.shape
    ys, xs = torch.meshgrid(torch.arange(H, dtype=feat.dtype), torch.arange(W, dtype=feat.dtype),
                            indexing="ij")
    grid = torch.stack([xs, ys], dim=0).unsqueeze(0) + flow  # (B, 2, H, W)
    coords = grid.reshape(B, 2, H * W).transpose(1, 2)
    return bilinear_sample(feat, coords).transpose(1, 2).reshape(B, C, H, W)


def warp_features(volume: FeatureVolume, flow: FlowField) -> FeatureVolume:
    if len(flow.levels) != len(volume.levels):
        raise ValueError("flow and feature volume have different level counts")
    warped = [warp_level(f, d) for f, d in zip(volume.levels, flow.levels)]
    return FeatureVolume(warped, volume.scales, volume.pad, volume.image_size)


# ------------------------------------------------------------------- encoder

class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class ImageEncoder(nn.Module):
    """Four stride-2 residual stages; features at scales 1/2 .. 1/16."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        self.channels = tuple(channels)
        self.stem = nn.Conv2d(3, self.channels[0], 3, padding=1)
        stages, prev = [], self.channels[0]
        for ch in self.channels:
            stages.append(nn.Sequential(nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.ReLU(),
                                        ResidualBlock(ch)))
            prev = ch
        self.stages = nn.ModuleList(stages)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    @staticmethod
    def pad_amounts(H: int, W: int) -> tuple[int, int, int, int]:
        if min(H, W) < MIN_IMAGE_SIDE:
            raise ValueError(f"image too small: {H}x{W} (minimum side {MIN_IMAGE_SIDE})")
        th = max(PAD_MULTIPLE, math.ceil(H / PAD_MULTIPLE) * PAD_MULTIPLE)
        tw = max(PAD_MULTIPLE, math.ceil(W / PAD_MULTIPLE) * PAD_MULTIPLE)
        left, top = (tw - W) // 2, (th - H) // 2
        return left, tw - W - left, top, th - H - top

    def forward(self, images: torch.Tensor) -> FeatureVolume:
        """``images``: (B, 3, H, W) in [0, 1]."""
        H, W = images.shape[-2:]
        left, right, top, bottom = self.pad_amounts(H, W)
        x = images * 2.0 - 1.0
        if left or right or top or bottom:
            x = F.pad(x, (left, right, top, bottom), mode="reflect")
        x = F.relu(self.stem(x))
        levels, scales = [], []
        for k, stage in enumerate(self.stages):
            x = stage(x)
            levels.append(x)
            scales.append(0.5 ** (k + 1))
        return FeatureVolume(levels, scales, (left, top), (H, W))


def encode_image(encoder: ImageEncoder, image) -> FeatureVolume:
    """Encode one (H, W, 3) image."""
    img = torch.as_tensor(image, dtype=next(encoder.parameters()).dtype)
    return encoder(img.permute(2, 0, 1).unsqueeze(0))


# ----------------------------------------------------------- semantic mapping

class SemanticMapper(nn.Module):
    """MLP from expression coefficients to a latent code.

    With ``identity=True`` the map is the identity and the latent size is E.
    Window mode stacks ``2L + 1`` expression vectors and projects them back to
    E with a linear layer initialised to the window average.
    """

    def __init__(self, E: int, d_latent: int = 64, hidden: int = 64, identity: bool = False):
        super().__init__()
        self.E = E
        self.identity = identity
        self.d_latent = E if identity else d_latent
        if not identity:
            self.mlp = nn.Sequential(nn.Linear(E, hidden), nn.ReLU(), nn.Linear(hidden, hidden),
                                     nn.ReLU(), nn.Linear(hidden, d_latent))
        self.window = nn.ModuleDict()

    def forward(self, delta: torch.Tensor) -> torch.Tensor:
        if delta.shape[-1] != self.E:
            raise ValueError(f"expression vector has length {delta.shape[-1]}, expected {self.E}")
        return delta if self.identity else self.mlp(delta)

    def window_projection(self, L: int) -> nn.Linear:
        key = str(L)
        if key not in self.window:
            ref = next(self.parameters(), None)
            dtype = torch.get_default_dtype() if ref is None else ref.dtype
            proj = nn.Linear((2 * L + 1) * self.E, self.E, bias=False, dtype=dtype)
            with torch.no_grad():
                proj.weight.copy_(torch.eye(self.E, dtype=dtype).repeat(1, 2 * L + 1) / (2 * L + 1))
            self.window[key] = proj
        return self.window[key]

    def window_code(self, delta_seq: torch.Tensor, center: int, L: int) -> torch.Tensor:
        """Target code from the clamped window ``[center - L, center + L]``."""
        n = delta_seq.shape[0]
        if n == 0:
            raise ValueError("empty expression sequence")
        if L == 0:
            return self(delta_seq[center])
        idx = window_indices(n, center, L)
        stacked = delta_seq[idx].reshape(-1)
        return self(self.window_projection(L)(stacked))


def window_indices(n: int, center: int, L: int) -> list[int]:
    return [min(max(i, 0), n - 1) for i in range(center - L, center + L + 1)]


def motion_descriptor(mapper: SemanticMapper, delta_src: torch.Tensor, delta_tar: torch.Tensor,
                      target_code: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``f_m(delta_src) ++ f_m(delta_tar)`` along the last axis, broadcasting the target."""
    src = mapper(delta_src)
    tar = mapper(delta_tar) if target_code is None else target_code
    tar = tar.expand(src.shape[:-1] + tar.shape[-1:])
    return torch.cat([src, tar], dim=-1)


# ---------------------------------------------------------- AdaIN + flow net

def adain_modulate(z: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                   eps: float = ADAIN_EPS) -> torch.Tensor:
    """Per-sample, per-channel instance normalisation followed by ``gamma * . + beta``.
    ``z`` is (B, C, H, W); ``gamma``/``beta`` are (B, C)."""
    mu = z.mean(dim=(2, 3), keepdim=True)
    var = z.var(dim=(2, 3), keepdim=True, unbiased=False)
    return gamma[..., None, None] * (z - mu) / torch.sqrt(var + eps) + beta[..., None, None]


class AdaIN(nn.Module):
    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.affine = nn.Linear(cond_dim, 2 * channels)
        nn.init.normal_(self.affine.weight, std=0.02)
        nn.init.zeros_(self.affine.bias)

    def params(self, omega):
        d_gamma, beta = self.affine(omega).chunk(2, dim=-1)
        return 1.0 + d_gamma, beta

    def forward(self, z, omega):
        gamma, beta = self.params(omega)
        return adain_modulate(z, gamma, beta)


class ConvAdaIN(nn.Module):
    def __init__(self, cin: int, cout: int, cond_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = AdaIN(cout, cond_dim)

    def forward(self, x, omega):
        return F.leaky_relu(self.norm(self.conv(x), omega), 0.2)


class FlowPredictor(nn.Module):
    """Encoder-decoder over the feature pyramid with AdaIN after every
    convolution and a zero-initialised flow head per level."""

    def __init__(self, feat_channels: Sequence[int], cond_dim: int, hidden: int = 32):
        super().__init__()
        self.enc = nn.ModuleList()
        for k, c in enumerate(feat_channels):
            self.enc.append(ConvAdaIN(c + (hidden if k else 0), hidden, cond_dim))
        n = len(feat_channels)
        self.dec = nn.ModuleList(
            [ConvAdaIN(hidden if k == n - 1 else 2 * hidden, hidden, cond_dim) for k in range(n)]
        )
        self.heads = nn.ModuleList([nn.Conv2d(hidden, 2, 3, padding=1) for _ in range(n)])
        for h in self.heads:
            nn.init.zeros_(h.weight)
            nn.init.zeros_(h.bias)

    def forward(self, volume: FeatureVolume, omega: torch.Tensor) -> FlowField:
        skips, x = [], None
        for k, (block, feat) in enumerate(zip(self.enc, volume.levels)):
            inp = feat if x is None else torch.cat([F.avg_pool2d(x, 2, ceil_mode=True), feat], 1)
            x = block(inp, omega)
            skips.append(x)
        flows = [None] * len(skips)
        for k in reversed(range(len(skips))):
            if k == len(skips) - 1:
                x = self.dec[k](skips[k], omega)
            else:
                up = F.interpolate(x, size=skips[k].shape[-2:], mode="nearest")
                x = self.dec[k](torch.cat([up, skips[k]], 1), omega)
            flows[k] = self.heads[k](x)
        return FlowField(flows)


# --------------------------------------------------------------- composition

class ConditionalWarp(nn.Module):
    """Encoder + semantic mapper + flow predictor."""

    def __init__(self, E: int, channels: Sequence[int] = (16, 32, 64, 128), d_latent: int = 64,
                 mapper_hidden: int = 64, flow_hidden: int = 32, identity_mapper: bool = False):
        super().__init__()
        self.encoder = ImageEncoder(channels)
        self.mapper = SemanticMapper(E, d_latent, mapper_hidden, identity_mapper)
        self.flow = FlowPredictor(channels, 2 * self.mapper.d_latent, flow_hidden)

    def encode(self, images: torch.Tensor) -> FeatureVolume:
        return self.encoder(images)

    def warp_to_target(self, images: torch.Tensor, deltas: torch.Tensor,
                       delta_tar: Optional[torch.Tensor] = None,
                       target_code: Optional[torch.Tensor] = None):
        """Warp each input frame's features to the target expression.

        ``images`` (M, 3, H, W), ``deltas`` (M, E). Pass either ``delta_tar`` (E,)
        or a precomputed ``target_code`` (d_latent,). Returns ``(F, F_hat, flow)``.
        """
        feats = self.encoder(images)
        omega = motion_descriptor(self.mapper, deltas, delta_tar, target_code)
        flow = self.flow(feats, omega)
        return feats, warp_features(feats, flow), flow
