"""Pinhole cameras, rays, projection, positional encoding and ray sampling.

Conventions: poses are camera-to-world 4x4 matrices; the camera looks along
its local +z axis with +x to the right and +y down the image. Pixel ``(i, j)``
has its center at continuous image coordinate ``(i + 0.5, j + 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch

BEHIND_CAMERA_EPS = 1e-6
PDF_FLOOR = 1e-5


class NonProjectableError(ValueError):
    """Raised when a point lies at or behind the camera plane."""


class Intrinsics(NamedTuple):
    fx: float
    fy: float
    cx: float
    cy: float

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class Rays:
    origins: torch.Tensor  # (R, 3)
    directions: torch.Tensor  # (R, 3), unit length
    near: float
    far: float

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.near, self.far)


@dataclass
class SampleBins:
    t_values: torch.Tensor  # (R, N)
    bin_edges: torch.Tensor  # (R, N + 1)


def as_pose(pose, dtype=torch.float64) -> torch.Tensor:
    """Accept a 4x4 matrix or an ``(R, t)`` pair and return a 4x4 tensor."""
    if isinstance(pose, (tuple, list)) and len(pose) == 2:
        rot, trans = (torch.as_tensor(np.asarray(p), dtype=dtype) for p in pose)
        out = torch.eye(4, dtype=dtype)
        out[:3, :3] = rot.reshape(3, 3)
        out[:3, 3] = trans.reshape(3)
        return out
    return torch.as_tensor(np.asarray(pose) if not torch.is_tensor(pose) else pose, dtype=dtype)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose at ``eye`` whose +z axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(x)
    if norm < 1e-9:
        raise ValueError("look_at: viewing direction parallel to up vector")
    x /= norm
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, eye
    return pose


def orbit_pose(radius: float, yaw: float, pitch: float) -> np.ndarray:
    """Pose on a sphere around the origin; yaw/pitch in radians, (0, 0) looks along +z."""
    eye = radius * np.array(
        [-math.sin(yaw) * math.cos(pitch), -math.sin(pitch), -math.cos(yaw) * math.cos(pitch)]
    )
    return look_at(eye)


def make_rays(intrinsics, pose, H: int, W: int, near: float = 0.0, far: float = 1.0,
              dtype=torch.float32) -> Rays:
    """One ray per pixel center, in row-major pixel order."""
    if H <= 0 or W <= 0:
        raise ValueError(f"image size must be positive, got {H}x{W}")
    fx, fy, cx, cy = intrinsics
    c2w = as_pose(pose, torch.float64)
    jj, ii = torch.meshgrid(
        torch.arange(H, dtype=torch.float64), torch.arange(W, dtype=torch.float64), indexing="ij"
    )
    dirs_cam = torch.stack(
        [(ii + 0.5 - cx) / fx, (jj + 0.5 - cy) / fy, torch.ones_like(ii)], dim=-1
    ).reshape(-1, 3)
    dirs = dirs_cam @ c2w[:3, :3].T
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = c2w[:3, 3].expand_as(dirs)
    return Rays(origins.to(dtype).contiguous(), dirs.to(dtype), near, far)


def project_points(x: torch.Tensor, intrinsics, pose):
    """Batched world-to-image projection.

    Returns ``(uv, depth, in_front)`` where ``uv`` is ``(..., 2)`` in continuous
    pixel coordinates. Entries with ``in_front == False`` carry finite dummy
    coordinates so that masked gradients stay finite.
    """
    c2w = as_pose(pose, x.dtype).to(x.device) if not torch.is_tensor(pose) else pose.to(x)
    rot, trans = c2w[:3, :3], c2w[:3, 3]
    xc = (x - trans) @ rot  # R^T (x - t)
    depth = xc[..., 2]
    in_front = depth > BEHIND_CAMERA_EPS
    safe_z = torch.where(in_front, depth, torch.ones_like(depth))
    fx, fy, cx, cy = intrinsics
    u = fx * xc[..., 0] / safe_z + cx
    v = fy * xc[..., 1] / safe_z + cy
    return torch.stack([u, v], dim=-1), depth, in_front


def project_point(x, intrinsics, pose) -> tuple[float, float, float]:
    """Project a single world point; raises :class:`NonProjectableError` behind the camera."""
    pt = torch.as_tensor(np.asarray(x, dtype=np.float64))
    uv, depth, ok = project_points(pt, intrinsics, as_pose(pose))
    if not bool(ok):
        raise NonProjectableError(f"point {list(map(float, pt))} is at or behind the camera (z={float(depth):.3g})")
    return float(uv[0]), float(uv[1]), float(depth)


def positional_encode(x: torch.Tensor, n_freqs: int, include_input: bool = True) -> torch.Tensor:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(n-1) pi x), cos(2^(n-1) pi x)]``."""
    if n_freqs < 0:
        raise ValueError("n_freqs must be >= 0")
    x = torch.as_tensor(x)
    parts = [x] if include_input else []
    for k in range(n_freqs):
        arg = (2.0**k * math.pi) * x
        parts += [torch.sin(arg), torch.cos(arg)]
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1)


def encoded_size(d: int, n_freqs: int, include_input: bool = True) -> int:
    return d * (2 * n_freqs + int(include_input))


def stratified_sample(near, far, n_rays: int, N: int, jitter: bool = False,
                      generator: Optional[torch.Generator] = None,
                      dtype=torch.float32) -> SampleBins:
    """Split ``[near, far]`` into ``N`` equal bins; midpoints or one uniform draw per bin."""
    if N < 1:
        raise ValueError("N must be >= 1")
    edges = torch.linspace(0.0, 1.0, N + 1, dtype=torch.float64)
    edges = (near + (far - near) * edges).to(dtype).expand(n_rays, N + 1).contiguous()
    lo, hi = edges[:, :-1], edges[:, 1:]
    if jitter:
        frac = torch.rand(n_rays, N, generator=generator, dtype=dtype)
    else:
        frac = torch.full((n_rays, N), 0.5, dtype=dtype)
    t = lo + (hi - lo) * frac
    return SampleBins(t, edges)


def importance_sample(bins: SampleBins, weights: torch.Tensor, N_fine: int, jitter: bool = False,
                      generator: Optional[torch.Generator] = None) -> SampleBins:
    """Inverse-CDF sampling of the piecewise-constant density proportional to ``weights``.

    Without jitter the CDF is inverted at the quantiles ``(i + 0.5) / N_fine``;
    with jitter, at one uniform draw inside each of those strata.
    """
    edges = bins.bin_edges
    if weights.shape != bins.t_values.shape:
        raise ValueError(f"weights shape {tuple(weights.shape)} != bins shape {tuple(bins.t_values.shape)}")
    n_rays = edges.shape[0]
    w = weights.detach().to(edges.dtype) + PDF_FLOOR
    pdf = w / w.sum(dim=-1, keepdim=True)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[:, :1]), cdf], dim=-1)
    cdf[:, -1] = 1.0
    if jitter:
        frac = torch.rand(n_rays, N_fine, generator=generator, dtype=edges.dtype)
    else:
        frac = torch.full((n_rays, N_fine), 0.5, dtype=edges.dtype)
    u = (torch.arange(N_fine, dtype=edges.dtype) + frac) / N_fine
    u = u.contiguous()
    idx = torch.searchsorted(cdf.contiguous(), u, right=True)
    below = (idx - 1).clamp(0, edges.shape[1] - 2)
    above = below + 1
    cdf_lo, cdf_hi = cdf.gather(1, below), cdf.gather(1, above)
    e_lo, e_hi = edges.gather(1, below), edges.gather(1, above)
    denom = torch.where(cdf_hi - cdf_lo > 0, cdf_hi - cdf_lo, torch.ones_like(cdf_lo))
    t = e_lo + (u - cdf_lo) / denom * (e_hi - e_lo)
    t = torch.minimum(torch.maximum(t, edges[:, :1]), edges[:, -1:])
    t, _ = torch.sort(t, dim=-1)
    return SampleBins(t, edges)
