"""PSNR / SSIM image metrics and evaluation reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _as_array(img) -> np.ndarray:
    if hasattr(img, "detach"):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only positions where the window fits."""
    k = len(g)
    rows = sum(g[i] * img[i:img.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(g[i] * rows[:, i:img.shape[1] - k + 1 + i] for i in range(k))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows of the channel-mean images."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class FrameScore:
    frame: int
    psnr: float
    ssim: float
    lpips: Optional[float] = None


@dataclass
class MetricReport:
    rows: list[FrameScore] = field(default_factory=list)

    def add(self, frame: int, pred, target, lpips_fn: Optional[Callable] = None) -> FrameScore:
        row = FrameScore(frame, psnr(pred, target), ssim(pred, target),
                         None if lpips_fn is None else float(lpips_fn(pred, target)))
        self.rows.append(row)
        return row

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else float("nan")

    def to_dict(self) -> dict:
        out = {"frames": [asdict(r) for r in self.rows],
               "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim}}
        lp = [r.lpips for r in self.rows if r.lpips is not None]
        if lp:
            out["mean"]["lpips"] = float(np.mean(lp))
        return out

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))
