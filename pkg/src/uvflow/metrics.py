"""Image and landmark metrics: PSNR, SSIM, landmark L2, masked L2, palette distance."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .toyfaces import luminance


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf when identical."""
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


C1 = 0.01**2
C2 = 0.03**2


def ssim_map(a, b, win: int = 11, sigma: float = 1.5) -> np.ndarray:
    a, b = _pair(a, b)
    a, b = luminance(a), luminance(b)
    if min(a.shape) < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} window")
    w = _gauss_window(win, sigma)
    f = lambda z: convolve2d(z, w, mode="valid")  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a**2
    var_b = f(b * b) - mu_b**2
    cov = f(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2))


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows of the luminance."""
    return float(ssim_map(a, b).mean())


def landmark_l2(texture, detector, l_star) -> float | np.ndarray:
    """Mean Euclidean landmark error (px) of detections vs ``l_star``; per sample for batches."""
    from .landmarks import detect

    l_star = np.asarray(l_star, dtype=np.float64)
    if l_star.shape[-2] == 0:
        raise ValueError("need at least one landmark")
    if l_star.shape[-2] != detector.cfg.n_landmarks:
        raise ValueError(f"l_star has {l_star.shape[-2]} landmarks, detector predicts {detector.cfg.n_landmarks}")
    d = np.linalg.norm(detect(detector, texture) - l_star, axis=-1).mean(-1)
    return float(d) if np.ndim(d) == 0 else d


def landmark_y_error(texture, detector, l_star) -> float | np.ndarray:
    """Mean absolute vertical landmark error (px)."""
    from .landmarks import detect

    d = np.abs(detect(detector, texture)[..., 1] - np.asarray(l_star)[..., 1]).mean(-1)
    return float(d) if np.ndim(d) == 0 else d


def masked_l2(a, b, mask) -> float:
    """Mean squared difference over masked pixels (all channels)."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("empty mask")
    return float(((a - b) ** 2)[mask].mean())


def palette_histogram(img, bins: int = 16) -> np.ndarray:
    q = np.clip((np.asarray(img, dtype=np.float64) * bins).astype(int), 0, bins - 1).reshape(-1, 3)
    h = np.bincount((q[:, 0] * bins + q[:, 1]) * bins + q[:, 2], minlength=bins**3).astype(np.float64)
    return h / h.sum()


def palette_hist_distance(a, b, bins: int = 16) -> float:
    """L1 distance between normalized 16^3-bin RGB histograms."""
    a, b = _pair(a, b)
    return float(np.abs(palette_histogram(a, bins) - palette_histogram(b, bins)).sum())


@dataclass
class MetricReport:
    sample_ids: list
    per_sample: dict[str, list[float]]
    config: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.per_sample.items()}

    @property
    def config_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()[:16]

    def rows(self):
        keys = list(self.per_sample)
        for i, sid in enumerate(self.sample_ids):
            yield [sid] + [self.per_sample[k][i] for k in keys]


def evaluate_pairs(preds, gts, ids, detector=None, l_star=None, masks: dict | None = None) -> MetricReport:
    per = {"psnr": [], "ssim": []}
    if detector is not None:
        per["landmark_l2"] = []
    for name in masks or {}:
        per[f"l2_{name}"] = []
    for p, g in zip(preds, gts):
        per["psnr"].append(psnr(p, g))
        per["ssim"].append(ssim(p, g))
        if detector is not None:
            per["landmark_l2"].append(landmark_l2(p, detector, l_star))
        for name, m in (masks or {}).items():
            per[f"l2_{name}"].append(masked_l2(p, g, m))
    return MetricReport(list(ids), per, {"n": len(ids), "masks": sorted(masks or {})})
