"""Radial power spectra, power-law fits and per-frequency SNR along the flow path."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .toyfaces import luminance


@dataclass(frozen=True)
class RadialSpectrum:
    freqs: np.ndarray  # mean |omega| of each bin, cycles per image
    power: np.ndarray  # mean |F|^2 of each bin (unnormalized DFT)
    window: str = "none"

    def __len__(self) -> int:
        return len(self.freqs)


def _as_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    img = luminance(img) if img.ndim == 3 else img
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"power_spectrum needs a square image, got shape {img.shape}")
    return img


def power_2d(image, window: str = "none") -> np.ndarray:
    """|DFT|^2 of the (luminance) image; sums to H*W times the sum of squares."""
    img = _as_gray(image)
    if window == "hann":
        w = np.hanning(img.shape[0])
        img = (img - img.mean()) * np.outer(w, w)
    elif window != "none":
        raise ValueError(f"unknown window {window!r}")
    return np.abs(np.fft.fft2(img)) ** 2


def _radius(n: int) -> np.ndarray:
    k = np.fft.fftfreq(n) * n
    return np.hypot(k[:, None], k[None, :])


def radial_average(p2d: np.ndarray, window: str = "none") -> RadialSpectrum:
    n = p2d.shape[0]
    r = _radius(n)
    idx = np.rint(r).astype(int)
    nb = n // 2
    sel = (idx >= 1) & (idx <= nb)  # DC excluded
    counts = np.bincount(idx[sel], minlength=nb + 1)[1:]
    power = np.bincount(idx[sel], weights=p2d[sel], minlength=nb + 1)[1:] / counts
    freqs = np.bincount(idx[sel], weights=r[sel], minlength=nb + 1)[1:] / counts
    return RadialSpectrum(freqs, power, window)


def power_spectrum(image, window: str = "none") -> RadialSpectrum:
    """Radially averaged power in floor(H/2) unit-width bins around |omega| = 1..H/2."""
    return radial_average(power_2d(image, window), window)


def mean_spectrum(images, window: str = "none") -> RadialSpectrum:
    p = np.mean([power_2d(im, window) for im in images], axis=0)
    return radial_average(p, window)


class FitError(ValueError):
    pass


def fit_alpha(spec: RadialSpectrum, min_bins: int = 8) -> tuple[float, float]:
    """Least-squares slope of log power vs log frequency; returns (alpha, r^2) with alpha = -slope."""
    ok = spec.power > 0
    if ok.sum() < min_bins:
        raise FitError(f"only {int(ok.sum())} bins with positive power (need {min_bins})")
    lx, ly = np.log(spec.freqs[ok]), np.log(spec.power[ok])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = ((ly - ly.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(-slope), float(r2)


def white_noise_power(n: int) -> np.ndarray:
    """Expected |DFT|^2 of unit Gaussian noise on an n x n grid: n^2 in every bin."""
    return np.full(n // 2, float(n * n))


def snr_curve(x0_power, noise_power, t_grid) -> np.ndarray:
    """SNR(bin, t) = (1-t)^2 P(bin) / (t^2 N(bin)), shape (bins, len(t_grid))."""
    t = np.asarray(t_grid, dtype=np.float64)
    if np.any((t <= 0) | (t >= 1)):
        raise ValueError("t must lie strictly inside (0, 1)")
    p = np.asarray(getattr(x0_power, "power", x0_power), dtype=np.float64)
    nz = np.asarray(getattr(noise_power, "power", noise_power), dtype=np.float64)
    return (p / nz)[:, None] * ((1 - t) ** 2 / t**2)[None, :]


def crossing_time(x0_power, noise_power) -> np.ndarray:
    """t*(bin) solving (1-t)^2 P = t^2 N, i.e. sqrt(P/N) / (1 + sqrt(P/N)); 0 where P = 0."""
    p = np.asarray(getattr(x0_power, "power", x0_power), dtype=np.float64)
    nz = np.asarray(getattr(noise_power, "power", noise_power), dtype=np.float64)
    r = np.sqrt(np.clip(p, 0, None) / nz)
    return np.where(p > 0, r / (1 + r), 0.0)


def crossing_time_from_table(snr: np.ndarray, t_grid) -> np.ndarray:
    """Recover t* per bin from an SNR table using the separable t-dependence."""
    t = np.asarray(t_grid, dtype=np.float64)
    ratio = snr / ((1 - t) ** 2 / t**2)[None, :]
    return crossing_time(ratio[:, 0], np.ones(len(ratio)))


def power_law_field(n: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Real field whose DFT power is exactly |omega|^-alpha (DC = 0), random phases."""
    f = np.fft.fft2(rng.standard_normal((n, n)))
    mag = np.abs(f)
    phase = np.divide(f, mag, out=np.zeros_like(f), where=mag > 0)
    r = _radius(n)
    amp = np.zeros_like(r)
    amp[r > 0] = r[r > 0] ** (-alpha / 2)
    return np.fft.ifft2(phase * amp).real


def parse_tgrid(text: str) -> np.ndarray:
    """``"a:b:n"`` -> n evenly spaced values from a to b."""
    a, b, n = text.split(":")
    return np.linspace(float(a), float(b), int(n))
