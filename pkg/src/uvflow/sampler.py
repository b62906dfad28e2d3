"""Euler integration of the learned flow, with optional landmark-energy guidance.

Convention: x_t = (1 - t) x0 + t x1 with x1 ~ N(0, I), dx/dt = v, and
sampling runs t from 1 down to 0, so one Euler step is x <- x - dt * v.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from . import toyfaces
from .landmarks import LandmarkDetector, energy_grad_t, energy_t
from .tensors import seeded, to_nchw, to_nhwc


@dataclass(frozen=True)
class GuidanceConfig:
    eta: float = 0.5
    steps: int = 20
    guide_from_t: float = 0.8
    guide_to_t: float = 0.0
    grad_clip: float = 1.0
    inner_iters: int = 1
    # "x0": energy of the denoised estimate, differentiated through x_t -> x0_hat;
    # "xt": energy of the noisy state itself
    target: str = "x0"

    def __post_init__(self):
        if not 1.0 >= self.guide_from_t >= self.guide_to_t >= 0.0:
            raise ValueError("need 1 >= guide_from_t >= guide_to_t >= 0")
        if self.eta < 0 or self.steps < 1 or self.inner_iters < 1:
            raise ValueError("need eta >= 0, steps >= 1, inner_iters >= 1")
        if self.target not in ("x0", "xt"):
            raise ValueError(f"unknown guidance target {self.target!r}")

    def active(self, t: float) -> bool:
        return self.eta > 0 and self.guide_to_t <= t <= self.guide_from_t


@dataclass
class SampleTrace:
    t: list[float] = field(default_factory=list)
    energy: list[np.ndarray] = field(default_factory=list)
    grad_norm: list[np.ndarray] = field(default_factory=list)
    x0: list[np.ndarray] | None = None
    n_evals: list[int] = field(default_factory=list)

    def energies(self) -> np.ndarray:
        """(steps, B) energy of the denoised estimate at each step."""
        return np.stack(self.energy) if self.energy else np.zeros((0, 0))

    def write_csv(self, path, sample: int = 0) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "t", "energy", "grad_norm"])
            for i, (t, e, g) in enumerate(zip(self.t, self.energy, self.grad_norm)):
                w.writerow([i, f"{t:.6f}", f"{float(e[sample]):.6f}", f"{float(g[sample]):.6f}"])


def x0_estimate(x_t, v, t):
    """Denoised estimate x0_hat = x_t - t * v."""
    return x_t - t * v


def euler_step(x_t, t: float, dt: float, v):
    """One step from t to t - dt along dx/dt = v."""
    if dt <= 0 or t - dt < -1e-12:
        raise ValueError(f"invalid step t={t}, dt={dt}")
    return x_t - dt * v


def initial_noise(seeds, shape) -> torch.Tensor:
    """Per-sample x1 ~ N(0, I); sample i depends only on its own seed."""
    return torch.stack([torch.randn(shape, generator=seeded(s)) for s in seeds])


def _seeds(seed, b):
    if isinstance(seed, (list, tuple, np.ndarray)):
        if len(seed) != b:
            raise ValueError("one seed per condition required")
        return [int(s) for s in seed]
    return [int(seed) + i for i in range(b)]


def _clip(g: torch.Tensor, max_norm: float) -> tuple[torch.Tensor, torch.Tensor]:
    norms = g.flatten(1).norm(dim=1)
    if not max_norm:
        return g, norms
    factor = torch.clamp(max_norm / (norms + 1e-12), max=1.0)
    return g * factor[:, None, None, None], norms


@torch.no_grad()
def guided_sample(cond, model, detector: LandmarkDetector | None, gcfg: GuidanceConfig = GuidanceConfig(),
                  seed=0, l_star=None, spec_fn=None, record_layers=None, group_k: int = 3,
                  keep_x0: bool = False):
    """Sample textures for portrait condition(s).

    Returns ``(textures, trace)`` with textures (B, H, W, 3) in [0, 1]. With
    ``record_layers`` set, returns ``(textures, trace, caches)`` where
    ``caches[i]`` holds the attention outputs of step i. ``spec_fn(i)`` gives
    the injection spec for step i.
    """
    c = to_nchw(cond) * 2 - 1
    b = c.shape[0]
    size = model.cfg.image_size
    if c.shape[-1] != size:
        raise ValueError(f"condition resolution {c.shape[-1]} != model resolution {size}")
    if detector is not None and detector.cfg.image_size != size:
        raise ValueError(f"detector resolution {detector.cfg.image_size} != model resolution {size}")
    l_star = toyfaces.canonical_landmarks() if l_star is None else l_star
    x = initial_noise(_seeds(seed, b), c.shape[1:])
    trace = SampleTrace(x0=[] if keep_x0 else None)
    caches = [] if record_layers is not None else None
    n, dt = gcfg.steps, 1.0 / gcfg.steps

    def velocity(x, t, spec, cache):
        if group_k == 3:
            return model(x, t, c, spec, record=cache, record_layers=record_layers)
        return model(x, t, c, spec, upto=model.group_end(group_k), record=cache, record_layers=record_layers)

    for i in range(n):
        t = 1.0 - i * dt
        spec = spec_fn(i) if spec_fn is not None else None
        guided = detector is not None and gcfg.active(t)
        evals = gcfg.inner_iters if guided else 1
        gnorm = torch.zeros(b)
        e = torch.full((b,), float("nan"))
        for it in range(evals):
            cache = {} if caches is not None else None
            v = velocity(x, t, spec, cache)
            x0h = x0_estimate(x, v, t)
            if guided:
                z = x0h if gcfg.target == "x0" else x
                # textures live in [0, 1]: d/dz E((z + 1) / 2) = 0.5 * dE/dtex
                e, g = energy_grad_t(detector, (z + 1) / 2, l_star)
                g = 0.5 * g
                if not (torch.isfinite(e).all() and torch.isfinite(g).all()):
                    raise FloatingPointError(f"non-finite guidance at step {i} (t={t:.3f})")
                g, gnorm = _clip(g, gcfg.grad_clip)
                x = x - gcfg.eta * g
            elif detector is not None and it == 0:
                e = energy_t(detector, (x0h + 1) / 2, l_star)
            if cache is not None and it == evals - 1:
                caches.append(cache)
        trace.t.append(t)
        trace.energy.append(e.double().numpy())
        trace.grad_norm.append(gnorm.double().numpy())
        trace.n_evals.append(evals)
        if keep_x0:
            trace.x0.append(to_nhwc((x0h + 1) / 2))
        x = euler_step(x, t, dt, v)
    out = to_nhwc(((x + 1) / 2).clamp(0, 1))
    if caches is not None:
        return out, trace, caches
    return out, trace


def unguided_sample(cond, model, steps: int = 20, seed=0, **kw) -> np.ndarray:
    return guided_sample(cond, model, None, GuidanceConfig(eta=0.0, steps=steps), seed, **kw)[0]


def sample_batched(conds, model, detector, gcfg: GuidanceConfig, seeds, batch: int = 50, **kw):
    """Run ``guided_sample`` in chunks; returns (textures, stacked energies (steps, N))."""
    outs, energies = [], []
    seeds = list(seeds)
    for i in range(0, len(conds), batch):
        o, tr = guided_sample(conds[i: i + batch], model, detector, gcfg, seeds[i: i + batch], **kw)[:2]
        outs.append(o)
        energies.append(tr.energies())
    return np.concatenate(outs), np.concatenate(energies, axis=1)
