"""Differentiable texture landmark detector, landmark energy and its gradient."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ckpt
from .tensors import seeded, to_nchw

log = logging.getLogger(__name__)

MAGIC = b"UVLMK\0"


@dataclass(frozen=True)
class DetectorConfig:
    n_landmarks: int = 12
    image_size: int = 64
    widths: tuple[int, int, int] = (16, 32, 48)
    tau: float = 0.1


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 2e-3
    sigma_px: float = 1.5
    ce_weight: float = 1.0
    max_shift: int = 6
    seed: int = 0


def _conv(cin, cout, stride=1, dilation=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, padding_mode="replicate")


class LandmarkDetector(nn.Module):
    """Three conv stages (two stride-2, one dilated) and a 1x1 heatmap head.

    Heatmaps live on an (H/4, W/4) grid; each landmark is the soft-argmax
    expectation of its heatmap, returned in texture pixel coordinates (x, y).
    """

    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        if cfg.tau <= 0:
            raise ValueError("tau must be > 0")
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        self.stages = nn.Sequential(
            _conv(3, w1, stride=2), nn.SiLU(), _conv(w1, w1), nn.SiLU(),
            _conv(w1, w2, stride=2), nn.SiLU(), _conv(w2, w2), nn.SiLU(),
            _conv(w2, w3, dilation=2), nn.SiLU(), _conv(w3, w3, dilation=4), nn.SiLU(),
        )
        self.head = nn.Conv2d(w3, cfg.n_landmarks, 1)
        g = cfg.image_size // 4
        centers = torch.arange(g, dtype=torch.float64) * 4 + 1.5
        yy, xx = torch.meshgrid(centers, centers, indexing="ij")
        self.register_buffer("grid", torch.stack([xx.reshape(-1), yy.reshape(-1)], 1), persistent=False)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        # soft clamp: denoised estimates may leave [0, 1]
        z = torch.tanh(2.0 * x - 1.0)
        return self.head(self.stages(z))

    def heatmaps(self, x: torch.Tensor) -> torch.Tensor:
        lg = self.logits(x)
        b, k, h, w = lg.shape
        return F.softmax(lg.reshape(b, k, h * w) / self.cfg.tau, dim=-1).reshape(b, k, h, w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in ~[0, 1] -> (B, K, 2) landmark coordinates."""
        hm = self.heatmaps(x)
        b, k = hm.shape[:2]
        return hm.reshape(b, k, -1) @ self.grid.to(hm.dtype)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _check_input(det: LandmarkDetector, x: torch.Tensor) -> None:
    s = det.cfg.image_size
    if x.shape[-2:] != (s, s) or x.shape[1] != 3:
        raise ValueError(f"detector expects (B, 3, {s}, {s}) input, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite values in detector input")


def _as_input(det: LandmarkDetector, texture) -> torch.Tensor:
    dtype = next(det.parameters()).dtype
    x = to_nchw(texture, dtype)
    _check_input(det, x)
    return x


def detect(det: LandmarkDetector, texture) -> np.ndarray:
    """Landmarks of one texture (K, 2) or a batch (B, K, 2)."""
    single = not isinstance(texture, torch.Tensor) and np.ndim(texture) == 3
    with torch.no_grad():
        pts = det(_as_input(det, texture)).double().numpy()
    return pts[0] if single else pts


def _l_star(det, l_star, dtype) -> torch.Tensor:
    ls = torch.as_tensor(np.asarray(l_star), dtype=dtype)
    if ls.shape[-2:] != (det.cfg.n_landmarks, 2):
        raise ValueError(f"l_star has shape {tuple(ls.shape)}, detector predicts {det.cfg.n_landmarks} landmarks")
    return ls


def energy_t(det: LandmarkDetector, x: torch.Tensor, l_star) -> torch.Tensor:
    """Per-sample energy ||l(x) - l*||^2 (pixel^2) for an NCHW tensor, differentiable."""
    _check_input(det, x)
    pts = det(x)
    return ((pts - _l_star(det, l_star, pts.dtype)) ** 2).sum(dim=(-1, -2))


def energy(det: LandmarkDetector, texture, l_star) -> float | np.ndarray:
    single = not isinstance(texture, torch.Tensor) and np.ndim(texture) == 3
    with torch.no_grad():
        e = energy_t(det, _as_input(det, texture), l_star).double().numpy()
    return float(e[0]) if single else e


def energy_grad_t(det: LandmarkDetector, x: torch.Tensor, l_star) -> tuple[torch.Tensor, torch.Tensor]:
    """(energies (B,), gradient w.r.t. x with x's shape), by reverse mode."""
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        e = energy_t(det, x, l_star)
        (g,) = torch.autograd.grad(e.sum(), x)
    if not torch.isfinite(g).all():
        raise FloatingPointError("non-finite landmark energy gradient")
    return e.detach(), g


def energy_grad(det: LandmarkDetector, texture, l_star) -> np.ndarray:
    """Gradient of the energy w.r.t. texture pixels, same (H, W, C) layout as the input."""
    single = not isinstance(texture, torch.Tensor) and np.ndim(texture) == 3
    _, g = energy_grad_t(det, _as_input(det, texture), l_star)
    g = g.permute(0, 2, 3, 1).double().numpy()
    return g[0] if single else g


# ---------------------------------------------------------------------------
# training


def gaussian_targets(points: torch.Tensor, grid: torch.Tensor, sigma: float) -> torch.Tensor:
    """Normalized Gaussian target maps on the heatmap grid, (B, K, G)."""
    d2 = ((points[:, :, None, :] - grid[None, None].to(points.dtype)) ** 2).sum(-1)
    w = torch.exp(-d2 / (2 * sigma**2))
    return w / w.sum(-1, keepdim=True)


def _augment(x: torch.Tensor, pts: torch.Tensor, gen: torch.Generator, max_shift: int):
    b = x.shape[0]
    out = torch.empty_like(x)
    pts = pts.clone()
    shifts = torch.randint(-max_shift, max_shift + 1, (b, 2), generator=gen)
    pad = max_shift
    xp = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    h, w = x.shape[-2:]
    for i in range(b):
        dx, dy = int(shifts[i, 0]), int(shifts[i, 1])
        out[i] = xp[i, :, pad - dy: pad - dy + h, pad - dx: pad - dx + w]
        pts[i, :, 0] += dx
        pts[i, :, 1] += dy
    # blur (half the batch), contrast / offset jitter, additive noise
    blur = torch.rand(b, generator=gen) < 0.5
    if blur.any():
        k = torch.tensor([0.25, 0.5, 0.25], dtype=x.dtype)
        kern = (k[:, None] * k[None, :]).expand(3, 1, 3, 3)
        out[blur] = F.conv2d(F.pad(out[blur], (1, 1, 1, 1), mode="replicate"), kern, groups=3)
    a = 1.0 + 0.2 * (2 * torch.rand(b, 1, 1, 1, generator=gen) - 1)
    c = 0.1 * (2 * torch.rand(b, 1, 1, 1, generator=gen) - 1)
    sig = 0.08 * torch.rand(b, 1, 1, 1, generator=gen)
    out = (out - 0.5) * a + 0.5 + c + sig * torch.randn(out.shape, generator=gen)
    return out, pts


def landmark_loss(det: LandmarkDetector, x: torch.Tensor, pts: torch.Tensor, sigma: float, ce_weight: float):
    lg = det.logits(x)
    b, k = lg.shape[:2]
    logp = F.log_softmax(lg.reshape(b, k, -1) / det.cfg.tau, dim=-1)
    pred = logp.exp() @ det.grid.to(logp.dtype)
    mse = ((pred - pts) ** 2).mean()
    ce = -(gaussian_targets(pts, det.grid, sigma) * logp).sum(-1).mean()
    return mse + ce_weight * ce, mse


class TrainingDiverged(RuntimeError):
    pass


def train_detector(textures: np.ndarray, landmarks: np.ndarray, cfg: DetectorTrainConfig = DetectorTrainConfig(),
                   det_cfg: DetectorConfig = DetectorConfig(), steps: int | None = None) -> LandmarkDetector:
    """Fit a detector on (N, H, W, 3) textures with (N, K, 2) landmark annotations.

    ``steps`` overrides the epoch-derived step count (0 returns the untrained detector).
    """
    torch.manual_seed(cfg.seed)
    det = LandmarkDetector(det_cfg)
    x_all = to_nchw(np.asarray(textures, np.float32))
    p_all = torch.as_tensor(np.asarray(landmarks, np.float32))
    n = len(x_all)
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = per_epoch * cfg.epochs if steps is None else steps
    if total == 0:
        return det
    opt = torch.optim.Adam(det.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total) / total)))
    gen = seeded(cfg.seed)
    step = 0
    while step < total:
        perm = torch.randperm(n, generator=gen)
        for j in range(0, n, cfg.batch_size):
            if step >= total:
                break
            idx = perm[j: j + cfg.batch_size]
            x, pts = _augment(x_all[idx], p_all[idx], gen, cfg.max_shift)
            loss, mse = landmark_loss(det, x, pts, cfg.sigma_px, cfg.ce_weight)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"detector loss is {loss.item()} at step {step} (coord mse {mse.item()})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            if step % 100 == 0:
                log.info("detector step %d/%d loss %.4f coord_mse %.3f px^2", step, total, loss.item(), mse.item())
            step += 1
    det.eval()
    return det


def mean_error(det: LandmarkDetector, textures, landmarks, batch: int = 256) -> float:
    """Mean Euclidean distance (px) between detections and annotations."""
    errs = []
    for i in range(0, len(textures), batch):
        pred = detect(det, np.asarray(textures[i: i + batch]))
        errs.append(np.linalg.norm(pred - np.asarray(landmarks[i: i + batch]), axis=-1).ravel())
    return float(np.concatenate(errs).mean())


def save_detector(det: LandmarkDetector, path) -> None:
    meta = {"kind": "landmarks", "config": asdict(det.cfg)}
    tensors = {k: v.detach().cpu().numpy() for k, v in det.state_dict().items()}
    ckpt.save(path, MAGIC, meta, tensors)


def load_detector(path) -> LandmarkDetector:
    meta, tensors = ckpt.load(path, MAGIC)
    c = meta["config"]
    det = LandmarkDetector(DetectorConfig(**{**c, "widths": tuple(c["widths"])}))
    state = det.state_dict()
    for name, ref in state.items():
        if name not in tensors:
            raise ckpt.CheckpointError(f"missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise ckpt.CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, expected {tuple(ref.shape)}")
    det.load_state_dict({k: torch.from_numpy(np.array(tensors[k])) for k in state})
    det.eval()
    return det
