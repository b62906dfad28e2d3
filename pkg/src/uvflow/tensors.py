from __future__ import annotations

import numpy as np
import torch


def to_nchw(img, dtype=torch.float32) -> torch.Tensor:
    """(H,W,C) or (N,H,W,C) array/tensor -> (N,C,H,W) tensor. NCHW tensors pass through."""
    if isinstance(img, torch.Tensor):
        t = img
        if t.ndim == 4 and t.shape[1] in (1, 3) and t.shape[-1] not in (1, 3):
            return t.to(dtype)
    else:
        t = torch.from_numpy(np.ascontiguousarray(img))
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4:
        raise ValueError(f"expected image or image batch, got shape {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).contiguous().to(dtype)


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()


def seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) & (2**63 - 1))
