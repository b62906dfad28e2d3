"""Editing applications built on attention injection: ablation sweeps, style
transfer, group-truncation training and regional edits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import toyfaces
from .flowdit import (Checkpoint, FlowDiT, ModelConfig, Replace, Scale, TrainConfig, checkpoint_from,
                      train_model)
from .metrics import masked_l2
from .sampler import GuidanceConfig, guided_sample

REGIONS = ("mouth", "brow")
GROUP_LABELS = ("skin", "mouth", "brow")


@dataclass(frozen=True)
class GroupSpec:
    """Three consecutive layer groups: coarse skin, mouth, brow."""

    group1: tuple[int, ...]
    group2: tuple[int, ...]
    group3: tuple[int, ...]

    def __post_init__(self):
        flat = self.group1 + self.group2 + self.group3
        if list(flat) != list(range(len(flat))):
            raise ValueError("groups must be disjoint, ordered and cover every layer")

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "GroupSpec":
        return cls(*(tuple(g) for g in cfg.groups()))

    def layers(self, label: str) -> tuple[int, ...]:
        return (self.group1, self.group2, self.group3)[GROUP_LABELS.index(label)]


@dataclass(frozen=True)
class EditRequest:
    source: np.ndarray  # portrait (H, W, 3) in [0, 1]
    reference: np.ndarray
    regions: frozenset

    def __post_init__(self):
        object.__setattr__(self, "regions", frozenset(self.regions))
        if not self.regions:
            raise ValueError("regional edit needs at least one region")
        bad = self.regions - set(REGIONS)
        if bad:
            raise ValueError(f"unknown regions {sorted(bad)}; choose from {REGIONS}")


def parse_regions(text: str) -> frozenset:
    return frozenset(r.strip() for r in text.split(",") if r.strip())


def region_mask(regions) -> np.ndarray:
    m = toyfaces.region_masks()
    out = np.zeros_like(m.skin_mask)
    for r in regions:
        out |= getattr(m, f"{r}_mask")
    return out


def layer_order(cfg: ModelConfig, name: str) -> list[int]:
    """Named ablation orders over the single-stream layers (or all layers)."""
    single = list(range(cfg.n_double, cfg.n_layers))
    orders = {"single_forward": single, "single_reverse": single[::-1],
              "all_forward": list(range(cfg.n_layers)), "all_reverse": list(range(cfg.n_layers))[::-1]}
    if name not in orders:
        raise ValueError(f"unknown order {name!r}; choose from {sorted(orders)}")
    return orders[name]


# ---------------------------------------------------------------------------
# attention ablation


@dataclass
class AblationResult:
    order: list[int]
    eps: float
    textures: list[np.ndarray]  # k = 0..len(order), each (B, H, W, 3)
    degradation: dict[str, list[float]]  # region -> masked L2 vs k=0, per k
    onset: dict[str, int | None]

    def onset_order(self) -> list[str]:
        known = [(k, r) for r, k in self.onset.items() if k is not None]
        return [r for _, r in sorted(known)]

    def total(self) -> list[float]:
        return [float(sum(v[k] for v in self.degradation.values())) for k in range(len(self.textures))]


def ablation_sweep(cond, model: FlowDiT, gcfg: GuidanceConfig, order, eps: float, seed=0, detector=None,
                   onset_threshold: float = 1e-3) -> AblationResult:
    """Sample with ``Scale(eps)`` on the first k layers of ``order`` for k = 0..L.

    Degradation per region is the masked L2 against the k = 0 output; onset is
    the first k where it exceeds ``onset_threshold``.
    """
    order = [int(i) for i in order]
    if len(set(order)) != len(order) or any(not 0 <= i < model.cfg.n_layers for i in order):
        raise ValueError(f"order must list distinct layers in [0, {model.cfg.n_layers})")
    masks = toyfaces.feature_masks()
    textures, deg = [], {r: [] for r in masks}
    for k in range(len(order) + 1):
        spec = {i: Scale(eps) for i in order[:k]}
        out, _ = guided_sample(cond, model, detector, gcfg, seed, spec_fn=lambda _i, s=spec: s)
        textures.append(out)
        for r, m in masks.items():
            deg[r].append(float(np.mean([masked_l2(a, b, m) for a, b in zip(out, textures[0])])))
    onset = {r: next((k for k, v in enumerate(vals) if v > onset_threshold), None) for r, vals in deg.items()}
    return AblationResult(order, eps, textures, deg, onset)


# ---------------------------------------------------------------------------
# injection passes


def _record(cond, model, detector, gcfg, seed, layers):
    _, _, caches = guided_sample(cond, model, detector, gcfg, seed, record_layers=set(layers))
    return caches


def _inject(cond, model, detector, gcfg, seed, caches, layers, tokens=None):
    if len(caches) != gcfg.steps:
        raise ValueError(f"cache has {len(caches)} steps, sampler runs {gcfg.steps}")

    def spec_fn(i):
        return {j: Replace(caches[i][j], tokens) for j in layers}

    out, _ = guided_sample(cond, model, detector, gcfg, seed, spec_fn=spec_fn)
    return out


def style_transfer(identity, style, model: FlowDiT, detector=None, gcfg: GuidanceConfig = GuidanceConfig(),
                   seed=0) -> np.ndarray:
    """Texture with the identity's single-stream features and the style portrait's other features.

    Pass 1 samples on ``identity`` and records every single-stream attention
    output; pass 2 samples on ``style`` with those outputs substituted step by step.
    """
    layers = list(range(model.cfg.n_double, model.cfg.n_layers))
    identity, style = np.asarray(identity), np.asarray(style)
    if identity.shape != style.shape:
        raise ValueError("identity and style portraits must have the same shape")
    caches = _record(identity, model, detector, gcfg, seed, layers)
    return _inject(style, model, detector, gcfg, seed, caches, layers)


def texture_token_mask(cfg: ModelConfig, mask: np.ndarray):
    """Joint-sequence boolean mask selecting texture tokens whose patch touches ``mask``."""
    import torch

    g = cfg.grid
    p = mask.shape[0] // g  # mask pixels per token (masks may be drawn at a different resolution)
    touch = mask.reshape(g, p, g, p).any(axis=(1, 3)).reshape(-1)
    full = np.zeros(cfg.n_tokens + cfg.cond_tokens, bool)
    full[: cfg.n_tokens] = touch
    return torch.from_numpy(full)


def _edit_inputs(req: EditRequest):
    src, ref = np.asarray(req.source)[None], np.asarray(req.reference)[None]
    if src.shape != ref.shape:
        raise ValueError("source and reference portraits must have the same shape")
    return src, ref


def regional_edit(req: EditRequest, model: FlowDiT, detector=None, gcfg: GuidanceConfig = GuidanceConfig(),
                  seed=0, localize: bool = False, require_disentangled: bool = True) -> np.ndarray:
    """Source texture with the requested regions taken from the reference.

    Attention outputs of the groups named by ``req.regions`` are replaced by
    those of the reference pass. With ``localize`` only texture tokens covering
    the region masks are replaced.
    """
    if require_disentangled and not model.disentangled:
        raise ValueError("regional edits need a disentanglement-trained model")
    groups = GroupSpec.from_config(model.cfg)
    layers = [i for r in sorted(req.regions) for i in groups.layers(r)]
    src, ref = _edit_inputs(req)
    tokens = texture_token_mask(model.cfg, region_mask(req.regions)) if localize else None
    caches = _record(ref, model, detector, gcfg, seed, layers)
    return _inject(src, model, detector, gcfg, seed, caches, layers, tokens)[0]


def fuse_edit(req: EditRequest, model: FlowDiT, detector=None, gcfg: GuidanceConfig = GuidanceConfig(),
              seed=0) -> np.ndarray:
    """Baseline: replace every layer's attention output with the reference pass."""
    src, ref = _edit_inputs(req)
    layers = list(range(model.cfg.n_layers))
    caches = _record(ref, model, detector, gcfg, seed, layers)
    return _inject(src, model, detector, gcfg, seed, caches, layers)[0]


# ---------------------------------------------------------------------------
# training


def disentangle_train(model: FlowDiT, data, p: float = 0.3, cfg: TrainConfig = TrainConfig(),
                      state=None, **kw) -> Checkpoint:
    """Group-truncation training; returns a checkpoint flagged as disentangled."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    cfg = TrainConfig(**{**cfg.__dict__, "disentangle": True, "p": p})
    state = train_model(model, data, cfg, state, **kw)
    return checkpoint_from(model, state, {"p": p})


def group_decode(cond, model: FlowDiT, group_k: int, steps: int = 20, seed=0) -> np.ndarray:
    """Unguided sample using only the layers up to the end of ``group_k``."""
    return guided_sample(cond, model, None, GuidanceConfig(eta=0.0, steps=steps), seed, group_k=group_k)[0]
