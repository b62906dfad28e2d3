"""Miniature flow-matching diffusion transformer with double- and single-stream blocks.

Texture tokens and portrait-condition tokens share one joint sequence
``[texture; condition]``. Double-stream blocks keep separate weights per
stream and attend jointly; single-stream blocks use one set of weights.
Every block exposes its attention output (after the output projection) so a
pass can be recorded, scaled, replaced, or cut short at a group boundary.
"""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ckpt
from .tensors import seeded

log = logging.getLogger(__name__)

MAGIC = b"UVDIT\0"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 4
    channels: int = 3
    token_dim: int = 128
    heads: int = 4
    n_double: int = 4
    n_single: int = 8
    group_boundaries: tuple[int, int] = (4, 8)
    time_dim: int = 64
    cond_tokens: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "group_boundaries", tuple(int(b) for b in self.group_boundaries))
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.token_dim % self.heads:
            raise ConfigError("token_dim must be divisible by heads")
        g = math.isqrt(self.cond_tokens)
        if g * g != self.cond_tokens or self.image_size % g:
            raise ConfigError("cond_tokens must be a square grid dividing image_size")
        b1, b2 = self.group_boundaries
        if not 0 < b1 <= b2 < self.n_layers:
            raise ConfigError(f"group boundaries must satisfy 0 < b1 <= b2 < {self.n_layers}, got {(b1, b2)}")

    @property
    def n_layers(self) -> int:
        return self.n_double + self.n_single

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid**2

    @property
    def cond_patch_size(self) -> int:
        return self.image_size // math.isqrt(self.cond_tokens)

    def groups(self) -> tuple[list[int], list[int], list[int]]:
        b1, b2 = self.group_boundaries
        return list(range(0, b1)), list(range(b1, b2)), list(range(b2, self.n_layers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_boundaries"] = list(self.group_boundaries)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        d = json.loads(Path(path).read_text())
        return cls.from_dict(d.get("model", d))


# ---------------------------------------------------------------------------
# injection directives


@dataclass(frozen=True)
class Scale:
    """Multiply the attention output by ``eps`` (``mode="logits"`` scales pre-softmax logits instead)."""

    eps: float
    mode: str = "output"
    tokens: torch.Tensor | None = None

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.mode not in ("output", "logits"):
            raise ValueError(f"unknown scale mode {self.mode!r}")
        if self.mode == "logits" and self.tokens is not None:
            raise ValueError("token masks apply to output scaling only")


@dataclass(frozen=True)
class Replace:
    """Substitute the attention output with recorded features (optionally on a token subset)."""

    features: torch.Tensor
    tokens: torch.Tensor | None = None


Directive = Scale | Replace | None
InjectionSpec = dict  # layer index -> Directive; missing layers pass through
FeatureCache = dict  # layer index -> (B, N_joint, D) attention output


def scale_all(cfg: ModelConfig, eps: float, layers=None, mode: str = "output") -> InjectionSpec:
    layers = range(cfg.n_layers) if layers is None else layers
    return {i: Scale(eps, mode) for i in layers}


def replay(cache: FeatureCache, layers=None) -> InjectionSpec:
    layers = cache.keys() if layers is None else layers
    return {i: Replace(cache[i]) for i in layers}


def _apply(out: torch.Tensor, d: Directive) -> torch.Tensor:
    if isinstance(d, Scale) and d.mode == "output":
        if d.tokens is None:
            return out * d.eps
        return torch.where(d.tokens[None, :, None], out * d.eps, out)
    if isinstance(d, Replace):
        if d.features.shape != out.shape:
            raise ValueError(f"replacement features {tuple(d.features.shape)} do not match {tuple(out.shape)}")
        if d.tokens is None:
            return d.features.to(out.dtype)
        return torch.where(d.tokens[None, :, None], d.features.to(out.dtype), out)
    return out


# ---------------------------------------------------------------------------
# model


def patchify(img: torch.Tensor, p: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, (H/p)*(W/p), p*p*C); token k covers block (x=k mod G, y=k div G)."""
    b, c, h, w = img.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch {p}")
    x = img.reshape(b, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: torch.Tensor, p: int, channels: int) -> torch.Tensor:
    b, n, d = tokens.shape
    g = math.isqrt(n)
    if g * g != n or d != p * p * channels:
        raise ValueError(f"cannot unpatchify tokens of shape {tuple(tokens.shape)} with patch {p}")
    x = tokens.reshape(b, g, g, p, p, channels)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, channels, g * p, g * p)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _mlp(d, ratio):
    return nn.Sequential(nn.Linear(d, d * ratio), nn.GELU(approximate="tanh"), nn.Linear(d * ratio, d))


class _Attention:
    @staticmethod
    def run(q, k, v, heads: int, logit_scale: float = 1.0) -> torch.Tensor:
        b, n, d = q.shape
        dh = d // heads
        q, k, v = (z.reshape(b, n, heads, dh).transpose(1, 2) for z in (q, k, v))
        a = F.scaled_dot_product_attention(q, k, v, scale=logit_scale / math.sqrt(dh))
        return a.transpose(1, 2).reshape(b, n, d)


def attention_probs(q, k, heads: int, logit_scale: float = 1.0) -> torch.Tensor:
    """Explicit attention matrix, (B, heads, N, N); for inspection and tests."""
    b, n, d = q.shape
    dh = d // heads
    q, k = (z.reshape(b, n, heads, dh).transpose(1, 2) for z in (q, k))
    return torch.softmax(logit_scale * (q @ k.transpose(-1, -2)) / math.sqrt(dh), dim=-1)


class DoubleStreamBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.ModuleList([nn.LayerNorm(d), nn.LayerNorm(d)])
        self.qkv = nn.ModuleList([nn.Linear(d, 3 * d), nn.Linear(d, 3 * d)])
        self.proj = nn.ModuleList([nn.Linear(d, d), nn.Linear(d, d)])
        self.ln2 = nn.ModuleList([nn.LayerNorm(d), nn.LayerNorm(d)])
        self.mlp = nn.ModuleList([_mlp(d, mlp_ratio), _mlp(d, mlp_ratio)])

    def qk(self, h, nx):
        parts = [self.qkv[s](self.ln1[s](z)).chunk(3, -1) for s, z in enumerate((h[:, :nx], h[:, nx:]))]
        return torch.cat([parts[0][0], parts[1][0]], 1), torch.cat([parts[0][1], parts[1][1]], 1)

    def attn_out(self, h, nx, logit_scale=1.0):
        parts = [self.qkv[s](self.ln1[s](z)).chunk(3, -1) for s, z in enumerate((h[:, :nx], h[:, nx:]))]
        q, k, v = (torch.cat([parts[0][i], parts[1][i]], 1) for i in range(3))
        a = _Attention.run(q, k, v, self.heads, logit_scale)
        return torch.cat([self.proj[0](a[:, :nx]), self.proj[1](a[:, nx:])], 1)

    def mlp_out(self, h, nx):
        return torch.cat([self.mlp[s](self.ln2[s](z)) for s, z in enumerate((h[:, :nx], h[:, nx:]))], 1)


class SingleStreamBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = _mlp(d, mlp_ratio)

    def qk(self, h, nx):
        q, k, _ = self.qkv(self.ln1(h)).chunk(3, -1)
        return q, k

    def attn_out(self, h, nx, logit_scale=1.0):
        q, k, v = self.qkv(self.ln1(h)).chunk(3, -1)
        return self.proj(_Attention.run(q, k, v, self.heads, logit_scale))

    def mlp_out(self, h, nx):
        return self.mlp(self.ln2(h))


class FlowDiT(nn.Module):
    """Velocity model v(x_t, t, cond); images are (B, C, H, W) in [-1, 1]."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        d, p, cp, c = cfg.token_dim, cfg.patch_size, cfg.cond_patch_size, cfg.channels
        self.x_embed = nn.Linear(p * p * c, d)
        self.c_embed = nn.Linear(cp * cp * c, d)
        self.x_pos = nn.Parameter(torch.randn(1, cfg.n_tokens, d) * 0.02)
        self.c_pos = nn.Parameter(torch.randn(1, cfg.cond_tokens, d) * 0.02)
        self.t_mlp = nn.Sequential(nn.Linear(cfg.time_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            [DoubleStreamBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.n_double)]
            + [SingleStreamBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.n_single)]
        )
        self.out_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, p * p * c)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.disentangled = False

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _t(self, t, b) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.x_pos.dtype)
        if t.ndim == 0:
            t = t.expand(b)
        if not torch.isfinite(t).all():
            raise ValueError("non-finite t")
        return t

    def embed(self, x, t, cond):
        cfg = self.cfg
        b = x.shape[0]
        if x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size) or cond.shape[1:] != x.shape[1:]:
            raise ValueError(f"expected (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}) inputs, "
                             f"got {tuple(x.shape)} and {tuple(cond.shape)}")
        temb = self.t_mlp(timestep_embedding(self._t(t, b), cfg.time_dim))
        hx = self.x_embed(patchify(x, cfg.patch_size)) + self.x_pos
        hc = self.c_embed(patchify(cond, cfg.cond_patch_size)) + self.c_pos
        return torch.cat([hx, hc], 1) + temb[:, None], temb

    def decode(self, h, temb):
        cfg = self.cfg
        tok = self.out(self.out_norm(h[:, : cfg.n_tokens] + temb[:, None]))
        return unpatchify(tok, cfg.patch_size, cfg.channels)

    def run_blocks(self, h, spec: InjectionSpec | None = None, record: FeatureCache | None = None,
                   upto: int | None = None, record_layers=None):
        nx = self.cfg.n_tokens
        spec = spec or {}
        for i, blk in enumerate(self.blocks[:upto]):
            d = spec.get(i)
            logit_scale = d.eps if isinstance(d, Scale) and d.mode == "logits" else 1.0
            a = _apply(blk.attn_out(h, nx, logit_scale), d)
            if record is not None and (record_layers is None or i in record_layers):
                record[i] = a.detach()
            h = h + a
            h = h + blk.mlp_out(h, nx)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations after layer {i}")
        return h

    def forward(self, x, t, cond, spec: InjectionSpec | None = None, record: FeatureCache | None = None,
                upto: int | None = None, record_layers=None):
        h, temb = self.embed(x, t, cond)
        h = self.run_blocks(h, spec, record, upto, record_layers)
        return self.decode(h, temb)

    def group_end(self, group_k: int) -> int:
        if group_k not in (1, 2, 3):
            raise ValueError(f"group_k must be 1, 2 or 3, got {group_k}")
        return (*self.cfg.group_boundaries, self.cfg.n_layers)[group_k - 1]

    def forward_truncated(self, x, t, cond, group_k: int, spec: InjectionSpec | None = None):
        """Run layers up to the end of group ``group_k``, then the shared output head."""
        return self.forward(x, t, cond, spec, upto=self.group_end(group_k))

    def record_features(self, x, t, cond, spec: InjectionSpec | None = None, layers=None):
        cache: FeatureCache = {}
        v = self.forward(x, t, cond, spec, record=cache, record_layers=layers)
        return v, cache


def loss_rf(model, x0: torch.Tensor, cond: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Flow-matching loss ``E ||v(x_t, t, c) - (eps - x0)||^2`` with x_t = (1-t) x0 + t eps.

    ``x0`` and ``cond`` are (B, C, H, W) in [0, 1]; ``model`` is any callable
    ``(x_t, t, cond) -> v`` working in [-1, 1] space.
    """
    x0 = x0 * 2 - 1
    cond = cond * 2 - 1
    b = x0.shape[0]
    t = torch.rand(b, generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    tb = t[:, None, None, None]
    xt = (1 - tb) * x0 + tb * eps
    v = model(xt, t, cond)
    return ((v - (eps - x0)) ** 2).mean()


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-4
    warmup: int = 100
    grad_clip: float = 1.0
    seed: int = 0
    disentangle: bool = False
    p: float = 0.3
    ema_decay: float = 0.999


TARGETS = {1: "t_skin", 2: "t_skin_mouth", 3: "textures"}


def choose_group(p: float, branch_gen: torch.Generator) -> int:
    """Truncation branch: boundary 1 is tried first, then boundary 2, else the full pass."""
    if torch.rand((), generator=branch_gen).item() < p:
        return 1
    if torch.rand((), generator=branch_gen).item() < p:
        return 2
    return 3


@dataclass
class TrainState:
    model: FlowDiT
    opt: torch.optim.Optimizer
    gen: torch.Generator
    branch_gen: torch.Generator
    step: int = 0
    ema: dict | None = None
    history: list = field(default_factory=list)


def _lr_lambda(cfg: TrainConfig):
    def f(s):
        if s < cfg.warmup:
            return (s + 1) / cfg.warmup
        prog = min(1.0, (s - cfg.warmup) / max(1, cfg.steps - cfg.warmup))
        return 0.5 * (1 + math.cos(math.pi * prog))
    return f


def new_state(model: FlowDiT, cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ema = {k: v.detach().clone() for k, v in model.state_dict().items()} if cfg.ema_decay else None
    return TrainState(model, opt, seeded(cfg.seed), seeded(cfg.seed + 0x5EED), 0, ema)


def train_model(model: FlowDiT, data, cfg: TrainConfig, state: TrainState | None = None,
                log_every: int = 50, on_log=None, stop_at: int | None = None) -> TrainState:
    """Train on a ``ToyDataset`` (portraits/textures/t_skin/t_skin_mouth arrays in [0, 1]).

    With ``cfg.disentangle`` each batch may stop at a group boundary and be
    supervised against the matching partial texture. ``stop_at`` pauses early
    without changing the schedule, so a later call with the returned state
    continues exactly.
    """
    if cfg.disentangle and (getattr(data, "t_skin", None) is None or getattr(data, "t_skin_mouth", None) is None):
        raise ValueError("disentanglement training needs layered targets (t_skin, t_skin_mouth)")
    state = state or new_state(model, cfg)
    arrays = {k: torch.from_numpy(np.ascontiguousarray(getattr(data, k))).permute(0, 3, 1, 2)
              for k in ("portraits", "textures", "t_skin", "t_skin_mouth") if getattr(data, k, None) is not None}
    n = arrays["textures"].shape[0]
    sched = torch.optim.lr_scheduler.LambdaLR(state.opt, _lr_lambda(cfg), last_epoch=-1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # fast-forwarding the schedule on resume
        for _ in range(state.step):
            sched.step()
    model.train()
    t0 = time.time()
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    while state.step < end:
        idx = torch.randint(0, n, (cfg.batch_size,), generator=state.gen)
        group = choose_group(cfg.p, state.branch_gen) if cfg.disentangle else 3
        x0 = arrays[TARGETS[group]][idx]
        cond = arrays["portraits"][idx]
        fn = model if group == 3 else (lambda x, t, c, g=group: model.forward_truncated(x, t, c, g))
        loss = loss_rf(fn, x0, cond, state.gen)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"loss is {loss.item()} at step {state.step}")
        state.opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        state.opt.step()
        sched.step()
        state.step += 1
        if state.ema is not None:
            decay = min(cfg.ema_decay, (1 + state.step) / (10 + state.step))
            with torch.no_grad():
                for k, v in model.state_dict().items():
                    if v.dtype.is_floating_point:
                        state.ema[k].mul_(decay).add_(v.detach(), alpha=1 - decay)
        state.history.append((state.step, group, loss.item()))
        if state.step % log_every == 0 or state.step == cfg.steps:
            recent = [l for _, g, l in state.history[-log_every:] if g == 3]
            log.info("step %d/%d loss(full) %.4f lr %.2e %.1fs", state.step, cfg.steps,
                     float(np.mean(recent)) if recent else float("nan"), sched.get_last_lr()[0], time.time() - t0)
            if on_log:
                on_log(state)
    model.disentangled = model.disentangled or cfg.disentangle
    if state.step >= cfg.steps:
        model.eval()
    return state


def ema_model(state: TrainState) -> FlowDiT:
    m = FlowDiT(state.model.cfg)
    m.load_state_dict(state.ema if state.ema is not None else state.model.state_dict())
    m.disentangled = state.model.disentangled
    m.eval()
    return m


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    ema: dict[str, np.ndarray] = field(default_factory=dict)

    def model(self, use_ema: bool = True) -> FlowDiT:
        """Instantiate the model; EMA weights are used when present and ``use_ema``."""
        src = self.ema if (use_ema and self.ema) else self.params
        m = FlowDiT(self.config)
        state = m.state_dict()
        for name, ref in state.items():
            if name not in src:
                raise ckpt.CheckpointError(f"missing tensor {name!r}")
            if tuple(src[name].shape) != tuple(ref.shape):
                raise ckpt.CheckpointError(
                    f"tensor {name!r} has shape {tuple(src[name].shape)}, config expects {tuple(ref.shape)}")
        m.load_state_dict({k: torch.from_numpy(np.array(src[k])) for k in state})
        m.disentangled = bool(self.meta.get("disentangled", False))
        m.eval()
        return m

    def resume(self, cfg: "TrainConfig") -> TrainState:
        """Training state (raw weights, optimizer moments, RNG streams, EMA) to continue exactly."""
        model = self.model(use_ema=False)
        state = new_state(model, cfg)
        state.step = self.step
        if self.optimizer:
            sd = state.opt.state_dict()
            per: dict = {}
            for key, arr in self.optimizer.items():
                pid, _, name = key.partition(".")
                per.setdefault(int(pid), {})[name] = torch.from_numpy(np.array(arr))
            sd["state"] = per
            state.opt.load_state_dict(sd)
        if self.rng:
            state.gen.set_state(torch.from_numpy(np.array(self.rng["gen"])))
            state.branch_gen.set_state(torch.from_numpy(np.array(self.rng["branch_gen"])))
        if self.ema and state.ema is not None:
            state.ema = {k: torch.from_numpy(np.array(v)) for k, v in self.ema.items()}
        return state


def checkpoint_from(model: FlowDiT, state: TrainState | None = None, meta: dict | None = None) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    opt, rng, ema = {}, {}, {}
    if state is not None:
        sd = state.opt.state_dict()
        for pid, st in sd["state"].items():
            for k, v in st.items():
                opt[f"{pid}.{k}"] = torch.as_tensor(v).detach().cpu().numpy().copy()
        rng["gen"] = state.gen.get_state().numpy().copy()
        rng["branch_gen"] = state.branch_gen.get_state().numpy().copy()
        if state.ema is not None:
            ema = {k: v.detach().cpu().numpy().copy() for k, v in state.ema.items()}
    m = {"disentangled": bool(model.disentangled)}
    m.update(meta or {})
    return Checkpoint(model.cfg, params, state.step if state else 0, opt, rng, m, ema)


def save_checkpoint(c: Checkpoint, path) -> None:
    tensors = {f"param/{k}": v for k, v in c.params.items()}
    tensors.update({f"optim/{k}": v for k, v in c.optimizer.items()})
    tensors.update({f"rng/{k}": v for k, v in c.rng.items()})
    tensors.update({f"ema/{k}": v for k, v in c.ema.items()})
    meta = {"kind": "flowdit", "config": c.config.to_dict(), "step": int(c.step), "meta": c.meta}
    ckpt.save(path, MAGIC, meta, tensors)


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    meta, tensors = ckpt.load(path, MAGIC)
    if meta.get("kind") != "flowdit":
        raise ckpt.CheckpointError(f"not a model checkpoint: kind={meta.get('kind')!r}")
    cfg = ModelConfig.from_dict(meta["config"])
    groups = {"param": {}, "optim": {}, "rng": {}, "ema": {}}
    for name, arr in tensors.items():
        kind, _, rest = name.partition("/")
        if kind not in groups:
            raise ckpt.CheckpointError(f"unexpected tensor {name!r}")
        groups[kind][rest] = arr
    c = Checkpoint(cfg, groups["param"], int(meta["step"]), groups["optim"], groups["rng"], meta.get("meta", {}),
                   groups["ema"])
    if expect is not None:
        c.config = expect
        c.model(use_ema=False)  # raises on the first mismatched tensor
        c.config = cfg
    return c


def load_model(path) -> FlowDiT:
    return load_checkpoint(path).model()
