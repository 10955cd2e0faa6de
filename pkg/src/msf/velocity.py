"""Conditional velocity field: a small DiT-style transformer.

One shared backbone serves every scale. The per-scale prior enters by
channel concatenation with the noisy state (zero-padded at the base
scale, which has no prior), and a per-scale segment embedding joins the
timestep and class embeddings in the adaptive-layernorm conditioning
vector. The output head is zero-initialized, so a freshly created field
is identically zero.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .grid import LatentGrid

MSFC_MAGIC = b"MSFC"
MSFC_VERSION = 1

TIME_EMBED_FREQS = 64
TIME_EMBED_SCALE = 1000.0
INIT_STD = 0.02


@dataclass(frozen=True)
class VelocityConfig:
    channels: int
    scale_sizes: tuple[tuple[int, int], ...]
    patch_sizes: tuple[int, ...]
    hidden_width: int = 128
    depth: int = 4
    heads: int = 4
    num_classes: int = 8
    has_null_class: bool = True

    def __post_init__(self):
        sizes = tuple((int(h), int(w)) for h, w in self.scale_sizes)
        patches = tuple(int(p) for p in self.patch_sizes)
        object.__setattr__(self, "scale_sizes", sizes)
        object.__setattr__(self, "patch_sizes", patches)
        if self.channels < 1 or self.hidden_width < 1 or self.depth < 1:
            raise ConfigError("channels, hidden_width and depth must be positive")
        if self.heads < 1 or self.hidden_width % self.heads:
            raise ConfigError(
                f"hidden_width {self.hidden_width} not divisible by heads {self.heads}"
            )
        if self.num_classes < 1:
            raise ConfigError("need at least one class")
        if not self.has_null_class:
            raise ConfigError("the null/unconditional class row is required")
        if not sizes or len(patches) != len(sizes):
            raise ConfigError("need one patch size per scale")
        for (h, w), p in zip(sizes, patches):
            if p < 1 or h % p or w % p:
                raise ConfigError(f"patch size {p} does not divide scale ({h}, {w})")

    @property
    def num_scales(self) -> int:
        return len(self.scale_sizes)

    @property
    def null_class(self) -> int:
        return self.num_classes

    def tokens(self, scale_index: int) -> int:
        (h, w), p = self.scale_sizes[scale_index], self.patch_sizes[scale_index]
        return (h // p) * (w // p)


@dataclass(frozen=True)
class ConditionBundle:
    """Everything the field is conditioned on for one evaluation."""

    class_id: int
    t: float
    scale_index: int
    prior: LatentGrid | None = None

    def __post_init__(self):
        if (self.prior is None) != (self.scale_index == 0):
            raise ValueError("prior must be absent exactly at scale 0")


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of t in [0, 1], projected through a small MLP."""

    def __init__(self, width: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(2 * TIME_EMBED_FREQS, width),
            nn.SiLU(),
            nn.Linear(width, width),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        k = torch.arange(TIME_EMBED_FREQS, dtype=t.dtype, device=t.device)
        freqs = torch.exp(-math.log(10000.0) * k / TIME_EMBED_FREQS)
        args = t[:, None] * TIME_EMBED_SCALE * freqs[None, :]
        return self.mlp(torch.cat([torch.cos(args), torch.sin(args)], dim=-1))


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale[:, None, :]) + shift[:, None, :]


class Block(nn.Module):
    """Transformer block with adaptive-layernorm conditioning."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width),
            nn.GELU(approximate="tanh"),
            nn.Linear(4 * width, width),
        )
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        sh_a, sc_a, g_a, sh_m, sc_m, g_m = self.modulation(cond).chunk(6, dim=-1)
        x = x + g_a[:, None, :] * self.attn(_modulate(self.norm1(x), sh_a, sc_a))
        x = x + g_m[:, None, :] * self.mlp(_modulate(self.norm2(x), sh_m, sc_m))
        return x


class VelocityField(nn.Module):
    """v(z_t, t | class, scale, prior) over batched (B, C, h, w) tensors.

    `eval_count` tracks the number of forward invocations; classifier-free
    guidance costs two per step, plain conditional evaluation one.
    """

    def __init__(self, config: VelocityConfig):
        super().__init__()
        self.config = config
        d = config.hidden_width
        self.class_embed = nn.Embedding(config.num_classes + 1, d)
        self.segment_embed = nn.Embedding(config.num_scales, d)
        self.time_embed = TimestepEmbedder(d)
        self.patch_embed = nn.ModuleDict()
        self.unembed = nn.ModuleDict()
        for p in sorted(set(config.patch_sizes)):
            self.patch_embed[str(p)] = nn.Linear(2 * config.channels * p * p, d)
            self.unembed[str(p)] = nn.Linear(d, config.channels * p * p)
        self.pos_embed = nn.ParameterDict(
            {
                str(i): nn.Parameter(torch.zeros(1, config.tokens(i), d))
                for i in range(config.num_scales)
            }
        )
        self.blocks = nn.ModuleList(
            Block(d, config.heads) for _ in range(config.depth)
        )
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.eval_count = 0

    def reset_eval_count(self) -> None:
        self.eval_count = 0

    def _patchify(self, x: torch.Tensor, p: int) -> torch.Tensor:
        b, c, h, w = x.shape
        gh, gw = h // p, w // p
        x = x.reshape(b, c, gh, p, gw, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(b, gh * gw, p * p * c)

    def _unpatchify(self, x: torch.Tensor, p: int, h: int, w: int) -> torch.Tensor:
        b = x.shape[0]
        c = self.config.channels
        gh, gw = h // p, w // p
        x = x.reshape(b, gh, gw, p, p, c).permute(0, 5, 1, 3, 2, 4)
        return x.reshape(b, c, h, w)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        class_ids: torch.Tensor,
        scale_index: int,
        prior: torch.Tensor | None = None,
    ) -> torch.Tensor:
        cfg = self.config
        if not 0 <= scale_index < cfg.num_scales:
            raise ValueError(f"scale index {scale_index} out of range")
        h, w = cfg.scale_sizes[scale_index]
        if x.shape[1:] != (cfg.channels, h, w):
            raise ShapeError(
                f"state shape {tuple(x.shape[1:])} != scale {scale_index} "
                f"shape ({cfg.channels}, {h}, {w})"
            )
        if torch.any(t < 0) or torch.any(t > 1):
            raise ValueError("t must lie in [0, 1]")
        if (prior is None) != (scale_index == 0):
            raise ValueError("prior must be absent exactly at scale 0")
        if prior is not None and prior.shape != x.shape:
            raise ShapeError(f"prior shape {tuple(prior.shape)} != state {tuple(x.shape)}")
        self.eval_count += 1

        if prior is None:
            prior = torch.zeros_like(x)
        inp = torch.cat([x, prior], dim=1)
        p = cfg.patch_sizes[scale_index]
        tokens = self.patch_embed[str(p)](self._patchify(inp, p))
        tokens = tokens + self.pos_embed[str(scale_index)]

        scale_ids = torch.full_like(class_ids, scale_index)
        cond = (
            self.time_embed(t)
            + self.class_embed(class_ids)
            + self.segment_embed(scale_ids)
        )
        for block in self.blocks:
            tokens = block(tokens, cond)
        shift, scale = self.final_modulation(cond).chunk(2, dim=-1)
        tokens = self.unembed[str(p)](_modulate(self.final_norm(tokens), shift, scale))
        return self._unpatchify(tokens, p, h, w)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def init_params(config: VelocityConfig, seed: int) -> VelocityField:
    """Build a field with scaled-normal init; reproducible per (config, seed).

    All embedding and linear weights are drawn at std 0.02; biases and the
    final unembed layers are zeroed so the initial velocity is identically
    zero.
    """
    field = VelocityField(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in field.named_parameters():
            if name.startswith("unembed.") or "bias" in name:
                param.zero_()
            else:
                param.normal_(0.0, INIT_STD, generator=gen)
    return field


def _to_tensor(grid: LatentGrid, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(grid.data.transpose(2, 0, 1))).to(dtype)


def _to_grid(x: torch.Tensor) -> LatentGrid:
    return LatentGrid(x.detach().to(torch.float32).numpy().transpose(1, 2, 0))


def forward(params: VelocityField, z_t: LatentGrid, cond: ConditionBundle) -> LatentGrid:
    """Single-grid conditional evaluation of the field."""
    if not 0.0 <= cond.t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {cond.t}")
    dtype = params.dtype
    x = _to_tensor(z_t, dtype)[None]
    t = torch.tensor([cond.t], dtype=dtype)
    c = torch.tensor([cond.class_id], dtype=torch.long)
    prior = None if cond.prior is None else _to_tensor(cond.prior, dtype)[None]
    with torch.no_grad():
        out = params(x, t, c, cond.scale_index, prior)
    return _to_grid(out[0])


def guided_velocity(
    params: VelocityField,
    x: torch.Tensor,
    t: torch.Tensor,
    class_ids: torch.Tensor,
    scale_index: int,
    prior: torch.Tensor | None,
    guidance: float,
) -> torch.Tensor:
    """Batched classifier-free-guided velocity v_u + g * (v_c - v_u).

    With guidance 1.0 the unconditional pass is skipped entirely: a single
    conditional evaluation is performed and returned as-is.
    """
    if guidance < 1.0:
        raise ValueError(f"guidance must be >= 1, got {guidance}")
    null = params.config.null_class
    if torch.any(class_ids == null):
        raise ValueError("guided evaluation requires a non-null class")
    v_c = params(x, t, class_ids, scale_index, prior)
    if guidance == 1.0:
        return v_c
    v_u = params(x, t, torch.full_like(class_ids, null), scale_index, prior)
    mixed = v_u.double() + guidance * (v_c.double() - v_u.double())
    return mixed.to(x.dtype)


def forward_cfg(
    params: VelocityField, z_t: LatentGrid, cond: ConditionBundle, guidance: float
) -> LatentGrid:
    """Single-grid classifier-free-guided evaluation."""
    if not 0.0 <= cond.t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {cond.t}")
    dtype = params.dtype
    x = _to_tensor(z_t, dtype)[None]
    t = torch.tensor([cond.t], dtype=dtype)
    c = torch.tensor([cond.class_id], dtype=torch.long)
    prior = None if cond.prior is None else _to_tensor(cond.prior, dtype)[None]
    with torch.no_grad():
        out = guided_velocity(params, x, t, c, cond.scale_index, prior, guidance)
    return _to_grid(out[0])


def save_checkpoint(path, params: VelocityField) -> None:
    """Write an MSFC v1 checkpoint: config block plus named-tensor manifest."""
    cfg = params.config
    with open(path, "wb") as f:
        f.write(MSFC_MAGIC)
        f.write(
            struct.pack(
                "<IIIIIIII",
                MSFC_VERSION,
                cfg.channels,
                cfg.hidden_width,
                cfg.depth,
                cfg.heads,
                cfg.num_classes,
                cfg.num_scales,
                1 if cfg.has_null_class else 0,
            )
        )
        for (h, w), p in zip(cfg.scale_sizes, cfg.patch_sizes):
            f.write(struct.pack("<III", h, w, p))
        state = params.state_dict()
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            raw = name.encode("utf-8")
            arr = tensor.detach().to(torch.float32).numpy()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path, expected_config: VelocityConfig | None = None) -> VelocityField:
    """Read an MSFC v1 checkpoint, validating config compatibility."""
    with open(path, "rb") as f:
        payload = f.read()
    off = 0

    def take(n):
        nonlocal off
        if len(payload) < off + n:
            raise ValueError(f"truncated checkpoint {path}")
        chunk = payload[off : off + n]
        off += n
        return chunk

    if take(4) != MSFC_MAGIC:
        raise ValueError(f"not an MSFC checkpoint: {path}")
    version, channels, width, depth, heads, num_classes, num_scales, has_null = (
        struct.unpack("<IIIIIIII", take(32))
    )
    if version != MSFC_VERSION:
        raise ValueError(f"unsupported MSFC version {version}")
    sizes, patches = [], []
    for _ in range(num_scales):
        h, w, p = struct.unpack("<III", take(12))
        sizes.append((h, w))
        patches.append(p)
    config = VelocityConfig(
        channels=channels,
        scale_sizes=tuple(sizes),
        patch_sizes=tuple(patches),
        hidden_width=width,
        depth=depth,
        heads=heads,
        num_classes=num_classes,
        has_null_class=bool(has_null),
    )
    if expected_config is not None and config != expected_config:
        raise ConfigError(
            f"checkpoint config {config} does not match expected {expected_config}"
        )
    field = VelocityField(config)
    state = {}
    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        state[name] = torch.from_numpy(data.copy())
    if off != len(payload):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    try:
        field.load_state_dict(state)
    except RuntimeError as e:
        raise ConfigError(f"checkpoint tensors incompatible with config: {e}") from e
    return field
