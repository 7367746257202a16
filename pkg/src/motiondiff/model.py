"""Epsilon-prediction network: DiffWave-style residual stack with Conformer/Transformer sub-stacks.

Each residual block adds a projected diffusion-step embedding to its input, runs
``layers_per_block`` pre-norm attention layers whose feedforward is a gated (dilated)
convolution, mixes in the conditioning through a tanh/sigmoid gate and splits into a
residual path and a skip path. Position only enters through learned per-head biases on
the signed frame offset, so nothing in the network is tied to absolute time.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ContractError, EvaluationFault


@dataclass
class DenoiserConfig:
    input_dim: int
    cond_dim: int
    n_blocks: int = 10
    layers_per_block: int = 4
    dilation_cycle: int = 3
    n_heads: int = 8
    attention_width: int = 256
    feedforward_width: int = 1024
    step_embed_dim: int = 128
    step_hidden: int = 512
    max_relative_distance: int = 64
    # None = every frame attends to every other frame
    attention_window: int | None = None
    padding: str = "zeros"

    def __post_init__(self):
        for name in ("input_dim", "cond_dim", "n_blocks", "layers_per_block", "dilation_cycle",
                     "n_heads", "attention_width", "feedforward_width", "step_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.attention_width % self.n_heads:
            raise ConfigurationError("attention_width must be divisible by n_heads")
        if self.step_embed_dim < 2 or self.step_embed_dim % 2:
            raise ConfigurationError("step_embed_dim must be a positive even number")
        if self.max_relative_distance < 0:
            raise ConfigurationError("max_relative_distance must be >= 0")
        if self.attention_window is not None and self.attention_window < 0:
            raise ConfigurationError("attention_window must be >= 0")
        if self.padding not in ("zeros", "circular"):
            raise ConfigurationError(f"padding must be 'zeros' or 'circular', got {self.padding!r}")

    def dilation(self, block: int) -> float:
        return 2.0 ** ((block % self.dilation_cycle) - 1)

    def kernel_and_dilation(self, block: int) -> tuple[int, int]:
        """(kernel, dilation) for a block; dilation below one means a Transformer (kernel 1)."""
        d = self.dilation(block)
        if d < 1:
            return 1, 1
        return 3, int(d)

    def receptive_radius(self) -> int | None:
        """Frames of context on each side that can reach an output frame, or None if unbounded."""
        if self.attention_window is None:
            return None
        radius = 0
        for block in range(self.n_blocks):
            kernel, dil = self.kernel_and_dilation(block)
            radius += self.layers_per_block * (self.attention_window + (kernel - 1) // 2 * dil)
        return radius

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**d)


def step_embedding(n, dim: int) -> torch.Tensor:
    """Interleaved ``sin(n w_i), cos(n w_i)`` with ``1/w_i`` geometric from 1 to 1e4.

    ``n`` may be an int (returns ``(dim,)``) or a tensor of steps (returns ``(..., dim)``).
    """
    if dim < 2 or dim % 2:
        raise ConfigurationError(f"step embedding dim must be even, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = 10_000.0 ** (-torch.arange(half, dtype=torch.float64) / (half - 1))
    steps = torch.as_tensor(n, dtype=torch.float64)
    angles = steps[..., None] * freqs
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return out.reshape(angles.shape[:-1] + (dim,))


def relative_offsets(length: int, circular: bool) -> torch.Tensor:
    """``offsets[q, k] = k - q``; in circular mode wrapped into ``[-(T//2), (T-1)//2]``."""
    pos = torch.arange(length)
    off = pos[None, :] - pos[:, None]
    if circular:
        off = torch.remainder(off + length // 2, length) - length // 2
    return off


class TisaBias(nn.Module):
    """Learned per-head attention-logit bias indexed by clamped signed offset (key - query)."""

    def __init__(self, n_heads: int, max_distance: int):
        super().__init__()
        self.max_distance = max_distance
        self.bias = nn.Parameter(torch.zeros(n_heads, 2 * max_distance + 1))

    def lookup(self, offsets: torch.Tensor) -> torch.Tensor:
        idx = offsets.clamp(-self.max_distance, self.max_distance) + self.max_distance
        return self.bias[:, idx]

    def value(self, t_query: int, t_key: int, head: int) -> float:
        return float(self.lookup(torch.tensor(t_key - t_query))[head].detach())

    def forward(self, length: int, circular: bool = False) -> torch.Tensor:
        return self.lookup(relative_offsets(length, circular))


class ConformerLayer(nn.Module):
    """Pre-norm self-attention + gated convolutional feedforward, both residual."""

    def __init__(self, cfg: DenoiserConfig, kernel: int, dilation: int):
        super().__init__()
        width, ff = cfg.attention_width, cfg.feedforward_width
        self.n_heads = cfg.n_heads
        self.kernel, self.dilation = kernel, dilation
        self.window = cfg.attention_window
        self.circular = cfg.padding == "circular"
        self.attn_norm = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.attn_out = nn.Linear(width, width)
        self.tisa = TisaBias(cfg.n_heads, cfg.max_relative_distance)
        self.ff_norm = nn.LayerNorm(width)
        self.ff_in = nn.Conv1d(width, 2 * ff, kernel, dilation=dilation)
        self.ff_out = nn.Linear(ff, width)

    def attention(self, h: torch.Tensor) -> torch.Tensor:
        batch, length, width = h.shape
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        head_dim = width // self.n_heads

        def heads(t):
            return t.reshape(batch, length, self.n_heads, head_dim).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        logits = q @ k.transpose(-1, -2) / math.sqrt(head_dim)
        logits = logits + self.tisa(length, self.circular).to(logits.dtype)
        if self.window is not None:
            far = relative_offsets(length, self.circular).abs() > self.window
            logits = logits.masked_fill(far, float("-inf"))
        out = torch.softmax(logits, dim=-1) @ v
        return self.attn_out(out.transpose(1, 2).reshape(batch, length, width))

    def feedforward(self, h: torch.Tensor) -> torch.Tensor:
        pad = (self.kernel - 1) // 2 * self.dilation
        y = h.transpose(1, 2)
        if pad:
            y = F.pad(y, (pad, pad), mode="circular" if self.circular else "constant")
        a, b = self.ff_in(y).chunk(2, dim=1)
        return self.ff_out((F.gelu(a) * b).transpose(1, 2))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = h + self.attention(self.attn_norm(h))
        return h + self.feedforward(self.ff_norm(h))


class ResidualBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig, index: int):
        super().__init__()
        width = cfg.attention_width
        self.index = index
        self.kernel, self.dilation = cfg.kernel_and_dilation(index)
        self.step_proj = nn.Linear(cfg.step_hidden, width)
        self.layers = nn.ModuleList(ConformerLayer(cfg, self.kernel, self.dilation) for _ in range(cfg.layers_per_block))
        self.mid_proj = nn.Linear(width, 2 * width)
        self.cond_proj = nn.Linear(cfg.cond_dim, 2 * width)
        self.out_proj = nn.Linear(width, 2 * width)

    @property
    def mode(self) -> str:
        return "transformer" if self.kernel == 1 else "conformer"

    def gated(self, h: torch.Tensor, cond: torch.Tensor, step: torch.Tensor) -> torch.Tensor:
        y = h + self.step_proj(step)[:, None, :]
        for i, layer in enumerate(self.layers):
            y = layer(y)
            if not torch.isfinite(y).all():
                raise EvaluationFault(f"non-finite activations in blocks.{self.index}.layers.{i}")
        filt, gate = (self.mid_proj(y) + self.cond_proj(cond)).chunk(2, dim=-1)
        return torch.tanh(filt) * torch.sigmoid(gate)

    def forward(self, h, cond, step):
        residual, skip = self.out_proj(self.gated(h, cond, step)).chunk(2, dim=-1)
        return (h + residual) / math.sqrt(2.0), skip


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        width = cfg.attention_width
        self.input_proj = nn.Linear(cfg.input_dim, width)
        self.step_mlp = nn.Sequential(
            nn.Linear(cfg.step_embed_dim, cfg.step_hidden),
            nn.SiLU(),
            nn.Linear(cfg.step_hidden, cfg.step_hidden),
            nn.SiLU(),
        )
        self.blocks = nn.ModuleList(ResidualBlock(cfg, i) for i in range(cfg.n_blocks))
        self.skip_proj = nn.Linear(width, width)
        self.output_proj = nn.Linear(width, cfg.input_dim)
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, n) -> torch.Tensor:
        """``x``: (B, T, D) or (T, D); ``cond``: matching (.., T, C); ``n``: int or (B,) steps."""
        unbatched = x.dim() == 2
        if unbatched:
            x, cond = x[None], cond[None]
        if x.shape[-1] != self.cfg.input_dim or cond.shape[-1] != self.cfg.cond_dim:
            raise ConfigurationError(
                f"input widths ({x.shape[-1]}, {cond.shape[-1]}) do not match config "
                f"(input_dim={self.cfg.input_dim}, cond_dim={self.cfg.cond_dim})"
            )
        if x.shape[:2] != cond.shape[:2]:
            raise ContractError(f"cond frames {tuple(cond.shape[:2])} != pose frames {tuple(x.shape[:2])}")
        n = torch.as_tensor(n).reshape(-1).expand(x.shape[0])
        step = self.step_mlp(step_embedding(n, self.cfg.step_embed_dim).to(x.dtype))
        h = self.input_proj(x)
        skips = 0
        for block in self.blocks:
            h, skip = block(h, cond, step)
            skips = skips + skip
        out = self.output_proj(F.gelu(self.skip_proj(skips / math.sqrt(len(self.blocks)))))
        return out[0] if unbatched else out


def parameter_count(cfg: DenoiserConfig) -> int:
    return sum(p.numel() for p in Denoiser(cfg).parameters())
