"""Small Diffusion Transformer with cross-attention conditioning and LoRA
adapters on every attention projection.

Pixel-space, epsilon-predicting. Condition tokens carry no positional
encoding and are read only by cross-attention.
"""
from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, RangeError
from .hffm import ConditionEmbedding
from .nncore import attention, init_module, linear_forward, stream

LORA_TARGETS = ("q", "k", "v", "out")


@dataclass
class DiTConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    hidden_dim: int = 64
    depth: int = 4
    heads: int = 4
    cond_dim: int = 64
    mlp_ratio: int = 4
    num_timesteps: int = 200
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")


def lora_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None,
                 lora_a: torch.Tensor, lora_b: torch.Tensor, alpha: float) -> torch.Tensor:
    """``W x + b + (alpha / r) B (A x)``."""
    r = lora_a.shape[0]
    if r <= 0:
        raise ConfigError(f"LoRA rank must be positive, got {r}")
    if lora_a.shape[1] != weight.shape[1] or lora_b.shape != (weight.shape[0], r):
        raise DimensionError(
            f"LoRA factors A {tuple(lora_a.shape)}, B {tuple(lora_b.shape)} do not fit W {tuple(weight.shape)}"
        )
    return linear_forward(x, weight, bias) + (alpha / r) * F.linear(F.linear(x, lora_a), lora_b)


class LoraLinear(nn.Module):
    """Linear layer whose base weight can be frozen behind a low-rank delta."""

    def __init__(self, din: int, dout: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(dout, din))
        self.bias = nn.Parameter(torch.zeros(dout))
        self.lora_a: nn.Parameter | None = None
        self.lora_b: nn.Parameter | None = None
        self.alpha = 0.0
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def add_adapter(self, rank: int, alpha: float, generator: torch.Generator | None = None) -> None:
        if rank <= 0:
            raise ConfigError(f"LoRA rank must be positive, got {rank}")
        din = self.weight.shape[1]
        self.lora_a = nn.Parameter(torch.empty(rank, din, dtype=self.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5), generator=generator)
        self.lora_b = nn.Parameter(torch.zeros(self.weight.shape[0], rank, dtype=self.weight.dtype))
        self.alpha = float(alpha)
        self.weight.requires_grad_(False)
        self.bias.requires_grad_(False)

    @property
    def has_adapter(self) -> bool:
        return self.lora_a is not None

    def merged_weight(self) -> torch.Tensor:
        if not self.has_adapter:
            return self.weight.detach().clone()
        r = self.lora_a.shape[0]
        return (self.weight + (self.alpha / r) * self.lora_b @ self.lora_a).detach()

    def merge(self) -> None:
        if not self.has_adapter:
            return
        with torch.no_grad():
            self.weight.copy_(self.merged_weight())
        self.lora_a = None
        self.lora_b = None
        self.alpha = 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.has_adapter:
            return lora_forward(x, self.weight, self.bias, self.lora_a, self.lora_b, self.alpha)
        return linear_forward(x, self.weight, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.q = LoraLinear(dim, dim)
        self.k = LoraLinear(kv_dim, dim)
        self.v = LoraLinear(kv_dim, dim)
        self.out = LoraLinear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        b, n, d = x.shape
        h = self.heads

        def split(t):
            return t.view(b, t.shape[1], h, d // h).transpose(1, 2)

        y = attention(split(self.q(x)), split(self.k(context)), split(self.v(context)))
        return self.out(y.transpose(1, 2).reshape(b, n, d))


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    """adaLN-Zero self-attention and MLP, plus an ungated cross-attention."""

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.self_attn = MultiHeadAttention(d, cfg.heads)
        self.norm2 = nn.LayerNorm(d, eps=1e-6)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, kv_dim=cfg.cond_dim)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(approximate="tanh"),
                                 nn.Linear(cfg.mlp_ratio * d, d))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))

    def forward(self, x: torch.Tensor, c: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.self_attn(modulate(self.norm1(x), sh1, sc1))
        x = x + self.cross_attn(self.norm2(x), cond)
        x = x + g2.unsqueeze(1) * self.mlp(modulate(self.norm3(x), sh2, sc2))
        return x


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def sincos_2d(dim: int, grid: int) -> torch.Tensor:
    """Fixed 2-D sine-cosine position table ``[grid*grid, dim]``."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    parts = []
    for pos in (ys.reshape(-1), xs.reshape(-1)):
        out = pos[:, None] * omega[None]
        parts += [np.sin(out), np.cos(out)]
    table = np.concatenate(parts, axis=1)
    if table.shape[1] < dim:
        table = np.pad(table, ((0, 0), (0, dim - table.shape[1])))
    return torch.from_numpy(table).float()


class DiT(nn.Module):
    def __init__(self, cfg: DiTConfig = DiTConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        p, c, d = cfg.patch_size, cfg.in_channels, cfg.hidden_dim
        self.grid = cfg.image_size // p
        self.patch_embed = nn.Linear(c * p * p, d)
        self.register_buffer("pos", sincos_2d(d, self.grid), persistent=False)
        self.t_embed = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.final = nn.Linear(d, c * p * p)
        init_module(self, seed, "dit")
        g = stream(seed, "dit.attn")
        for m in self.modules():
            if isinstance(m, LoraLinear):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=g)
                nn.init.zeros_(m.bias)
        for blk in self.blocks:
            nn.init.zeros_(blk.ada[-1].weight)
            nn.init.zeros_(blk.ada[-1].bias)
        for lin in (self.final_ada[-1], self.final):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        if cfg.lora:
            self.add_lora(cfg.lora_rank, cfg.lora_alpha, seed)

    def add_lora(self, rank: int, alpha: float, seed: int = 0) -> None:
        g = stream(seed, "dit.lora")
        for m in self.lora_layers():
            m.add_adapter(rank, alpha, generator=g)
        self.cfg = dataclasses.replace(self.cfg, lora=True, lora_rank=rank, lora_alpha=float(alpha))

    def freeze_base_and_adapt(self, seed: int = 0) -> "DiT":
        """Freeze every existing parameter, then attach fresh adapters.

        Afterwards only ``lora_a`` / ``lora_b`` require gradients.
        """
        for p in self.parameters():
            p.requires_grad_(False)
        self.add_lora(self.cfg.lora_rank, self.cfg.lora_alpha, seed)
        return self

    def lora_layers(self) -> list[LoraLinear]:
        return [m for m in self.modules() if isinstance(m, LoraLinear)]

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        p = self.cfg.patch_size
        x = x.view(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b = tokens.shape[0]
        p, c, g = self.cfg.patch_size, self.cfg.in_channels, self.grid
        x = tokens.view(b, g, g, c, p, p).permute(0, 3, 1, 4, 2, 5)
        return x.reshape(b, c, g * p, g * p)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: ConditionEmbedding | torch.Tensor | None) -> torch.Tensor:
        """Predicted noise. ``cond=None`` means a single all-zero context
        token, which is how the unconditional base model is trained."""
        cfg = self.cfg
        if x_t.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise DimensionError(f"DiT expects [B,{cfg.in_channels},{cfg.image_size},{cfg.image_size}], got {tuple(x_t.shape)}")
        if (t < 0).any() or (t >= cfg.num_timesteps).any():
            raise RangeError(f"timesteps must lie in [0, {cfg.num_timesteps}), got {t.tolist()}")
        if cond is None:
            tokens = x_t.new_zeros(x_t.shape[0], 1, cfg.cond_dim)
        else:
            tokens = cond.tokens if isinstance(cond, ConditionEmbedding) else cond
        h = self.patch_embed(self.patchify(x_t)) + self.pos.to(x_t.dtype)
        c = self.t_embed(timestep_embedding(t, cfg.hidden_dim).to(x_t.dtype))
        for blk in self.blocks:
            h = blk(h, c, tokens)
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        return self.unpatchify(self.final(modulate(self.final_norm(h), shift, scale)))

    def base_attention_parameters(self) -> dict[str, torch.Tensor]:
        """Frozen base weights of every LoRA-wrapped projection."""
        return {n: p for n, p in self.named_parameters()
                if n.rsplit(".", 1)[-1] in ("weight", "bias") and n.rsplit(".", 2)[-2] in LORA_TARGETS
                and "attn" in n}


def dit_forward(model: DiT, x_t: torch.Tensor, t: torch.Tensor, cond) -> torch.Tensor:
    return model(x_t, t, cond)


def merge_lora(model: DiT) -> DiT:
    """Copy of ``model`` with every adapter folded into its base weight."""
    merged = copy.deepcopy(model)
    for m in merged.lora_layers():
        m.merge()
    merged.cfg = dataclasses.replace(merged.cfg, lora=False)
    return merged


def adapter_parameters(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in model.named_parameters() if ".lora_" in n}


def base_parameters(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in model.named_parameters() if ".lora_" not in n}
