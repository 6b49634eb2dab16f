"""Hybrid feature fusion: turns disentangled text codes into the condition
token sequence consumed by the DiT cross-attention.

Modes
-----
disentangled
    ``concat(P_a(f_a) + e_a, P_s(f_s) + e_s)``, anatomy tokens first.
naive_concat
    a single linear map of the pooled base text embedding, reshaped to the
    same token count; no branch structure, no type embeddings.
class_label_only
    a learned token block per class label.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError
from .nncore import init_module, stream
from .textdis import DisentangledText

MODES = ("disentangled", "naive_concat", "class_label_only")


@dataclass
class HffmConfig:
    la: int = 4
    ls: int = 4
    dc: int = 64
    mode: str = "disentangled"
    anatomy_dim: int = 32
    style_dim: int = 16
    text_dim: int = 64
    n_classes: int = 3


@dataclass
class ConditionEmbedding:
    tokens: torch.Tensor  # [B, La+Ls, Dc]
    la: int
    ls: int

    @property
    def anatomy(self) -> torch.Tensor:
        return self.tokens[:, : self.la]

    @property
    def style(self) -> torch.Tensor:
        return self.tokens[:, self.la :]


class HFFM(nn.Module):
    def __init__(self, cfg: HffmConfig = HffmConfig(), seed: int = 0):
        super().__init__()
        if cfg.mode not in MODES:
            raise ConfigError(f"hffm.mode must be one of {MODES}, got {cfg.mode!r}")
        self.cfg = cfg
        n_tok = cfg.la + cfg.ls
        if cfg.mode == "disentangled":
            self.proj_a = nn.Linear(cfg.anatomy_dim, cfg.la * cfg.dc)
            self.proj_s = nn.Linear(cfg.style_dim, cfg.ls * cfg.dc)
            self.e_a = nn.Parameter(torch.empty(cfg.dc))
            self.e_s = nn.Parameter(torch.empty(cfg.dc))
        elif cfg.mode == "naive_concat":
            self.proj = nn.Linear(cfg.text_dim, n_tok * cfg.dc)
        else:
            self.classes = nn.Embedding(cfg.n_classes, n_tok * cfg.dc)
        self.null_tokens = nn.Parameter(torch.empty(n_tok, cfg.dc))
        init_module(self, seed, "hffm")
        g = stream(seed, "hffm.embeddings")
        with torch.no_grad():
            for p in (getattr(self, "e_a", None), getattr(self, "e_s", None), self.null_tokens):
                if p is not None:
                    p.normal_(0.0, 0.02, generator=g)

    def build_condition(self, dt: DisentangledText) -> ConditionEmbedding:
        cfg = self.cfg
        b = dt.f_a.shape[0]
        a = self.proj_a(dt.f_a).view(b, cfg.la, cfg.dc) + self.e_a
        s = self.proj_s(dt.f_s).view(b, cfg.ls, cfg.dc) + self.e_s
        return ConditionEmbedding(torch.cat([a, s], dim=1), cfg.la, cfg.ls)

    def naive_condition(self, pooled: torch.Tensor) -> ConditionEmbedding:
        cfg = self.cfg
        return ConditionEmbedding(self.proj(pooled).view(-1, cfg.la + cfg.ls, cfg.dc), cfg.la, cfg.ls)

    def class_condition(self, labels: torch.Tensor) -> ConditionEmbedding:
        cfg = self.cfg
        return ConditionEmbedding(self.classes(labels).view(-1, cfg.la + cfg.ls, cfg.dc), cfg.la, cfg.ls)

    def null_condition(self, batch: int) -> ConditionEmbedding:
        tokens = self.null_tokens.unsqueeze(0).expand(batch, -1, -1)
        return ConditionEmbedding(tokens, self.cfg.la, self.cfg.ls)

    def forward(self, dt: DisentangledText | None = None, pooled: torch.Tensor | None = None,
                labels: torch.Tensor | None = None) -> ConditionEmbedding:
        """Dispatch on the configured mode; each mode reads only its own input."""
        if self.cfg.mode == "disentangled":
            return self.build_condition(dt)
        if self.cfg.mode == "naive_concat":
            return self.naive_condition(pooled)
        return self.class_condition(labels)
