"""Text side: a frozen seeded token embedder and the two projection heads
that map its pooled embedding onto the frozen visual anatomy/style codes.

``L_text = lambda_a * D(f_a^T, f_a^I) + lambda_s * D(f_s^T, mu^I) + L_rec^T``
with ``D`` the cosine distance and ``L_rec^T`` the MSE of the auxiliary
decoder against the pooled base embedding.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .nncore import AdamW, LrSchedule, init_module, lr_at, np_stream, stream
from .synthdata import PAD_ID, VOCAB, TokenizedCaption, tokenize


@dataclass
class TextdisConfig:
    text_dim: int = 64
    hidden_dim: int = 128
    anatomy_dim: int = 32
    style_dim: int = 16
    dropout: float = 0.1
    lambda_a: float = 1.0
    lambda_s: float = 1.0
    embedder_seed: int = 1234
    caption_len: int = 32
    epochs: int = 80
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 100


@dataclass
class BaseTextEmbedding:
    per_token: torch.Tensor  # [B, L, Dt]
    pooled: torch.Tensor  # [B, Dt]


@dataclass
class DisentangledText:
    f_a: torch.Tensor  # [B, Da]
    f_s: torch.Tensor  # [B, Ds]


class FrozenTextEmbedder(nn.Module):
    """Fixed random token table plus a small fixed positional table.

    Both are buffers drawn once from ``seed``; nothing here is trainable.
    """

    def __init__(self, vocab_size: int = len(VOCAB), dim: int = 64, length: int = 32, seed: int = 1234):
        super().__init__()
        g = stream(seed, "textdis.embedder")
        self.seed = seed
        self.register_buffer("table", torch.randn(vocab_size, dim, generator=g))
        self.register_buffer("positional", 0.1 * torch.randn(length, dim, generator=g))

    def forward(self, token_ids: torch.Tensor) -> BaseTextEmbedding:
        keep = (token_ids != PAD_ID).unsqueeze(-1).to(self.table.dtype)
        per_token = (self.table[token_ids] + self.positional[: token_ids.shape[1]]) * keep
        count = keep.sum(dim=1)
        pooled = per_token.sum(dim=1) / count.clamp(min=1.0)
        return BaseTextEmbedding(per_token, pooled)


def token_tensor(captions: Sequence[str | TokenizedCaption], length: int = 32) -> torch.Tensor:
    rows = [c.token_ids if isinstance(c, TokenizedCaption) else tokenize(c, length).token_ids for c in captions]
    return torch.tensor(rows, dtype=torch.long)


@torch.no_grad()
def embed_text(embedder: FrozenTextEmbedder, captions: Sequence[str | TokenizedCaption]) -> BaseTextEmbedding:
    return embedder(token_tensor(captions, embedder.positional.shape[0]))


def _mlp(din: int, dh: int, dout: int, dropout: float) -> nn.Sequential:
    return nn.Sequential(nn.Linear(din, dh), nn.ReLU(), nn.Dropout(dropout), nn.Linear(dh, dout))


class TextHeads(nn.Module):
    def __init__(self, cfg: TextdisConfig = TextdisConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.anatomy = _mlp(cfg.text_dim, cfg.hidden_dim, cfg.anatomy_dim, cfg.dropout)
        self.style = _mlp(cfg.text_dim, cfg.hidden_dim, cfg.style_dim, cfg.dropout)
        self.decoder = nn.Sequential(
            nn.Linear(cfg.anatomy_dim + cfg.style_dim, cfg.hidden_dim), nn.ReLU(),
            nn.Linear(cfg.hidden_dim, cfg.text_dim),
        )
        init_module(self, seed, "textdis.heads")

    def forward(self, pooled: torch.Tensor) -> DisentangledText:
        return DisentangledText(self.anatomy(pooled), self.style(pooled))

    def reconstruct(self, dt: DisentangledText) -> torch.Tensor:
        return self.decoder(torch.cat([dt.f_a, dt.f_s], dim=-1))


def disentangle_text(heads: TextHeads, e: BaseTextEmbedding) -> DisentangledText:
    return heads(e.pooled)


def cosine_distance(u: torch.Tensor, v: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """``1 - u.v / (|u| |v|)`` over the last axis, in [0, 2].

    A pair containing a zero vector has distance exactly 1; see
    :func:`degenerate_pairs`.
    """
    num = (u * v).sum(dim=-1)
    den = (u.norm(dim=-1) * v.norm(dim=-1)).clamp(min=eps)
    return 1.0 - num / den


def degenerate_pairs(u: torch.Tensor, v: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return (u.norm(dim=-1) * v.norm(dim=-1)) < eps


def loss_text(heads: TextHeads, pooled: torch.Tensor, fa_target: torch.Tensor, mu_target: torch.Tensor,
              lambda_a: float | None = None, lambda_s: float | None = None) -> tuple[torch.Tensor, dict]:
    """Alignment + auxiliary reconstruction loss for one batch.

    ``fa_target`` is the pooled visual anatomy feature, ``mu_target`` the
    visual style mean; both come from the frozen visual encoders.
    """
    lambda_a = heads.cfg.lambda_a if lambda_a is None else lambda_a
    lambda_s = heads.cfg.lambda_s if lambda_s is None else lambda_s
    dt = heads(pooled)
    d_a = cosine_distance(dt.f_a, fa_target).mean()
    d_s = cosine_distance(dt.f_s, mu_target).mean()
    rec = F.mse_loss(heads.reconstruct(dt), pooled)
    total = lambda_a * d_a + lambda_s * d_s + rec
    parts = {k: float(v.detach()) for k, v in (("anatomy", d_a), ("style", d_s), ("rec", rec), ("total", total))}
    return total, parts


def train_text(heads: TextHeads, pooled: np.ndarray, fa_target: np.ndarray, mu_target: np.ndarray,
               seed: int = 0, epochs: int | None = None, max_steps: int | None = None, log=None) -> list[dict]:
    """Stage-2 training of the heads only; inputs are precomputed frozen features."""
    cfg = heads.cfg
    epochs = cfg.epochs if epochs is None else epochs
    p_all, a_all, s_all = (torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
                           for a in (pooled, fa_target, mu_target))
    n = len(p_all)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total = epochs * steps_per_epoch if max_steps is None else max_steps
    sched = LrSchedule(min(cfg.warmup_steps, total), total, cfg.lr, 0.0)
    opt = AdamW(((k, p) for k, p in heads.named_parameters() if p.requires_grad), lr=cfg.lr, weight_decay=0.0)
    order_rng = np_stream(seed, "textdis.order")
    torch_gen_state = torch.random.get_rng_state()
    torch.manual_seed(int(order_rng.integers(2**31)))  # dropout masks
    heads.train()
    history, step = [], 0
    try:
        while step < total:
            t0 = time.time()
            perm = order_rng.permutation(n)
            sums: dict[str, float] = {}
            count = 0
            for b in range(steps_per_epoch):
                if step >= total:
                    break
                idx = torch.from_numpy(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
                loss, parts = loss_text(heads, p_all[idx], a_all[idx], s_all[idx])
                opt.zero_grad()
                loss.backward()
                step += 1
                opt.step(lr_at(sched, step))
                count += 1
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
            row = {"epoch": len(history), **{k: v / count for k, v in sums.items()}, "seconds": time.time() - t0}
            history.append(row)
            if log:
                log(row)
    finally:
        torch.random.set_rng_state(torch_gen_state)
    heads.eval()
    return history


def alignment_margin(text: np.ndarray, image: np.ndarray, seed: int = 0) -> dict:
    """Mean matched vs. mismatched text-image cosine distance.

    Each text row is mismatched with a uniformly drawn different image row.
    """
    t = torch.from_numpy(np.asarray(text, dtype=np.float64))
    v = torch.from_numpy(np.asarray(image, dtype=np.float64))
    n = len(t)
    rng = np.random.default_rng(seed)
    perm = (np.arange(n) + rng.integers(1, n, size=n)) % n  # never the row itself
    matched = float(cosine_distance(t, v).mean())
    mismatched = float(cosine_distance(t, v[perm]).mean())
    return {"matched": matched, "mismatched": mismatched, "margin": mismatched - matched}
