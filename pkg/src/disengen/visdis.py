"""Dual-branch visual disentangler.

A U-Net anatomy encoder supervised by a Dice segmentation head, a
variational style encoder over ``concat(x, upsampled anatomy map)`` and an
image decoder from both codes. Trained by
``L_img = L_rec + lambda_dice * L_dice + lambda_kl * L_kl``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .nncore import AdamW, LrSchedule, init_module, lr_at, np_stream, stream

LOGVAR_CLAMP = 10.0


@dataclass
class VisdisConfig:
    channels: int = 3
    image_size: int = 32
    base_width: int = 16
    depth: int = 3
    anatomy_dim: int = 32
    style_dim: int = 16
    lambda_dice: float = 1.0
    lambda_kl: float = 1e-5
    detach_anatomy: bool = True
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 50


@dataclass
class AnatomyFeature:
    map: torch.Tensor  # [B, Da, Ha, Wa]
    pooled: torch.Tensor  # [B, Da]


@dataclass
class StyleLatent:
    mu: torch.Tensor
    logvar: torch.Tensor
    sample: torch.Tensor
    eps: torch.Tensor


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
    )


def standardized_luminance(x: torch.Tensor) -> torch.Tensor:
    lum = x.mean(dim=1, keepdim=True)
    mean = lum.mean(dim=(2, 3), keepdim=True)
    std = lum.std(dim=(2, 3), keepdim=True)
    return (lum - mean) / (std + 1e-3)


class AnatomyEncoder(nn.Module):
    """U-Net over the standardized luminance of the image.

    The anatomy map is taken one resolution below the input: a 1x1
    projection of the decoder features concatenated with the encoder skip at
    that resolution, then a non-affine batch norm (which centres pooled
    features across the data set).
    """

    def __init__(self, cfg: VisdisConfig):
        super().__init__()
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        self.depth = cfg.depth
        self.down = nn.ModuleList()
        cin = 1
        for w in widths:
            self.down.append(_block(cin, w))
            cin = w
        self.bottleneck = _block(widths[-1], widths[-1])
        self.up = nn.ModuleList()
        cin = widths[-1]
        for w in reversed(widths[1:]):
            self.up.append(_block(cin + w, w))
            cin = w
        proj_in = 2 * widths[1] if cfg.depth > 1 else widths[0]
        self.proj = nn.Sequential(nn.Conv2d(proj_in, cfg.anatomy_dim, 1), nn.ReLU())
        self.norm = nn.BatchNorm2d(cfg.anatomy_dim, affine=False)
        self.final = nn.Sequential(nn.Conv2d(cfg.anatomy_dim + widths[0], widths[0], 1), nn.ReLU())
        self.seg_head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x: torch.Tensor) -> tuple[AnatomyFeature, torch.Tensor]:
        h = standardized_luminance(x)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.bottleneck(h)
        for block, skip in zip(self.up, reversed(skips[1:])):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1))
        if self.depth > 1:
            # the skip keeps shape cues that the dice-trained decoder path tends to drop
            fmap = self.norm(self.proj(torch.cat([h, skips[1]], dim=1)))
            h = F.interpolate(fmap, scale_factor=2, mode="nearest")
        else:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            fmap = self.norm(self.proj(h))
            h = fmap
        h = self.final(torch.cat([h, skips[0]], dim=1))
        return AnatomyFeature(fmap, fmap.mean(dim=(2, 3))), self.seg_head(h)


class StyleEncoder(nn.Module):
    def __init__(self, cfg: VisdisConfig):
        super().__init__()
        w = cfg.base_width
        self.net = nn.Sequential(
            nn.Conv2d(cfg.channels + cfg.anatomy_dim, 2 * w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.mu = nn.Linear(4 * w + 2 * cfg.channels, cfg.style_dim)
        self.logvar = nn.Linear(4 * w + 2 * cfg.channels, cfg.style_dim)

    def forward(self, x: torch.Tensor, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        up = F.interpolate(fmap, size=x.shape[-2:], mode="bilinear", align_corners=False)
        h = self.net(torch.cat([x, up], dim=1)).mean(dim=(2, 3))
        # global colour statistics skip the conv stack
        h = torch.cat([h, x.mean(dim=(2, 3)), x.std(dim=(2, 3))], dim=1)
        return self.mu(h), self.logvar(h).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)


class ImageDecoder(nn.Module):
    """Decodes ``(anatomy map, style code)`` to an image in [0, 1].

    The style code is broadcast over the anatomy grid and two coordinate
    channels are appended. After upsampling it also modulates the features
    (scale and shift) and sets a per-channel colour offset on the logits.
    """

    def __init__(self, cfg: VisdisConfig):
        super().__init__()
        w = cfg.base_width
        self.net = nn.Sequential(
            nn.Conv2d(cfg.anatomy_dim + cfg.style_dim + 2, 2 * w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU(),
        )
        self.out = nn.Sequential(
            nn.Conv2d(2 * w, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, cfg.channels, 3, padding=1),
        )
        self.film = nn.Linear(cfg.style_dim, 4 * w)
        self.colour = nn.Linear(cfg.style_dim, cfg.channels)
        self.image_size = cfg.image_size

    def forward(self, fmap: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        b, _, h, w = fmap.shape
        ys = torch.linspace(-1, 1, h, dtype=fmap.dtype).view(1, 1, h, 1).expand(b, 1, h, w)
        xs = torch.linspace(-1, 1, w, dtype=fmap.dtype).view(1, 1, 1, w).expand(b, 1, h, w)
        s = style[:, :, None, None].expand(b, style.shape[1], h, w)
        z = self.net(torch.cat([fmap, s, ys, xs], dim=1))
        z = F.interpolate(z, size=(self.image_size, self.image_size), mode="nearest")
        scale, shift = self.film(style)[:, :, None, None].chunk(2, dim=1)
        z = z * (1.0 + scale) + shift
        return torch.sigmoid(self.out(z) + self.colour(style)[:, :, None, None])


class VisualDisentangler(nn.Module):
    def __init__(self, cfg: VisdisConfig = VisdisConfig(), seed: int = 0):
        super().__init__()
        if cfg.image_size % 2**cfg.depth:
            raise ConfigError(f"image size {cfg.image_size} not divisible by 2**depth={2**cfg.depth}")
        self.cfg = cfg
        self.anatomy = AnatomyEncoder(cfg)
        self.style = StyleEncoder(cfg)
        self.decoder = ImageDecoder(cfg)
        init_module(self, seed, "visdis")

    def encode_anatomy(self, x: torch.Tensor) -> tuple[AnatomyFeature, torch.Tensor]:
        if x.shape[-1] % 2**self.cfg.depth or x.shape[-2] % 2**self.cfg.depth:
            raise ConfigError(f"input {tuple(x.shape)} not divisible by 2**depth={2**self.cfg.depth}")
        return self.anatomy(x)

    def encode_style(self, x: torch.Tensor, fa: AnatomyFeature, eps: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> StyleLatent:
        mu, logvar = self.style(x, fa.map)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return StyleLatent(mu, logvar, mu + torch.exp(0.5 * logvar) * eps, eps)

    def decode_image(self, fa: AnatomyFeature, style_sample: torch.Tensor) -> torch.Tensor:
        return self.decoder(fa.map, style_sample)

    def forward(self, x, eps=None, generator=None):
        fa, logits = self.encode_anatomy(x)
        fa_in = AnatomyFeature(fa.map.detach(), fa.pooled.detach()) if self.cfg.detach_anatomy else fa
        style = self.encode_style(x, fa_in, eps=eps, generator=generator)
        recon = self.decode_image(fa_in, style.sample)
        return fa, logits, style, recon


def dice_loss(pred_prob: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Batch mean of ``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)``."""
    dims = tuple(range(1, pred_prob.dim()))
    inter = (pred_prob * target).sum(dims)
    denom = pred_prob.sum(dims) + target.sum(dims)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over dims, averaged over batch."""
    # expm1 keeps exp(lv) - 1 - lv non-negative for tiny lv
    return (0.5 * (mu.pow(2) + torch.expm1(logvar) - logvar).sum(dim=-1)).mean()


def combine_img_loss(rec, dice, kl, lambda_dice: float, lambda_kl: float) -> tuple[torch.Tensor, dict]:
    total = rec + lambda_dice * dice + lambda_kl * kl
    return total, {k: float(v.detach()) for k, v in (("rec", rec), ("dice", dice), ("kl", kl), ("total", total))}


def loss_img(model: VisualDisentangler, x: torch.Tensor, mask: torch.Tensor, eps=None, generator=None,
             lambda_dice: float | None = None, lambda_kl: float | None = None) -> tuple[torch.Tensor, dict]:
    lambda_dice = model.cfg.lambda_dice if lambda_dice is None else lambda_dice
    lambda_kl = model.cfg.lambda_kl if lambda_kl is None else lambda_kl
    _, logits, style, recon = model(x, eps=eps, generator=generator)
    rec = F.mse_loss(recon, x)
    dice = dice_loss(torch.sigmoid(logits), mask)
    kl = kl_loss(style.mu, style.logvar)
    return combine_img_loss(rec, dice, kl, lambda_dice, lambda_kl)


def train_visual(model: VisualDisentangler, images: np.ndarray, masks: np.ndarray, seed: int = 0,
                 epochs: int | None = None, log=None) -> list[dict]:
    """Stage-1 training; returns one dict of mean loss parts per epoch."""
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    x_all = torch.from_numpy(images)
    m_all = torch.from_numpy(masks)
    n = len(x_all)
    steps_per_epoch = max(1, n // cfg.batch_size)
    sched = LrSchedule(min(cfg.warmup_steps, epochs * steps_per_epoch), epochs * steps_per_epoch, cfg.lr, 0.0)
    opt = AdamW(((k, p) for k, p in model.named_parameters() if p.requires_grad), lr=cfg.lr, weight_decay=0.0)
    order_rng = np_stream(seed, "visdis.order")
    g = stream(seed, "visdis.eps")
    model.train()
    history, step = [], 0
    for epoch in range(epochs):
        t0 = time.time()
        perm = order_rng.permutation(n)
        sums: dict[str, float] = {}
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            loss, parts = loss_img(model, x_all[idx], m_all[idx], generator=g)
            opt.zero_grad()
            loss.backward()
            step += 1
            opt.step(lr_at(sched, step))
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()}, "seconds": time.time() - t0}
        history.append(row)
        if log:
            log(row)
    model.eval()
    return history


@torch.no_grad()
def encode_dataset(model: VisualDisentangler, images: np.ndarray, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Frozen-encoder features: pooled anatomy, style mu/logvar, mask probabilities."""
    model.eval()
    out: dict[str, list] = {"pooled": [], "mu": [], "logvar": [], "mask_prob": []}
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images[i:i + batch_size])
        fa, logits = model.encode_anatomy(x)
        style = model.encode_style(x, fa, eps=torch.zeros(len(x), model.cfg.style_dim))
        out["pooled"].append(fa.pooled.numpy())
        out["mu"].append(style.mu.numpy())
        out["logvar"].append(style.logvar.numpy())
        out["mask_prob"].append(torch.sigmoid(logits).numpy())
    return {k: np.concatenate(v) for k, v in out.items()}


def linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray) -> float:
    """Held-out accuracy of a standardized multinomial logistic regression."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    clf.fit(train_x, train_y)
    return float(clf.score(test_x, test_y))
