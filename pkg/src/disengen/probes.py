"""Measurements on trained encoders: linear probes, style swap, text alignment."""
from __future__ import annotations

import numpy as np
import torch

from .synthdata import SHAPE_KINDS, SyntheticSample, stack
from .textdis import FrozenTextEmbedder, TextHeads, alignment_margin, embed_text
from .visdis import VisualDisentangler, encode_dataset, linear_probe


def factor_labels(samples: list[SyntheticSample]) -> dict[str, np.ndarray]:
    return {"shape_kind": np.array([SHAPE_KINDS.index(s.anatomy.shape_kind) for s in samples]),
            "palette_id": np.array([s.style.palette_id for s in samples])}


def probe_report(model: VisualDisentangler, train: list[SyntheticSample], test: list[SyntheticSample]) -> dict:
    """Probe accuracies for every (factor, feature) pair plus held-out reconstruction MSE."""
    xtr, _ = stack(train)
    xte, _ = stack(test)
    ftr, fte = encode_dataset(model, xtr), encode_dataset(model, xte)
    ytr, yte = factor_labels(train), factor_labels(test)
    acc = {f"{factor}_on_{feat}": linear_probe(ftr[feat], ytr[factor], fte[feat], yte[factor])
           for factor in ("shape_kind", "palette_id") for feat in ("pooled", "mu")}
    return {**acc, "recon_mse": reconstruction_mse(model, xte)}


@torch.no_grad()
def reconstruction_mse(model: VisualDisentangler, images: np.ndarray, batch_size: int = 256) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images[i:i + batch_size])
        fa, _ = model.encode_anatomy(x)
        style = model.encode_style(x, fa, eps=torch.zeros(len(x), model.cfg.style_dim))
        total += float(((model.decode_image(fa, style.mu) - x) ** 2).mean(dim=(1, 2, 3)).sum())
    return total / len(images)


@torch.no_grad()
def style_swap_fraction(model: VisualDisentangler, samples: list[SyntheticSample], min_gap: float = 0.1,
                        seed: int = 0) -> dict:
    """How far swapping in a donor's style moves interior intensity toward the donor's.

    For each recipient ``i`` and random donor ``j`` the fraction is
    ``(I(swap) - I(own)) / (I_donor - I(own))`` where ``I`` is the mean
    reconstruction intensity inside the recipient mask and ``I_donor`` the
    donor image's own interior intensity. Pairs whose gap is below
    ``min_gap`` are skipped.
    """
    model.eval()
    images, masks = stack(samples)
    x = torch.from_numpy(images)
    m = torch.from_numpy(masks)
    donor = np.random.default_rng(seed).permutation(len(samples))
    fa, _ = model.encode_anatomy(x)
    mu = model.encode_style(x, fa, eps=torch.zeros(len(x), model.cfg.style_dim)).mu
    own = model.decode_image(fa, mu)
    swap = model.decode_image(fa, mu[donor])

    def interior(img, mask):
        return (img.mean(1, keepdim=True) * mask).sum(dim=(1, 2, 3)) / mask.sum(dim=(1, 2, 3))

    i_own, i_swap = interior(own, m), interior(swap, m)
    i_donor = interior(x[donor], m[donor])
    gap = i_donor - i_own
    keep = gap.abs() >= min_gap
    frac = ((i_swap - i_own)[keep] / gap[keep]).numpy()
    return {"median_fraction": float(np.median(frac)), "mean_fraction": float(frac.mean()), "pairs": int(keep.sum())}


@torch.no_grad()
def alignment_report(model: VisualDisentangler, embedder: FrozenTextEmbedder, heads: TextHeads,
                     samples: list[SyntheticSample], seed: int = 0) -> dict:
    """Matched vs mismatched cosine distance between text and image features per subspace."""
    heads.eval()
    images, _ = stack(samples)
    feats = encode_dataset(model, images)
    dt = heads(embed_text(embedder, [s.caption for s in samples]).pooled)
    return {"anatomy": alignment_margin(dt.f_a.numpy(), feats["pooled"], seed),
            "style": alignment_margin(dt.f_s.numpy(), feats["mu"], seed)}
