"""Corpus-level generative metrics: Frechet distance and KID over pluggable
feature extractors, plus the text/image embedding export.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DatasetError, DimensionError, NumericError
from .nncore import np_stream

KINDS = ("random_projection", "highfreq_fft", "anatomy_encoder_pooled")
SHORT_NAMES = {"rp": "random_projection", "hf": "highfreq_fft", "anat": "anatomy_encoder_pooled"}


@dataclass(frozen=True)
class FeatureExtractor:
    kind: str
    output_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown extractor kind {self.kind!r}; expected one of {KINDS}")


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def fit(cls, features: np.ndarray) -> "GaussianStats":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or len(f) < 2:
            raise DimensionError(f"need [N>=2, D] features, got shape {f.shape}")
        return cls(f.mean(0), np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1]), len(f))


# ---------------------------------------------------------------------------
# features


def random_projection_features(images: np.ndarray, output_dim: int = 64, seed: int = 0) -> np.ndarray:
    flat = images.reshape(len(images), -1).astype(np.float64)
    proj = np_stream(seed, "metrics.random_projection").standard_normal((flat.shape[1], output_dim))
    return flat @ proj / np.sqrt(flat.shape[1])


def radial_band_energy(images: np.ndarray, n_bands: int | None = None) -> np.ndarray:
    """Mean spectral power per radial frequency band, ``[N, C, n_bands]``.

    Bands split radii ``[0, sqrt(2)/2]`` cycles/pixel evenly; the DC term is
    removed before the transform.
    """
    n, c, h, w = images.shape
    n_bands = n_bands or min(h, w) // 2
    x = images.astype(np.float64)
    x = x - x.mean(axis=(2, 3), keepdims=True)
    power = np.abs(np.fft.fft2(x)) ** 2 / (h * w)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    band = np.minimum((radius / (np.sqrt(0.5) / n_bands)).astype(int), n_bands - 1)
    out = np.zeros((n, c, n_bands))
    for b in range(n_bands):
        sel = band == b
        if sel.any():
            out[:, :, b] = power[:, :, sel].mean(axis=-1)
    return out


def highfreq_features(images: np.ndarray, n_bands: int | None = None) -> np.ndarray:
    """``log1p`` energy of the upper half of the radial bands, per channel."""
    e = radial_band_energy(images, n_bands)
    return np.log1p(e[:, :, e.shape[2] // 2:]).reshape(len(images), -1)


def extract_features(images: np.ndarray, extractor: FeatureExtractor, visual_model=None) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4:
        raise DimensionError(f"expected images [N,C,H,W], got shape {images.shape}")
    if extractor.kind == "random_projection":
        return random_projection_features(images, extractor.output_dim, extractor.seed)
    if extractor.kind == "highfreq_fft":
        return highfreq_features(images)
    if visual_model is None:
        raise ConfigError("anatomy_encoder_pooled features need a trained visual model")
    from .visdis import encode_dataset

    return encode_dataset(visual_model, images.astype(np.float32))["pooled"].astype(np.float64)


# ---------------------------------------------------------------------------
# distances


def _sym_sqrt_psd(m: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -tol:
        raise NumericError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(_floor(w))) @ v.T


def _floor(w: np.ndarray) -> np.ndarray:
    """Zero out eigenvalues that are round-off relative to the largest."""
    return np.where(w > 1e-12 * max(w.max(), 0.0), w, 0.0)


def frechet_distance(a: GaussianStats, b: GaussianStats, jitter: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2})``.

    The trace of the cross term is computed as the sum of square roots of the
    eigenvalues of ``C_a^{1/2} C_b C_a^{1/2}``. If either covariance fails
    the PSD check, ``jitter * I`` is added once before giving up.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    ca, cb = np.atleast_2d(a.cov), np.atleast_2d(b.cov)
    tol = 1e-8 * max(1.0, np.abs(ca).max(), np.abs(cb).max())
    try:
        sa = _sym_sqrt_psd(ca, tol)
        _sym_sqrt_psd(cb, tol)
    except NumericError:
        eye = jitter * np.eye(len(ca))
        ca, cb = ca + eye, cb + eye
        sa = _sym_sqrt_psd(ca, tol)
        _sym_sqrt_psd(cb, tol)
    inner = sa @ cb @ sa
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(_floor(w)).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_cross)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def _mmd2_paired(x: np.ndarray, y: np.ndarray) -> float:
    """U-statistic over index pairs i != j of
    ``k(xi,xj) + k(yi,yj) - k(xi,yj) - k(xj,yi)``."""
    m = len(x)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    off = ~np.eye(m, dtype=bool)
    h = kxx + kyy - kxy - kxy.T
    return float(h[off].sum() / (m * (m - 1)))


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    return float((kxx.sum() - np.trace(kxx)) / (m * (m - 1))
                 + (kyy.sum() - np.trace(kyy)) / (n * (n - 1)) - 2.0 * kxy.mean())


def kid(features_a: np.ndarray, features_b: np.ndarray, n_subsets: int = 10,
        subset_size: int | None = None, seed: int = 0) -> float:
    """Unbiased squared MMD with kernel ``(x.y / D + 1)^3``.

    Equal-sized corpora are compared on paired random subsets (the same row
    indices on both sides), which makes identical corpora score exactly 0.
    Unequal sizes use the full-sample estimator.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise DimensionError("KID needs at least two samples per corpus")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) != len(b):
        return _mmd2_unbiased(a, b)
    m = min(len(a), subset_size or len(a))
    if m == len(a) and n_subsets == 1:
        return _mmd2_paired(a, b)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_subsets):
        idx = rng.choice(len(a), m, replace=False)
        vals.append(_mmd2_paired(a[idx], b[idx]))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# corpus evaluation


def parse_extractors(spec: str | Sequence[str], seed: int = 0, output_dim: int = 64) -> list[FeatureExtractor]:
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    out = []
    for name in names:
        kind = SHORT_NAMES.get(name.strip(), name.strip())
        out.append(FeatureExtractor(kind, output_dim, seed))
    return out


def evaluate_images(gen: np.ndarray, real: np.ndarray, extractors: Sequence[FeatureExtractor],
                    visual_model=None, kid_subsets: int = 10) -> list[dict]:
    if len(gen) == 0 or len(real) == 0:
        raise DatasetError("cannot evaluate an empty corpus")
    if gen.shape[1:] != real.shape[1:]:
        raise DimensionError(f"image shapes differ: {gen.shape[1:]} vs {real.shape[1:]}")
    rows = []
    for ex in extractors:
        fg = extract_features(gen, ex, visual_model)
        fr = extract_features(real, ex, visual_model)
        common = dict(extractor=ex.kind, seed=ex.seed, dim=int(fg.shape[1]), n_gen=len(gen), n_real=len(real))
        rows.append({**common, "metric": "frechet",
                     "value": frechet_distance(GaussianStats.fit(fg), GaussianStats.fit(fr))})
        rows.append({**common, "metric": "kid", "value": kid(fg, fr, n_subsets=kid_subsets, seed=ex.seed)})
    return rows


def evaluate(gen_dir: str | Path, real_dir: str | Path, extractors: Sequence[FeatureExtractor],
             visual_model=None) -> dict:
    from .synthdata import read_images

    gen, real = read_images(gen_dir), read_images(real_dir)
    rows = evaluate_images(gen, real, extractors, visual_model)
    return {"gen": str(gen_dir), "real": str(real_dir), "rows": rows}


def write_report(report: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(report["rows"][0]))
            writer.writeheader()
            writer.writerows(report["rows"])
    else:
        path.write_text(json.dumps(report, indent=1, sort_keys=True))


def write_embeddings_csv(path: str | Path, ids: Sequence[int], spaces: dict[str, dict[str, np.ndarray]]) -> int:
    """Rows ``id, space, modality, v0..vD`` for every (space, modality) array.

    ``spaces`` maps ``"anatomy"``/``"style"`` to ``{"text": arr, "image": arr}``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for space, by_mod in spaces.items():
            for modality, arr in by_mod.items():
                for i, row in zip(ids, np.asarray(arr)):
                    w.writerow([i, space, modality, *(repr(float(v)) for v in row)])
                    count += 1
    return count
