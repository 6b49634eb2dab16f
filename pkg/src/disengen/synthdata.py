"""Procedural lesion images with known anatomy/style factors and a
deterministic attribute captioner.

Every continuous factor is reported in the caption through one of three
bucket words, so the caption vocabulary stays tiny and the caption can be
parsed back into bucket indices.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DatasetError

SHAPE_KINDS = ("ellipse", "blob", "polyp-lobe")
CLASS_NAMES = ("nevus", "melanoma", "keratosis", "polyp", "cyst", "carcinoma")

# (background RGB, lesion RGB); every lesion is darker than its background
PALETTES = (
    ((0.88, 0.68, 0.48), (0.48, 0.26, 0.10)),
    ((0.96, 0.74, 0.84), (0.78, 0.22, 0.46)),
    ((0.74, 0.74, 0.74), (0.36, 0.36, 0.36)),
    ((0.60, 0.78, 0.96), (0.16, 0.30, 0.68)),
)

SHAPE_WORDS = ("oval", "blob", "lobulated")
COLOR_WORDS = ("brown", "pink", "gray", "blue")
BUCKET_WORDS = {
    "boundary_irregularity": ("smooth", "uneven", "jagged"),
    "asymmetry": ("symmetric", "skewed", "lopsided"),
    "radius": ("small", "moderate", "large"),
    "center_u": ("left", "central", "right"),
    "center_v": ("upper", "middle", "lower"),
    "base_intensity": ("dim", "normal", "bright"),
    "texture_frequency": ("coarse", "regular", "fine"),
    "texture_amplitude": ("faint", "visible", "pronounced"),
    "background_noise": ("clean", "grainy", "noisy"),
}
TEMPLATE = (
    "a {cls} lesion with {shape} shape, {boundary_irregularity} boundary, {asymmetry} outline, "
    "{radius} size, {center_u} {center_v} position, {color} color, {base_intensity} intensity, "
    "{texture_frequency} {texture_amplitude} texture and {background_noise} background"
)
ANATOMY_KEYS = ("shape_kind", "boundary_irregularity", "asymmetry", "radius", "center_u", "center_v")
STYLE_KEYS = ("palette_id", "base_intensity", "texture_frequency", "texture_amplitude", "background_noise")

PAD_ID, UNK_ID = 0, 1


@dataclass(frozen=True)
class AnatomyFactors:
    shape_kind: str
    center: tuple[float, float]
    radius: float
    boundary_irregularity: float
    asymmetry: float


@dataclass(frozen=True)
class StyleFactors:
    base_intensity: float
    palette_id: int
    texture_frequency: float
    texture_amplitude: float
    background_noise: float


@dataclass
class SyntheticSample:
    image: np.ndarray  # [C,H,W] float32 in [0,1]
    mask: np.ndarray  # [1,H,W] float32 in {0,1}
    anatomy: AnatomyFactors
    style: StyleFactors
    caption: str
    class_label: int
    noise_seed: int = 0


@dataclass(frozen=True)
class TokenizedCaption:
    token_ids: tuple[int, ...]
    vocab_size: int


@dataclass(frozen=True)
class SynthConfig:
    channels: int = 3
    size: int = 32
    n_classes: int = 3
    radius_range: tuple[float, float] = (0.15, 0.32)
    center_range: tuple[float, float] = (0.38, 0.62)
    frequency_range: tuple[float, float] = (2.0, 8.0)
    caption_len: int = 32
    class_bias: float = 0.6


# ---------------------------------------------------------------------------
# captions


def _bucket(x: float, lo: float, hi: float) -> int:
    return int(min(2, max(0, np.floor((x - lo) / (hi - lo) * 3.0))))


def factor_buckets(anatomy: AnatomyFactors, style: StyleFactors, config: SynthConfig = SynthConfig()) -> dict:
    """Bucket index of every factor (categorical factors keep their index)."""
    rlo, rhi = config.radius_range
    clo, chi = config.center_range
    flo, fhi = config.frequency_range
    return {
        "shape_kind": SHAPE_KINDS.index(anatomy.shape_kind),
        "boundary_irregularity": _bucket(anatomy.boundary_irregularity, 0.0, 1.0),
        "asymmetry": _bucket(anatomy.asymmetry, 0.0, 1.0),
        "radius": _bucket(anatomy.radius, rlo, rhi),
        "center_u": _bucket(anatomy.center[0], clo, chi),
        "center_v": _bucket(anatomy.center[1], clo, chi),
        "palette_id": style.palette_id,
        "base_intensity": _bucket(style.base_intensity, 0.0, 1.0),
        "texture_frequency": _bucket(style.texture_frequency, flo, fhi),
        "texture_amplitude": _bucket(style.texture_amplitude, 0.0, 1.0),
        "background_noise": _bucket(style.background_noise, 0.0, 1.0),
    }


def caption_from_buckets(buckets: dict, class_label: int) -> str:
    words = {k: BUCKET_WORDS[k][buckets[k]] for k in BUCKET_WORDS}
    return TEMPLATE.format(
        cls=CLASS_NAMES[class_label],
        shape=SHAPE_WORDS[buckets["shape_kind"]],
        color=COLOR_WORDS[buckets["palette_id"]],
        **words,
    )


def caption_of(anatomy: AnatomyFactors, style: StyleFactors, class_label: int,
               config: SynthConfig = SynthConfig()) -> str:
    return caption_from_buckets(factor_buckets(anatomy, style, config), class_label)


def split_words(text: str) -> list[str]:
    return [w for w in re.split(r"[^0-9a-z]+", text.lower()) if w]


def parse_caption(caption: str) -> dict:
    """Inverse of :func:`caption_of` at bucket granularity.

    Returns the bucket dict plus ``class_label``; raises ``ValueError`` when
    a factor is missing or mentioned twice.
    """
    words = split_words(caption)
    lookup = {"shape_kind": SHAPE_WORDS, "palette_id": COLOR_WORDS, **BUCKET_WORDS,
              "class_label": CLASS_NAMES}
    out = {}
    for key, vocab in lookup.items():
        hits = [vocab.index(w) for w in words if w in vocab]
        if len(hits) != 1:
            raise ValueError(f"caption mentions factor {key!r} {len(hits)} times: {caption!r}")
        out[key] = hits[0]
    return out


TEMPLATE_WORDS = ("a", "lesion", "with", "shape", "boundary", "outline", "size", "position",
                  "color", "intensity", "texture", "and", "background")


def _build_vocab() -> tuple[str, ...]:
    words = ["<pad>", "<unk>", *TEMPLATE_WORDS, *CLASS_NAMES, *SHAPE_WORDS, *COLOR_WORDS]
    words += [w for ws in BUCKET_WORDS.values() for w in ws]
    assert len(set(words)) == len(words)
    return tuple(words)


VOCAB = _build_vocab()
_WORD_ID = {w: i for i, w in enumerate(VOCAB)}


def tokenize(caption: str, length: int = 32) -> TokenizedCaption:
    """Lower-case word split, OOV id 1, padded/truncated with id 0 to ``length``."""
    ids = [_WORD_ID.get(w, UNK_ID) for w in split_words(caption)][:length]
    ids += [PAD_ID] * (length - len(ids))
    return TokenizedCaption(tuple(ids), len(VOCAB))


# ---------------------------------------------------------------------------
# rendering


def _radial_profile(kind: str, theta: np.ndarray) -> np.ndarray:
    if kind == "blob":
        return 1.0 + 0.22 * np.cos(3 * theta + 0.5)
    if kind == "polyp-lobe":
        return 1.0 + 0.28 * np.cos(5 * theta)
    raise ValueError(kind)


ELLIPSE_ASPECT = 0.55


def normalized_radius(anatomy: AnatomyFactors, size: int) -> np.ndarray:
    """Per-pixel squared ``distance / boundary_radius`` at pixel centres.

    The mask is where this is ``<= 1``; it depends on the anatomy factors only.
    """
    c = (np.arange(size) + 0.5) / size
    dx = c[None, :] - anatomy.center[0]
    dy = c[:, None] - anatomy.center[1]
    theta = np.arctan2(dy, dx)
    r = anatomy.radius
    if anatomy.shape_kind == "ellipse":
        base2 = (dx / r) ** 2 + (dy / (ELLIPSE_ASPECT * r)) ** 2
    else:
        base2 = (dx**2 + dy**2) / (r * _radial_profile(anatomy.shape_kind, theta)) ** 2
    mod = (
        anatomy.asymmetry * 0.25 * np.cos(theta - 0.6)
        + anatomy.boundary_irregularity * 0.11 * (
            np.sin(9 * theta + 1.3) + 0.7 * np.sin(13 * theta + 0.4) + 0.5 * np.cos(7 * theta + 2.1)
        )
    )
    return base2 / (1.0 + mod) ** 2


def render_mask(anatomy: AnatomyFactors, size: int) -> np.ndarray:
    return (normalized_radius(anatomy, size) <= 1.0).astype(np.float32)[None]


def render_image(anatomy: AnatomyFactors, style: StyleFactors, channels: int, size: int,
                 noise_seed: int) -> tuple[np.ndarray, np.ndarray]:
    mask = render_mask(anatomy, size)
    bg, fg = (np.asarray(c, dtype=np.float64) for c in PALETTES[style.palette_id])
    if channels == 1:
        bg, fg = bg.mean(keepdims=True), fg.mean(keepdims=True)
    elif channels != 3:
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    gain = 0.7 + 0.3 * style.base_intensity
    u = (np.arange(size) + 0.5) / size
    stripes = 1.0 + 0.35 * style.texture_amplitude * np.sin(2 * np.pi * style.texture_frequency * u)
    tex = np.broadcast_to(stripes[None, :], (size, size))
    img = np.where(mask[0] > 0, fg[:, None, None] * tex[None], bg[:, None, None]) * gain
    if style.background_noise > 0:
        rng = np.random.default_rng(noise_seed)
        img = img + rng.normal(0.0, 0.08 * style.background_noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def sample_factors(rng: np.random.Generator, class_label: int, config: SynthConfig) -> tuple[AnatomyFactors, StyleFactors]:
    def biased(pref: int, k: int) -> int:
        if rng.random() < config.class_bias:
            return pref
        return int(rng.choice([i for i in range(k) if i != pref]))

    anatomy = AnatomyFactors(
        shape_kind=SHAPE_KINDS[biased(class_label % len(SHAPE_KINDS), len(SHAPE_KINDS))],
        center=(float(rng.uniform(*config.center_range)), float(rng.uniform(*config.center_range))),
        radius=float(rng.uniform(*config.radius_range)),
        boundary_irregularity=float(rng.uniform()),
        asymmetry=float(rng.uniform()),
    )
    style = StyleFactors(
        base_intensity=float(rng.uniform()),
        palette_id=biased(class_label % len(PALETTES), len(PALETTES)),
        texture_frequency=float(rng.uniform(*config.frequency_range)),
        texture_amplitude=float(rng.uniform()),
        background_noise=float(rng.uniform()),
    )
    return anatomy, style


def make_sample(anatomy: AnatomyFactors, style: StyleFactors, class_label: int,
                config: SynthConfig = SynthConfig(), noise_seed: int = 0) -> SyntheticSample:
    image, mask = render_image(anatomy, style, config.channels, config.size, noise_seed)
    return SyntheticSample(image, mask, anatomy, style, caption_of(anatomy, style, class_label, config),
                           class_label, noise_seed)


def generate_sample(seed: int, config: SynthConfig = SynthConfig(), class_label: int | None = None) -> SyntheticSample:
    """Deterministic in ``(seed, config, class_label)``.

    Factors that would rasterise to a lesion narrower than 2 px or to an
    empty mask are redrawn from the same stream.
    """
    rng = np.random.default_rng(seed)
    if class_label is None:
        class_label = int(rng.integers(config.n_classes))
    while True:
        anatomy, style = sample_factors(rng, class_label, config)
        if anatomy.radius * config.size * ELLIPSE_ASPECT < 2.0:
            continue
        if render_mask(anatomy, config.size).sum() > 0:
            break
    return make_sample(anatomy, style, class_label, config, noise_seed=int(rng.integers(2**31)))


def generate_dataset(n: int, config: SynthConfig = SynthConfig(), seed: int = 0) -> list[SyntheticSample]:
    """``n`` samples with classes assigned round-robin (balanced to within one)."""
    root = np.random.SeedSequence(seed)
    seeds = root.generate_state(n, dtype=np.uint32)
    return [generate_sample(int(s), config, class_label=i % config.n_classes) for i, s in enumerate(seeds)]


def stack(samples: Sequence[SyntheticSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch images ``[N,C,H,W]`` and masks ``[N,1,H,W]``."""
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


# ---------------------------------------------------------------------------
# on-disk layout: images/NNNNN.ppm, masks/NNNNN.pgm, manifest.json


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Path, image: np.ndarray) -> None:
    q = _quantize(image)
    arr = q[0] if q.shape[0] == 1 else np.transpose(q, (1, 2, 0))
    Image.fromarray(arr, mode="L" if q.shape[0] == 1 else "RGB").save(path, format="PPM")


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1)).copy()


def _image_name(i: int, channels: int) -> str:
    return f"{i:05d}.ppm" if channels == 3 else f"{i:05d}.pgm"


def write_dataset(samples: Sequence[SyntheticSample], directory: str | Path, config: SynthConfig | None = None) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        name = _image_name(i, s.image.shape[0])
        write_image(directory / "images" / name, s.image)
        write_image(directory / "masks" / f"{i:05d}.pgm", s.mask)
        records.append({
            "id": i,
            "image": f"images/{name}",
            "mask": f"masks/{i:05d}.pgm",
            "class_label": s.class_label,
            "caption": s.caption,
            "noise_seed": s.noise_seed,
            "anatomy": asdict(s.anatomy),
            "style": asdict(s.style),
        })
    manifest = {"version": 1, "config": asdict(config) if config else None, "samples": records}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def _field(record: dict, key: str, where: str):
    try:
        return record[key]
    except (KeyError, TypeError):
        raise DatasetError(f"{where}: missing field {key!r}") from None


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"{path}: no manifest") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: corrupt manifest ({exc})") from exc
    _field(manifest, "samples", str(path))
    return manifest


def read_dataset(directory: str | Path) -> list[SyntheticSample]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    manifest = read_manifest(directory)
    samples = []
    for k, rec in enumerate(manifest["samples"]):
        where = f"{mpath} sample[{k}]"
        a = _field(rec, "anatomy", where)
        s = _field(rec, "style", where)
        try:
            anatomy = AnatomyFactors(
                shape_kind=_field(a, "shape_kind", where + ".anatomy"),
                center=tuple(_field(a, "center", where + ".anatomy")),
                radius=_field(a, "radius", where + ".anatomy"),
                boundary_irregularity=_field(a, "boundary_irregularity", where + ".anatomy"),
                asymmetry=_field(a, "asymmetry", where + ".anatomy"),
            )
            style = StyleFactors(**{f: _field(s, f, where + ".style") for f in StyleFactors.__dataclass_fields__})
        except TypeError as exc:
            raise DatasetError(f"{where}: malformed factor record ({exc})") from exc
        samples.append(SyntheticSample(
            image=read_image(directory / _field(rec, "image", where)),
            mask=(read_image(directory / _field(rec, "mask", where)) > 0.5).astype(np.float32),
            anatomy=anatomy,
            style=style,
            caption=_field(rec, "caption", where),
            class_label=_field(rec, "class_label", where),
            noise_seed=rec.get("noise_seed", 0),
        ))
    return samples


def read_images(directory: str | Path) -> np.ndarray:
    """All images of a dataset or sample directory as ``[N,C,H,W]``."""
    paths = sorted((Path(directory) / "images").glob("*.p[gp]m"))
    if not paths:
        raise DatasetError(f"{directory}: no images found under images/")
    imgs = [read_image(p) for p in paths]
    if len({im.shape for im in imgs}) != 1:
        raise DatasetError(f"{directory}: images have mixed shapes")
    return np.stack(imgs)


def config_from_manifest(manifest: dict) -> SynthConfig:
    cfg = manifest.get("config")
    if not cfg:
        return SynthConfig()
    return SynthConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
