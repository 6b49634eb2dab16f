import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disengen.errors import DatasetError
from disengen.synthdata import (
    BUCKET_WORDS,
    COLOR_WORDS,
    PAD_ID,
    PALETTES,
    SHAPE_KINDS,
    UNK_ID,
    VOCAB,
    AnatomyFactors,
    StyleFactors,
    SynthConfig,
    caption_from_buckets,
    caption_of,
    factor_buckets,
    generate_dataset,
    generate_sample,
    make_sample,
    parse_caption,
    read_dataset,
    read_images,
    render_image,
    render_mask,
    split_words,
    tokenize,
    write_dataset,
)

anatomy_st = st.builds(
    AnatomyFactors,
    shape_kind=st.sampled_from(SHAPE_KINDS),
    center=st.tuples(st.floats(0.38, 0.62), st.floats(0.38, 0.62)),
    radius=st.floats(0.15, 0.32),
    boundary_irregularity=st.floats(0, 1),
    asymmetry=st.floats(0, 1),
)
style_st = st.builds(
    StyleFactors,
    base_intensity=st.floats(0, 1),
    palette_id=st.integers(0, len(PALETTES) - 1),
    texture_frequency=st.floats(2, 8),
    texture_amplitude=st.floats(0, 1),
    background_noise=st.floats(0, 1),
)


def test_same_seed_bit_identical():
    a, b = generate_sample(11), generate_sample(11)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    assert a.caption == b.caption and a.anatomy == b.anatomy and a.style == b.style


def test_flat_style_is_piecewise_constant():
    s = generate_sample(3)
    style = dataclasses.replace(s.style, texture_amplitude=0.0, background_noise=0.0)
    img, mask = render_image(s.anatomy, style, 3, 32, 0)
    inside = img[:, mask[0] > 0]
    outside = img[:, mask[0] == 0]
    assert (inside.max(axis=1) == inside.min(axis=1)).all()
    assert (outside.max(axis=1) == outside.min(axis=1)).all()


def _analytic_ellipse(cu, cv, r, aspect, size):
    c = (np.arange(size) + 0.5) / size
    return ((c[None, :] - cu) / r) ** 2 + ((c[:, None] - cv) / (aspect * r)) ** 2 <= 1.0


@pytest.mark.parametrize("seed", range(5))
def test_regular_ellipse_matches_analytic(seed):
    rng = np.random.default_rng(seed)
    a = AnatomyFactors("ellipse", (rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6)), rng.uniform(0.15, 0.3), 0.0, 0.0)
    mask = render_mask(a, 32)[0] > 0
    ref = _analytic_ellipse(*a.center, a.radius, 0.55, 32)
    iou = (mask & ref).sum() / (mask | ref).sum()
    assert iou == 1.0


@given(anatomy_st, style_st, style_st)
@settings(max_examples=40, deadline=None)
def test_mask_independent_of_style(a, s1, s2):
    _, m1 = render_image(a, s1, 3, 32, 1)
    _, m2 = render_image(a, s2, 3, 32, 2)
    assert np.array_equal(m1, m2)


@given(style_st, st.sampled_from(SHAPE_KINDS), st.sampled_from(SHAPE_KINDS))
@settings(max_examples=30, deadline=None)
def test_texture_frequency_independent_of_shape(style, k1, k2):
    style = dataclasses.replace(style, texture_amplitude=1.0, background_noise=0.0)

    def peak(kind):
        a = AnatomyFactors(kind, (0.5, 0.5), 0.3, 0.0, 0.0)
        img, mask = render_image(a, style, 1, 32, 0)
        rows = [img[0, r][mask[0, r] > 0] for r in range(32) if mask[0, r].sum() >= 8]
        # interior rows, zero-padded to a common length before the FFT
        spec = np.mean([np.abs(np.fft.rfft(row - row.mean(), n=64)) for row in rows], axis=0)
        return int(np.argmax(spec[1:]) + 1)

    assert abs(peak(k1) - peak(k2)) <= 1


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_sample_invariants(seed):
    s = generate_sample(seed)
    assert s.image.shape == (3, 32, 32) and s.mask.shape == (1, 32, 32)
    assert s.image.min() >= 0 and s.image.max() <= 1
    assert set(np.unique(s.mask)) <= {0.0, 1.0}
    assert s.mask.sum() > 0
    words = split_words(s.caption)
    for vocab in (*BUCKET_WORDS.values(), COLOR_WORDS):
        assert sum(w in vocab for w in words) == 1


def test_lesion_darker_than_background():
    for bg, fg in PALETTES:
        assert all(f < b for f, b in zip(fg, bg))


@pytest.mark.parametrize("n,k", [(10, 3), (7, 6), (100, 4), (2, 3)])
def test_class_balance(n, k):
    ds = generate_dataset(n, SynthConfig(n_classes=k), seed=1)
    counts = np.bincount([s.class_label for s in ds], minlength=k)
    assert counts.min() >= n // k and counts.max() <= -(-n // k)


# -- captions ---------------------------------------------------------------


def test_mid_bucket_canonical_sentence():
    mid = {k: 1 for k in BUCKET_WORDS}
    mid.update(shape_kind=1, palette_id=1)
    assert caption_from_buckets(mid, 0) == (
        "a nevus lesion with blob shape, uneven boundary, skewed outline, moderate size, "
        "central middle position, pink color, normal intensity, regular visible texture and grainy background"
    )


def test_palette_change_only_changes_color_word():
    s = generate_sample(5)
    other = dataclasses.replace(s.style, palette_id=(s.style.palette_id + 1) % len(PALETTES))
    w1 = split_words(caption_of(s.anatomy, s.style, s.class_label))
    w2 = split_words(caption_of(s.anatomy, other, s.class_label))
    diff = [(a, b) for a, b in zip(w1, w2) if a != b]
    assert len(w1) == len(w2) and len(diff) == 1
    assert diff[0][0] in COLOR_WORDS and diff[0][1] in COLOR_WORDS


@given(anatomy_st, style_st, st.integers(0, 2))
@settings(max_examples=60, deadline=None)
def test_parse_inverts_caption(a, s, cls):
    parsed = parse_caption(caption_of(a, s, cls))
    assert parsed.pop("class_label") == cls
    assert parsed == factor_buckets(a, s)


bucket_st = st.fixed_dictionaries({
    **{k: st.integers(0, 2) for k in BUCKET_WORDS},
    "shape_kind": st.integers(0, 2),
    "palette_id": st.integers(0, 3),
})


@given(bucket_st, bucket_st)
def test_caption_injective(b1, b2):
    if b1 != b2:
        assert caption_from_buckets(b1, 0) != caption_from_buckets(b2, 0)


def test_parse_rejects_incomplete_caption():
    with pytest.raises(ValueError):
        parse_caption("a nevus lesion with blob shape")


# -- tokenizer --------------------------------------------------------------


def test_tokenize_empty_is_all_pad():
    assert tokenize("").token_ids == (PAD_ID,) * 32


def test_tokenize_known_five_words():
    t = tokenize("A blob, with Jagged boundary!")
    expected = [VOCAB.index(w) for w in ("a", "blob", "with", "jagged", "boundary")]
    assert list(t.token_ids[:5]) == expected
    assert t.token_ids[5:] == (PAD_ID,) * 27


def test_tokenize_oov_and_truncation():
    t = tokenize("zebra " * 40, length=8)
    assert t.token_ids == (UNK_ID,) * 8


@given(st.text(max_size=200))
def test_tokenize_ids_in_range_and_deterministic(text):
    t = tokenize(text)
    assert len(t.token_ids) == 32 and all(0 <= i < t.vocab_size for i in t.token_ids)
    assert tokenize(text) == t


def test_vocab_small():
    assert len(VOCAB) <= 128


# -- disk -------------------------------------------------------------------


def test_dataset_roundtrip(tmp_path):
    ds = generate_dataset(10, seed=4)
    write_dataset(ds, tmp_path, SynthConfig())
    back = read_dataset(tmp_path)
    m1 = json.loads((tmp_path / "manifest.json").read_text())
    write_dataset(back, tmp_path / "again", SynthConfig())
    m2 = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert m1 == m2
    for a, b in zip(ds, back):
        assert a.anatomy == b.anatomy and a.style == b.style and a.caption == b.caption
        assert np.abs(a.image - b.image).max() <= 1 / 510 + 1e-7
        assert np.array_equal(a.mask, b.mask)
    assert read_images(tmp_path).shape == (10, 3, 32, 32)


def test_mask_bytes_on_disk(tmp_path):
    from PIL import Image

    write_dataset(generate_dataset(3, seed=0), tmp_path)
    with Image.open(tmp_path / "masks" / "00000.pgm") as im:
        assert set(np.unique(np.asarray(im))) <= {0, 255}


def test_corrupt_manifest_names_file_and_field(tmp_path):
    write_dataset(generate_dataset(2, seed=0), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    del m["samples"][1]["style"]["palette_id"]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError, match=r"manifest\.json.*palette_id"):
        read_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetError, match="manifest.json"):
        read_dataset(tmp_path)


def test_make_sample_uses_given_factors():
    a = AnatomyFactors("polyp-lobe", (0.5, 0.5), 0.25, 0.2, 0.1)
    s = StyleFactors(0.5, 2, 4.0, 0.5, 0.0)
    smp = make_sample(a, s, 1)
    assert smp.anatomy == a and smp.style == s and "lobulated" in smp.caption and "gray" in smp.caption
