import csv
import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from disengen.errors import ConfigError, DatasetError, DimensionError, NumericError
from disengen.metrics import (FeatureExtractor, GaussianStats, _mmd2_unbiased, evaluate_images,
                              extract_features, frechet_distance, highfreq_features, kid, parse_extractors,
                              polynomial_kernel, radial_band_energy, random_projection_features, write_report)
from disengen.synthdata import generate_dataset, stack


def stats(mean, cov):
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return GaussianStats(mean, np.atleast_2d(np.asarray(cov, dtype=np.float64)), 100)


def scipy_frechet(a: GaussianStats, b: GaussianStats) -> float:
    covmean = scipy.linalg.sqrtm(a.cov @ b.cov).real
    d = a.mean - b.mean
    return float(d @ d + np.trace(a.cov + b.cov - 2 * covmean))


def random_spd(rng, d):
    m = rng.normal(size=(d, d))
    return m @ m.T / d + 0.1 * np.eye(d)


# -- Frechet -------------------------------------------------------------------


def test_frechet_one_dimensional_closed_form():
    # (0 - 1)^2 + 1 + 4 - 2 * sqrt(1 * 4) = 2
    assert abs(frechet_distance(stats(0.0, 1.0), stats(1.0, 4.0)) - 2.0) < 1e-12


def test_frechet_identical_is_zero():
    rng = np.random.default_rng(0)
    s = stats(rng.normal(size=6), random_spd(rng, 6))
    assert abs(frechet_distance(s, s)) < 1e-10


def test_frechet_diagonal_closed_form():
    va, vb = np.array([1.0, 2.0, 9.0]), np.array([4.0, 2.0, 1.0])
    expected = 1.0 + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2)
    got = frechet_distance(stats([1.0, 0, 0], np.diag(va)), stats([0.0, 0, 0], np.diag(vb)))
    assert abs(got - expected) < 1e-12


@given(st.integers(0, 2**16), st.integers(1, 8))
@settings(max_examples=30, deadline=None)
def test_frechet_matches_scipy_sqrtm(seed, d):
    rng = np.random.default_rng(seed)
    a = stats(rng.normal(size=d), random_spd(rng, d))
    b = stats(rng.normal(size=d), random_spd(rng, d))
    ref = scipy_frechet(a, b)
    assert abs(frechet_distance(a, b) - ref) < 1e-8 * max(1.0, abs(ref))
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8 * max(1.0, abs(ref))


def test_frechet_rank_deficient_covariance():
    f = np.random.default_rng(1).normal(size=(3, 10))  # fewer samples than dims
    s = GaussianStats.fit(f)
    assert abs(frechet_distance(s, s)) < 1e-8


def test_frechet_tiny_negative_eigenvalue_is_jittered():
    cov = np.diag([1.0, -1e-7])
    assert np.isfinite(frechet_distance(stats([0, 0], cov), stats([0, 0], np.eye(2))))


def test_frechet_rejects_indefinite_covariance():
    with pytest.raises(NumericError):
        frechet_distance(stats([0, 0], np.diag([1.0, -0.5])), stats([0, 0], np.eye(2)))


def test_frechet_dimension_mismatch():
    with pytest.raises(DimensionError):
        frechet_distance(stats([0, 0], np.eye(2)), stats([0], [[1.0]]))


def test_fit_needs_two_rows():
    with pytest.raises(DimensionError):
        GaussianStats.fit(np.zeros((1, 3)))


# -- KID -----------------------------------------------------------------------


def test_polynomial_kernel_value():
    x, y = np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]])
    assert polynomial_kernel(x, y)[0, 0] == (1 / 2 + 1) ** 3


def loop_mmd2(x, y):
    k = lambda a, b: (a @ b / len(a) + 1) ** 3
    m, n = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


def test_unbiased_mmd_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(9, 3)) + 0.5
    assert abs(_mmd2_unbiased(x, y) - loop_mmd2(x, y)) < 1e-10
    assert abs(kid(x, y) - loop_mmd2(x, y)) < 1e-10


def test_kid_identical_corpora_zero():
    f = np.random.default_rng(0).normal(size=(50, 8))
    assert abs(kid(f, f)) < 1e-12


@given(st.integers(0, 2**16), st.booleans())
@settings(max_examples=25, deadline=None)
def test_kid_symmetric(seed, equal):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(20, 4))
    b = rng.normal(size=(20 if equal else 13, 4)) + 0.3
    assert abs(kid(a, b, seed=seed) - kid(b, a, seed=seed)) < 1e-10


def test_kid_unbiased_under_null():
    rng = np.random.default_rng(7)
    vals = [kid(rng.normal(size=(30, 4)), rng.normal(size=(40, 4))) for _ in range(300)]
    assert abs(np.mean(vals)) < 3 * np.std(vals) / np.sqrt(len(vals))


def test_kid_detects_shift():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(100, 4)), rng.normal(size=(100, 4)) + 1.0
    assert kid(a, b) > 0.1


def test_kid_errors():
    with pytest.raises(DimensionError):
        kid(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(DimensionError):
        kid(np.zeros((4, 3)), np.zeros((4, 2)))


# -- features ------------------------------------------------------------------


def test_unknown_extractor_kind():
    with pytest.raises(ConfigError):
        FeatureExtractor("inception")


def test_parse_extractors_short_names():
    kinds = [e.kind for e in parse_extractors("rp,hf,anat", seed=2)]
    assert kinds == ["random_projection", "highfreq_fft", "anatomy_encoder_pooled"]
    with pytest.raises(ConfigError):
        parse_extractors("rp,bogus")


def test_random_projection_is_seeded_linear_map():
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(3, 3, 4, 4)), rng.uniform(size=(3, 3, 4, 4))
    fx = random_projection_features(x, 8, seed=1)
    assert np.allclose(random_projection_features(x + y, 8, seed=1), fx + random_projection_features(y, 8, seed=1))
    assert np.array_equal(fx, random_projection_features(x, 8, seed=1))
    assert not np.allclose(fx, random_projection_features(x, 8, seed=2))


def test_anatomy_extractor_needs_model():
    with pytest.raises(ConfigError):
        extract_features(np.zeros((2, 3, 8, 8)), FeatureExtractor("anatomy_encoder_pooled"))


def test_constant_image_has_no_band_energy():
    e = radial_band_energy(np.full((2, 3, 16, 16), 0.4))
    assert e.shape == (2, 3, 8) and np.abs(e).max() < 1e-20


@pytest.mark.parametrize("k", [1, 3, 6])
def test_cosine_lands_in_its_band(k):
    u = np.arange(16)
    img = np.cos(2 * np.pi * k * u / 16)[None, None, None, :].repeat(16, axis=2)
    e = radial_band_energy(img)[0, 0]
    expected = int((k / 16) / (np.sqrt(0.5) / 8))
    assert int(np.argmax(e)) == expected


def test_highfreq_prefers_fine_detail():
    u = np.arange(16)
    coarse = np.cos(2 * np.pi * 1 * u / 16)[None, None, None, :].repeat(16, axis=2)
    fine = np.cos(2 * np.pi * 7 * u / 16)[None, None, None, :].repeat(16, axis=2)
    assert highfreq_features(fine).sum() > highfreq_features(coarse).sum()
    assert highfreq_features(coarse).shape == (1, 4)


# -- corpus-level --------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    images, _ = stack(generate_dataset(200, seed=5))
    return images


def test_identical_corpora_score_zero(corpus):
    for row in evaluate_images(corpus, corpus, parse_extractors("rp,hf")):
        assert abs(row["value"]) < (1e-6 if row["metric"] == "frechet" else 1e-3)


def test_noise_monotonicity(corpus):
    rng = np.random.default_rng(0)
    noise = rng.normal(size=corpus.shape)
    for ex in parse_extractors("rp,hf"):
        real = extract_features(corpus, ex)
        scores = [frechet_distance(GaussianStats.fit(extract_features(np.clip(corpus + s * noise, 0, 1), ex)),
                                   GaussianStats.fit(real)) for s in (0.05, 0.1, 0.2)]
        assert scores[0] < scores[1] < scores[2]


def test_evaluate_rows_and_report(tmp_path, corpus):
    rows = evaluate_images(corpus[:50], corpus[50:120], parse_extractors("rp"), kid_subsets=2)
    assert [r["metric"] for r in rows] == ["frechet", "kid"]
    assert rows[0]["n_gen"] == 50 and rows[0]["n_real"] == 70 and rows[0]["dim"] == 64
    report = {"gen": "a", "real": "b", "rows": rows}
    write_report(report, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["rows"] == rows
    write_report(report, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        back = list(csv.DictReader(fh))
    assert [float(r["value"]) for r in back] == [r["value"] for r in rows]


def test_empty_corpus_rejected(corpus):
    with pytest.raises(DatasetError):
        evaluate_images(corpus[:0], corpus, parse_extractors("rp"))


def test_kid_two_point_sets_hand_value():
    # k(a,b) = (a.b/2 + 1)^3: within-set pairs give 1, cross pairs give 1 or 3.375
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert abs(kid(x, y) - (1 + 1 - 2 * (1 + 3.375) / 2)) < 1e-12
    assert abs(_mmd2_unbiased(x, y) + 2.375) < 1e-12


def test_checkerboard_energy_in_top_band():
    u = np.arange(16)
    board = ((-1.0) ** (u[:, None] + u[None, :]))[None, None]
    e = radial_band_energy(board)[0, 0]
    assert int(np.argmax(e)) == len(e) - 1 and e[:-1].max() < 1e-20


def test_features_identical_for_same_corpus(corpus):
    for ex in parse_extractors("rp,hf", seed=3):
        assert np.array_equal(extract_features(corpus, ex), extract_features(corpus.copy(), ex))


def test_noise_corpus_farther_than_split(corpus):
    noise = np.random.default_rng(1).uniform(size=corpus.shape)
    ex = FeatureExtractor("random_projection")
    real_a = GaussianStats.fit(extract_features(corpus[:100], ex))
    real_b = GaussianStats.fit(extract_features(corpus[100:], ex))
    noisy = GaussianStats.fit(extract_features(noise[:100], ex))
    assert frechet_distance(noisy, real_b) > frechet_distance(real_a, real_b)


def test_report_reproducible(corpus):
    a = evaluate_images(corpus[:60], corpus[60:], parse_extractors("rp,hf", seed=4), kid_subsets=3)
    b = evaluate_images(corpus[:60], corpus[60:], parse_extractors("rp,hf", seed=4), kid_subsets=3)
    assert a == b
