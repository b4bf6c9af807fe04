import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.fft import dctn

from prepguard import codecs as C
from prepguard import data as D

images = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12), st.sampled_from([1, 3])),
                elements=st.floats(0, 1))


@pytest.fixture(scope="module")
def seeded_images():
    return D.synth_dataset(50, 10, 32, 32, seed=2024).images


def test_dct_matrix_matches_scipy(rng):
    for n in (4, 8):
        block = rng.normal(size=(n, n))
        d = C.dct_matrix(n)
        np.testing.assert_allclose(d @ block @ d.T, dctn(block, type=2, norm="ortho"), atol=1e-12)
        np.testing.assert_allclose(d @ d.T, np.eye(n), atol=1e-14)


def test_jpeg_table_scaling():
    assert np.array_equal(C.jpeg_quant_table(50), C.STD_LUMINANCE_TABLE)
    assert np.all(C.jpeg_quant_table(100) == 1)
    # qf=10: scale 500, (16 * 500 + 50) // 100 = 80
    assert C.jpeg_quant_table(10)[0, 0] == 80
    assert C.jpeg_quant_table(1).max() == 255
    for q in range(1, 100):
        assert np.all(C.jpeg_quant_table(q) >= C.jpeg_quant_table(q + 1))
        assert np.all(C.webp_quant_table(q) >= C.webp_quant_table(q + 1))


def test_webp_step_values():
    assert C.webp_step(100) == 1
    assert C.webp_step(70) == 20  # 1 + 30 * 0.63 = 19.9
    assert C.webp_step(0) == 64
    assert C.webp_quant_table(70)[0, 0] == 10
    assert C.filter_threshold(100) == 2 and C.filter_threshold(50) == 7 and C.filter_threshold(0) == 12


@pytest.mark.parametrize("qf", [-1, 101, 2.5, True])
def test_bad_quality_factor(qf):
    with pytest.raises(ValueError):
        C.jpeg_like_roundtrip(np.zeros((8, 8, 1)), qf)


def test_deblock_hand_example():
    # one row, p1 p0 | q0 q1 = 100 100 | 104 104 at qf 50: T = 7,
    # a = 3*4 + (100-104) = 8, d = round(8/8) = 1 -> 101 | 103
    row = np.array([100, 100, 100, 100, 104, 104, 104, 104], dtype=float)
    img = np.tile(row, (1, 1))[..., None] / 255.0
    out = C.deblock_edges(img, 50)[0, :, 0] * 255.0
    np.testing.assert_allclose(out, [100, 100, 100, 101, 103, 104, 104, 104], atol=1e-9)


def test_deblock_keeps_true_edges():
    row = np.array([50, 50, 50, 50, 200, 200, 200, 200], dtype=float)
    img = row[None, :, None] / 255.0
    assert np.array_equal(C.deblock_edges(img, 10), img)


def test_deblock_reduces_blocking():
    # a smooth gradient quantized per 4x4 block: a staircase
    ramp = np.linspace(0.3, 0.6, 32)  # block-to-block steps of about 5 levels, under T(30)
    grad = np.add.outer(ramp, ramp)[..., None] / 2
    blocky = np.repeat(np.repeat(grad[::4, ::4], 4, axis=0), 4, axis=1)
    before = C.boundary_discontinuity(blocky, 4)
    after = C.boundary_discontinuity(C.deblock_edges(blocky, 30), 4)
    assert after < before


@given(st.floats(0, 1), st.integers(1, 20), st.integers(1, 20), st.integers(0, 100))
def test_flat_images(v, h, w, qf):
    img = np.full((h, w, 3), v)
    assert np.array_equal(C.deblock_edges(img, qf), img)
    for codec, table, b in (("jpeg", C.jpeg_quant_table(qf), 8), ("webp", C.webp_quant_table(qf), 4)):
        out = C.roundtrip(codec, img, qf)
        assert np.ptp(out) <= 1e-9
        # only the DC coefficient (b * level) survives, off by at most half its step
        assert np.abs(out - v).max() * 255 <= table[0, 0] / 2 / b + 1e-9


def test_flat_image_within_one_level_at_qf50():
    img = np.full((16, 16, 3), 0.37)
    assert np.abs(C.jpeg_like_roundtrip(img, 50) - img).max() <= 1 / 255


@settings(max_examples=50)
@given(images)
def test_flips_are_value_preserving_involutions(img):
    for f in (C.flip_lr, C.flip_tb):
        assert np.array_equal(f(f(img)), img)
        assert np.array_equal(np.sort(f(img), axis=None), np.sort(img, axis=None))


def test_flip_index_mapping():
    img = np.array([[[0.1], [0.9]]])
    assert np.array_equal(C.flip_lr(img), [[[0.9], [0.1]]])
    single = np.random.default_rng(0).random((5, 1, 3))
    assert np.array_equal(C.flip_lr(single), single)
    assert np.array_equal(C.flip_tb(single[:1]), single[:1])


@settings(max_examples=50)
@given(images, images)
def test_psnr_symmetry(a, b):
    if a.shape == b.shape:
        assert C.psnr(a, b) == C.psnr(b, a)
    assert C.psnr(a, a) == math.inf


def test_psnr_values(rng):
    assert C.psnr(np.zeros((4, 4, 1)), np.ones((4, 4, 1))) == 0.0
    x = rng.random((16, 16, 3)) * 0.5 + 0.25
    noisy = x + rng.choice([-1.0, 1.0], size=x.shape) / 255
    assert C.psnr(x, noisy) == pytest.approx(20 * math.log10(255), abs=1e-9)
    with pytest.raises(ValueError):
        C.psnr(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)))


@settings(max_examples=30, deadline=None)
@given(images, st.integers(0, 100))
def test_codecs_total_and_in_range(img, qf):
    for codec in ("jpeg", "webp"):
        out = C.roundtrip(codec, img, qf)
        assert out.shape == img.shape
        assert out.min() >= 0 and out.max() <= 1
        assert np.array_equal(out, C.roundtrip(codec, img, qf))


def test_qf100_error_bound(seeded_images):
    for img in seeded_images:
        assert np.abs(C.jpeg_like_roundtrip(img, 100) - img).max() <= 2 / 255
        assert np.abs(C.webp_like_roundtrip(img, 100) - img).max() <= 2 / 255


def test_idempotence_bound(seeded_images):
    # a second pass moves pixels by less than the codec's own qf=100 bound
    # scaled to the first-pass error at the same qf
    for qf in (10, 50, 90):
        for img in seeded_images[:10]:
            for codec in ("jpeg", "webp"):
                once = C.roundtrip(codec, img, qf)
                twice = C.roundtrip(codec, once, qf)
                assert np.abs(twice - once).max() <= np.abs(once - img).max() + 1e-12


def test_psnr_monotone_in_qf(seeded_images):
    for codec in ("jpeg", "webp"):
        means = [np.mean([C.psnr(i, C.roundtrip(codec, i, q)) for i in seeded_images])
                 for q in (100, 80, 60, 40, 20, 10)]
        assert all(a >= b for a, b in zip(means, means[1:])), means


def test_webp_quality_and_blockiness_vs_jpeg(seeded_images):
    for qf in (10, 20, 30, 40):
        pw = np.mean([C.psnr(i, C.webp_like_roundtrip(i, qf)) for i in seeded_images])
        pj = np.mean([C.psnr(i, C.jpeg_like_roundtrip(i, qf)) for i in seeded_images])
        assert pw >= pj
        bw = np.mean([C.boundary_discontinuity(C.webp_like_roundtrip(i, qf), 4) for i in seeded_images])
        bj = np.mean([C.boundary_discontinuity(C.jpeg_like_roundtrip(i, qf), 8) for i in seeded_images])
        assert bw < bj


def test_boundary_statistic_flat_is_zero():
    assert C.boundary_discontinuity(np.full((8, 8, 1), 0.3)) == 0.0
    assert C.boundary_discontinuity(np.full((3, 3, 1), 0.3)) == 0.0


def test_deblock_flat_identity_off_grid():
    for v in np.random.default_rng(5).random(200):
        img = np.full((5, 9, 3), v)
        assert np.array_equal(C.deblock_edges(img, 40), img)
