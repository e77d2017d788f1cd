import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttasr.image import (
    PSNR_INF,
    ChannelError,
    DimensionError,
    ParameterError,
    SizeError,
    bicubic_resample,
    dihedral,
    dihedral_inverse,
    psnr,
    read_png,
    sample_patch,
    ssim,
    to_luminance,
    write_png,
)


def const(h, w, c, v):
    return np.full((h, w, c), float(v))


# --- luminance -------------------------------------------------------------


def test_luminance_of_black_is_offset():
    y = to_luminance(const(4, 5, 3, 0.0))
    assert y.shape == (4, 5, 1)
    assert np.all(y == 16 / 255)


def test_luminance_of_white():
    expected = 0.257 + 0.504 + 0.098 + 16 / 255
    assert np.allclose(to_luminance(const(2, 2, 3, 1.0)), expected, rtol=0, atol=1e-15)
    assert expected == pytest.approx(0.921745, abs=1e-6)


def test_luminance_of_grey():
    expected = 0.859 * 0.5 + 16 / 255
    assert np.allclose(to_luminance(const(2, 2, 3, 0.5)), expected, rtol=0, atol=1e-15)
    assert expected == pytest.approx(0.4922451, abs=1e-7)


def test_luminance_rejects_single_channel():
    with pytest.raises(ChannelError):
        to_luminance(const(3, 3, 1, 0.2))


# --- psnr ------------------------------------------------------------------


def test_psnr_identical_is_infinite():
    x = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(x, x, 0) == PSNR_INF


def test_psnr_uniform_offset():
    a = const(6, 7, 1, 0.3)
    assert psnr(a, a + 0.1, 0) == pytest.approx(20.0, abs=1e-9)


def test_psnr_black_vs_white():
    assert psnr(const(5, 5, 1, 0), const(5, 5, 1, 1), 0) == pytest.approx(0.0, abs=1e-12)


def test_psnr_shave_ignores_border():
    a = const(10, 10, 1, 0.5)
    b = a.copy()
    b[:2] = 0.0
    assert psnr(a, b, 2) == PSNR_INF
    assert math.isfinite(psnr(a, b, 1))


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(const(4, 4, 1, 0), const(4, 5, 1, 0), 0)


def test_psnr_bad_shave():
    with pytest.raises(ParameterError):
        psnr(const(4, 4, 1, 0), const(4, 4, 1, 0), 2)


def test_psnr_rgb_option():
    rng = np.random.default_rng(3)
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    mse = np.mean((a - b) ** 2)
    assert psnr(a, b, 0, use_y=False) == pytest.approx(10 * math.log10(1 / mse), rel=1e-12)


images = arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1))


@settings(max_examples=50, deadline=None)
@given(images, images, st.integers(0, 5))
def test_psnr_symmetric(a, b, shave):
    assert psnr(a, b, shave) == psnr(b, a, shave)


def test_psnr_decreases_with_noise_amplitude():
    rng = np.random.default_rng(7)
    x = 0.25 + 0.5 * rng.random((32, 32, 3))
    noise = rng.uniform(-1, 1, size=x.shape)
    scores = [psnr(x, np.clip(x + amp * noise, 0, 1), 0) for amp in (0.01, 0.02, 0.05)]
    assert scores[0] > scores[1] > scores[2]


# --- ssim ------------------------------------------------------------------


def scalar_ssim(x, y):
    """Straight-from-the-formula SSIM on a single plane, valid windows only."""
    size, sigma = 11, 1.5
    half = size // 2
    g = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2)) for j in range(size)] for i in range(size)]
    z = sum(sum(row) for row in g)
    c1, c2 = 0.01**2, 0.03**2
    h, w = x.shape
    vals = []
    for r in range(h - size + 1):
        for c in range(w - size + 1):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(size):
                for j in range(size):
                    wt = g[i][j] / z
                    a, b = x[r + i, c + j], y[r + i, c + j]
                    mx += wt * a
                    my += wt * b
                    sxx += wt * a * a
                    syy += wt * b * b
                    sxy += wt * a * b
            vx, vy, cov = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def test_ssim_identical_is_one():
    x = np.random.default_rng(1).random((16, 16, 3))
    assert ssim(x, x) == 1.0


def test_ssim_constants_luminance_term_only():
    a, b, c1 = 0.25, 0.75, 1e-4
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    got = ssim(const(16, 16, 1, a), const(16, 16, 1, b))
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.600064, abs=1e-6)


def test_ssim_against_scalar_oracle():
    rng = np.random.default_rng(11)
    a = 0.5 + 0.3 * (rng.random((14, 13)) - 0.5)
    x, y = a[:, :, None], (1 - a)[:, :, None]
    assert ssim(x, y) == pytest.approx(scalar_ssim(a, 1 - a), abs=1e-12)
    noisy = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(x, noisy[:, :, None]) == pytest.approx(scalar_ssim(a, noisy), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(images, images)
def test_ssim_symmetric(a, b):
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(SizeError):
        ssim(const(10, 12, 1, 0), const(10, 12, 1, 0))


# --- bicubic ---------------------------------------------------------------


def keys(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def test_scale_one_is_identity():
    x = np.random.default_rng(2).random((9, 7, 3))
    assert np.array_equal(bicubic_resample(x, 1), x)


@pytest.mark.parametrize("value", [0.0, 0.5, 1.0])
@pytest.mark.parametrize("scale", [0.5, 1 / 3, 0.75, 1.5, 2, 3, 4])
def test_constant_preserved(value, scale):
    out = bicubic_resample(const(12, 10, 3, value), scale)
    assert np.max(np.abs(out - value)) < 1e-6


def impulse_oracle(n, pos, i):
    """Value at output ``i`` of a 1/2 downsample of a unit impulse at ``pos``."""
    center = (i + 0.5) / 0.5 - 0.5
    taps = range(math.floor(center - 4), math.ceil(center + 4) + 1)
    weights = {j: keys((j - center) * 0.5) for j in taps}
    return weights.get(pos, 0.0) / sum(weights.values())


def test_impulse_downsample_tap_pattern():
    n, pos = 24, 11
    row = np.zeros((1, n, 1))
    row[0, pos, 0] = 1.0
    out = bicubic_resample(row, 0.5)[0, :, 0]
    assert out.shape == (12,)
    raw = [impulse_oracle(n, pos, i) for i in range(12)]
    assert min(raw) < 0  # the stretched kernel has negative lobes ...
    for i in range(12):
        assert out[i] == pytest.approx(max(raw[i], 0.0), abs=1e-12)  # ... clamped away in the image


def test_output_size_rounding():
    assert bicubic_resample(const(7, 5, 1, 0.3), 0.5).shape == (4, 3, 1)
    assert bicubic_resample(const(7, 5, 1, 0.3), 2).shape == (14, 10, 1)


def test_non_positive_scale_rejected():
    with pytest.raises(ParameterError):
        bicubic_resample(const(4, 4, 1, 0), 0)
    with pytest.raises(ParameterError):
        bicubic_resample(const(4, 4, 1, 0), -2)


@pytest.mark.parametrize("kind", ["constant", "ramp"])
def test_up_then_down_reproduces_band_limited(kind):
    h, w = 32, 40
    if kind == "constant":
        x = const(h, w, 1, 0.4)
    else:
        rr, cc = np.mgrid[0:h, 0:w]
        x = (0.1 + 0.01 * rr + 0.008 * cc)[:, :, None]
    back = bicubic_resample(bicubic_resample(x, 2), 0.5)
    assert np.max(np.abs(back - x)[4:-4, 4:-4]) < 1e-3


# --- patches ---------------------------------------------------------------


@pytest.mark.parametrize("code", range(8))
def test_dihedral_inverse(code):
    x = np.random.default_rng(code).random((5, 7, 3))
    assert np.array_equal(dihedral_inverse(dihedral(x, code), code), x)


def test_dihedral_elements_distinct():
    x = np.arange(12.0).reshape(3, 4, 1)
    forms = {dihedral(x, c).tobytes() + bytes(dihedral(x, c).shape) for c in range(8)}
    assert len(forms) == 8


def test_patch_full_size_origin_zero():
    x = np.random.default_rng(0).random((6, 9, 1))
    p = sample_patch(x, 6, np.random.default_rng(5))
    assert (p.origin_row, p.origin_col) == (0, p.origin_col)
    assert p.origin_row == 0
    sq = np.random.default_rng(0).random((6, 6, 1))
    p = sample_patch(sq, 6, np.random.default_rng(5))
    assert (p.origin_row, p.origin_col) == (0, 0)


def test_patch_determinism():
    x = np.random.default_rng(0).random((20, 20, 3))
    a = sample_patch(x, 8, np.random.default_rng(42), augment=True)
    b = sample_patch(x, 8, np.random.default_rng(42), augment=True)
    assert (a.origin_row, a.origin_col, a.augment_code) == (b.origin_row, b.origin_col, b.augment_code)
    assert np.array_equal(a.image, b.image)


def test_patch_advances_rng():
    x = np.random.default_rng(0).random((30, 30, 1))
    rng = np.random.default_rng(1)
    draws = {(p.origin_row, p.origin_col) for p in (sample_patch(x, 4, rng) for _ in range(20))}
    assert len(draws) > 1


def test_patch_augment_recovers_crop():
    x = np.random.default_rng(0).random((20, 20, 3))
    rng = np.random.default_rng(9)
    for _ in range(20):
        p = sample_patch(x, 7, rng, augment=True)
        assert 0 <= p.augment_code < 8
        crop = x[p.origin_row : p.origin_row + 7, p.origin_col : p.origin_col + 7]
        assert np.array_equal(dihedral_inverse(p.image, p.augment_code), crop)


def test_patch_never_out_of_bounds_exhaustive():
    for h in range(1, 9):
        for w in range(1, 9):
            img = np.zeros((h, w, 1))
            for size in range(1, min(h, w) + 1):
                rng = np.random.default_rng(h * 100 + w * 10 + size)
                for _ in range(10):
                    p = sample_patch(img, size, rng, augment=True)
                    assert 0 <= p.origin_row <= h - size
                    assert 0 <= p.origin_col <= w - size
                    assert p.image.shape == (size, size, 1)


def test_patch_too_large():
    with pytest.raises(SizeError):
        sample_patch(np.zeros((5, 8, 1)), 6, np.random.default_rng(0))


# --- io --------------------------------------------------------------------


def test_png_round_trip(tmp_path):
    x = np.round(np.random.default_rng(0).random((5, 6, 3)) * 255) / 255
    write_png(tmp_path / "a.png", x)
    assert np.array_equal(read_png(tmp_path / "a.png"), x)
    g = x[:, :, :1]
    write_png(tmp_path / "g.png", g)
    assert np.array_equal(read_png(tmp_path / "g.png"), g)
