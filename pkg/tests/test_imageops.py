import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from overnet.errors import ConfigurationError, UsageError
from overnet.imageops import (
    DegradationSpec,
    augment,
    bicubic_resize,
    degrade,
    gaussian_blur,
    gaussian_kernel,
    png_read,
    png_write,
    resize,
    resize_weights,
    rgb_to_y,
    sample_patch,
    scaled_size,
    synthetic_image,
)
from overnet.tensor import Tensor


def keys(x):
    """Independent Keys kernel, a = -1/2, written out piecewise."""
    x = abs(x)
    if x <= 1:
        return 1.5 * x**3 - 2.5 * x**2 + 1
    if x < 2:
        return -0.5 * x**3 + 2.5 * x**2 - 4 * x + 2
    return 0.0


def test_kernel_oracle_values():
    assert keys(0.25) == 0.8671875 and keys(0.75) == 0.2265625
    assert keys(1.25) == -0.0703125 and keys(1.75) == -0.0234375


def test_upscale_weight_row_at_border():
    # output pixel 0 of a x2 upscale sits at source -0.25; taps -2 and -1 clamp to 0
    w = resize_weights(8, 16)
    row = np.zeros(8)
    for j in range(-2, 2):
        row[min(max(j, 0), 7)] += keys(j + 0.25)
    np.testing.assert_allclose(w[0], row, atol=1e-15)
    np.testing.assert_allclose(w[0, :2], [1.0703125, -0.0703125], atol=1e-15)


def test_interior_upscale_row():
    w = resize_weights(10, 20)
    # output 9 -> source 4.25: taps 3..6 with distances 1.25, 0.25, 0.75, 1.75
    expected = [keys(1.25), keys(0.25), keys(0.75), keys(1.75)]
    np.testing.assert_allclose(w[9, 3:7], expected, atol=1e-15)
    assert np.count_nonzero(w[9]) == 4


@settings(max_examples=60, deadline=None)
@given(n_in=st.integers(1, 64), n_out=st.integers(1, 64), kind=st.sampled_from(["cubic", "linear"]))
def test_weight_rows_sum_to_one(n_in, n_out, kind):
    w = resize_weights(n_in, n_out, kind)
    assert w.shape == (n_out, n_in)
    assert np.abs(w.sum(axis=1) - 1).max() <= 1e-9


@settings(max_examples=30, deadline=None)
@given(h=st.integers(2, 30), w=st.integers(2, 30), oh=st.integers(1, 60), ow=st.integers(1, 60),
       c=st.floats(0, 1))
def test_constant_image_preserved(h, w, oh, ow, c):
    img = np.full((3, h, w), c)
    out = bicubic_resize(img, oh, ow)
    assert np.abs(out - c).max() <= 1e-6


@pytest.mark.parametrize("axis", [1, 2])
def test_linear_ramp_reproduced_on_upscale(axis):
    n = 24
    ramp = np.linspace(0.1, 0.9, n)
    img = np.array(np.broadcast_to(ramp[None, :, None] if axis == 1 else ramp[None, None, :], (1, n, n)))
    out = resize(Tensor(img[None]), 2 * n, 2 * n).data[0, 0]
    step = ramp[1] - ramp[0]
    pos = (np.arange(2 * n) + 0.5) / 2 - 0.5
    expected = ramp[0] + step * pos
    # two source pixels of margin keep every tap inside the image
    inner = slice(6, 2 * n - 6)
    line = out[:, 3] if axis == 1 else out[3, :]
    np.testing.assert_allclose(line[inner], expected[inner], atol=1e-5)


def test_down_then_up_on_smooth_content():
    yy, xx = np.mgrid[0:64, 0:64] / 64
    img = 0.5 + 0.3 * np.sin(2 * np.pi * yy) * np.cos(2 * np.pi * xx)
    img = np.stack([img] * 3)
    back = bicubic_resize(bicubic_resize(img, 32, 32), 64, 64)
    assert np.abs(back - img).mean() < 0.01


def test_bicubic_resize_clamps_and_rejects_zero_size():
    img = np.zeros((1, 8, 8))
    img[:, 4:, :] = 1.0
    out = bicubic_resize(img, 16, 16)
    assert out.min() >= 0.0 and out.max() <= 1.0
    # the unclamped resize overshoots at a hard edge
    raw = resize(Tensor(img[None]), 16, 16).data
    assert raw.max() > 1.0
    with pytest.raises(UsageError):
        bicubic_resize(img, 0, 4)


def test_scaled_size_rounding():
    assert scaled_size(40, Fraction(5, 2)) == 100
    assert scaled_size(5, Fraction(3, 2)) == 8  # 7.5 rounds half up
    assert scaled_size(7, Fraction(1, 2)) == 4
    assert scaled_size(33, 3) == 99


# --- degradations ------------------------------------------------------------


def test_gaussian_kernel_center():
    k = gaussian_kernel(7, 1.6)
    total = sum(math.exp(-(i * i + j * j) / (2 * 1.6**2)) for i in range(-3, 4) for j in range(-3, 4))
    assert abs(k[3, 3] - 1 / total) < 1e-12
    assert abs(k.sum() - 1) < 1e-12


def test_blur_preserves_constant():
    img = np.full((3, 12, 10), 0.3)
    np.testing.assert_allclose(gaussian_blur(img), 0.3, atol=1e-12)


def test_bi_shape_and_constant():
    img = np.full((3, 64, 48), 0.4, dtype=np.float32)
    lr = degrade(img, DegradationSpec("BI", 4))
    assert lr.shape == (3, 16, 12)
    np.testing.assert_allclose(lr, 0.4, atol=1e-6)


def test_dn_with_zero_noise_equals_bi():
    img = synthetic_image(48, 48, seed=3)
    bi = degrade(img, DegradationSpec("BI", 3))
    dn = degrade(img, DegradationSpec("DN", 3, noise_level=0), rng_seed=11)
    assert np.array_equal(bi, dn)


def test_dn_noise_level_and_purity():
    img = np.full((3, 200, 200), 0.5, dtype=np.float32)
    spec = DegradationSpec("DN", 2, noise_level=30)
    a = degrade(img, spec, rng_seed=5)
    assert np.array_equal(a, degrade(img, spec, rng_seed=5))
    assert not np.array_equal(a, degrade(img, spec, rng_seed=6))
    assert abs(float((a - 0.5).std()) - 30 / 255) < 0.005


def test_bd_orders():
    img = synthetic_image(60, 60, seed=1)
    spec = DegradationSpec.bd()
    assert spec.scale == 3
    down_blur = degrade(img, spec)
    np.testing.assert_allclose(down_blur, np.clip(gaussian_blur(bicubic_resize(img, 20, 20)), 0, 1), atol=1e-6)
    blur_down = degrade(img, DegradationSpec.bd(bd_order="blur_down"))
    np.testing.assert_allclose(blur_down, bicubic_resize(gaussian_blur(img), 20, 20), atol=1e-6)


def test_degrade_input_untouched_and_small_image_rejected():
    img = synthetic_image(32, 32, seed=2)
    before = img.copy()
    degrade(img, DegradationSpec("DN", 2), rng_seed=1)
    assert np.array_equal(img, before)
    with pytest.raises(UsageError):
        degrade(np.zeros((3, 20, 20)), DegradationSpec("BI", 4))


def test_degradation_spec_validation():
    with pytest.raises(ConfigurationError):
        DegradationSpec("XX", 2)
    with pytest.raises(ConfigurationError):
        DegradationSpec("BD", 3, kernel_size=6)
    with pytest.raises(ConfigurationError):
        DegradationSpec("BI", 1)


# --- colour -------------------------------------------------------------------


def test_rgb_to_y_reference_values():
    def y(rgb):
        return rgb_to_y(np.array(rgb, dtype=np.float64).reshape(3, 1, 1))[0, 0]

    assert abs(y([0, 0, 0]) - 16.0) < 1e-9
    assert abs(y([1, 1, 1]) - 235.0) < 1e-9
    assert abs(y([0, 1, 0]) - 144.553) < 1e-9
    with pytest.raises(UsageError):
        rgb_to_y(np.zeros((4, 2, 2)))


# --- patches ------------------------------------------------------------------


def _box_down(img, s):
    c, h, w = img.shape
    return img.reshape(c, h // s, s, w // s, s).mean(axis=(2, 4))


@pytest.mark.parametrize("seed", range(8))
def test_patches_are_aligned_under_augmentation(seed):
    s = 3
    hr = np.random.default_rng(100).uniform(size=(3, 30 * s, 24 * s))
    lr = _box_down(hr, s)
    lp, hp = sample_patch(hr, lr, 8, s, rng_seed=seed)
    assert lp.shape == (3, 8, 8) and hp.shape == (3, 24, 24)
    # box averaging commutes with flips and quarter turns
    np.testing.assert_allclose(lp, _box_down(hp, s), atol=1e-12)


def test_patch_sampling_deterministic():
    hr = np.random.default_rng(1).uniform(size=(3, 64, 64))
    lr = _box_down(hr, 2)
    a = sample_patch(hr, lr, 10, 2, rng_seed=42)
    b = sample_patch(hr, lr, 10, 2, rng_seed=42)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_flip_is_an_involution():
    img = np.random.default_rng(0).uniform(size=(3, 5, 7))
    assert np.array_equal(augment(augment(img, True, False), True, False), img)
    four = img
    for _ in range(4):
        four = augment(four, False, True)
    assert np.array_equal(four, img)


def test_sample_patch_rejects_misaligned_pair():
    with pytest.raises(UsageError):
        sample_patch(np.zeros((3, 20, 20)), np.zeros((3, 9, 10)), 4, 2)


# --- PNG --------------------------------------------------------------------------


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(3, 9, 13)).astype(np.float32)
    png_write(tmp_path / "a.png", img)
    back = png_read(tmp_path / "a.png")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7
    png_write(tmp_path / "b.png", back)
    assert np.array_equal(png_read(tmp_path / "b.png"), back)


def test_png_single_red_pixel(tmp_path):
    png_write(tmp_path / "r.png", np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1))
    np.testing.assert_array_equal(png_read(tmp_path / "r.png")[:, 0, 0], [1.0, 0.0, 0.0])


def test_png_malformed_file_names_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    with pytest.raises(OSError, match="broken.png"):
        png_read(bad)
