import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lusphase.errors import ParameterError
from lusphase.frst import (FRSTParams, frst_transform, gaussian_kernel, radial_symmetry_pair,
                           sobel_gradient)
from oracles import disc_image, frst_loops, sobel_loops


def peak(img):
    y, x = np.unravel_index(np.argmax(img), img.shape)
    return x, y


def test_defaults():
    p = FRSTParams()
    assert p.radii == (2, 4, 6, 8, 10)
    assert (p.radial_strictness, p.gradient_threshold, p.polarity) == (2.0, 0.05, "bright")
    assert (p.kappa_for(1), p.kappa_for(2), p.sigma_for(8)) == (8.0, 9.9, 2.0)


@pytest.mark.parametrize("bad", [dict(radii=()), dict(radii=(0,)), dict(radii=(2.5,)),
                                 dict(radial_strictness=0.5), dict(gradient_threshold=1.0),
                                 dict(polarity="sideways")])
def test_param_validation(bad):
    with pytest.raises(ParameterError):
        FRSTParams(**bad)


def test_radius_must_fit():
    with pytest.raises(ParameterError):
        frst_transform(np.zeros((20, 20)), FRSTParams(radii=(10,)))


def test_gaussian_kernel():
    k = gaussian_kernel(1.5)
    assert k.size == 11 and k.sum() == pytest.approx(1.0) and np.all(k == k[::-1])
    assert gaussian_kernel(0.25).size == 3


def test_sobel_constant():
    gx, gy = sobel_gradient(np.full((6, 7), 0.3))
    assert not gx.any() and not gy.any()


def test_sobel_ramp():
    w = 12
    ramp = np.tile(np.arange(w) / (w - 1), (9, 1))
    gx, gy = sobel_gradient(ramp)
    np.testing.assert_allclose(gx[:, 1:-1], 8 / (w - 1), rtol=1e-12)
    assert np.max(np.abs(gy)) <= 1e-12


def test_sobel_matches_loops(rng):
    img = rng.random((9, 13))
    for fast, slow in zip(sobel_gradient(img), sobel_loops(img)):
        assert np.max(np.abs(fast - slow)) <= 1e-12


def test_sobel_transpose_symmetry(rng):
    img = rng.random((8, 11))
    gx, gy = sobel_gradient(img)
    tx, ty = sobel_gradient(img.T)
    np.testing.assert_array_equal(tx, gy.T)
    np.testing.assert_array_equal(ty, gx.T)


def test_constant_image_gives_zero():
    assert not frst_transform(np.full((32, 32), 0.7)).any()


@pytest.mark.parametrize("polarity", ["bright", "dark", "both"])
def test_matches_voting_oracle(rng, polarity):
    params = FRSTParams(polarity=polarity)
    for _ in range(5):
        img = rng.random((32, 32))
        assert np.max(np.abs(frst_transform(img, params) - frst_loops(img, polarity=polarity))) <= 1e-6


def test_matches_oracle_on_structured_input():
    img = disc_image(32, 15.3, 16.8, 5) * 0.8 + disc_image(32, 8, 8, 2) * 0.2
    params = FRSTParams(radii=(1, 3, 5), radial_strictness=3, gradient_threshold=0.2)
    ref = frst_loops(img, radii=(1, 3, 5), alpha=3, threshold=0.2)
    assert np.max(np.abs(frst_transform(img, params) - ref)) <= 1e-6


def test_bright_disc_center():
    cx, cy = 31.6, 32.3
    s = frst_transform(disc_image(64, cx, cy, 6), FRSTParams(radii=(6,)))
    x, y = peak(s)
    assert np.hypot(x - cx, y - cy) <= 1


def test_dark_polarity_misses_center():
    cx, cy = 31.6, 32.3
    s = frst_transform(disc_image(64, cx, cy, 6), FRSTParams(radii=(6,), polarity="dark"))
    x, y = peak(s)
    assert np.hypot(x - cx, y - cy) > 1


def test_translation_equivariance(rng):
    img = np.zeros((64, 64))
    img[20:44, 20:44] = rng.random((24, 24))
    params = FRSTParams(radii=(2, 4, 6))
    s = frst_transform(img, params)
    for dy, dx in ((3, -2), (-4, 5), (0, 1)):
        moved = frst_transform(np.roll(img, (dy, dx), axis=(0, 1)), params)
        m = 6
        diff = np.roll(s, (dy, dx), axis=(0, 1))[m:-m, m:-m] - moved[m:-m, m:-m]
        assert np.max(np.abs(diff)) <= 1e-6


def test_rotation_equivariance(rng):
    img = rng.random((40, 40))
    s = frst_transform(img)
    for k in (1, 2, 3):
        rot = frst_transform(np.rot90(img, k))
        m = 10
        assert np.max(np.abs(np.rot90(s, k) - rot)[m:-m, m:-m]) <= 1e-6


def test_votes_outside_raster_are_discarded():
    # A disc cut by the border: with no wrap-around, the opposite edge stays empty.
    img = disc_image(40, 2, 20, 6)
    s = frst_transform(img, FRSTParams(radii=(6,)))
    assert np.all(s[:, -5:] == s.min())


def test_pair_is_composition(rng):
    a, b = rng.random((24, 24)), rng.random((24, 24))
    p = FRSTParams(radii=(2, 4))
    s1, s2 = radial_symmetry_pair(a, b, p)
    np.testing.assert_array_equal(s1, frst_transform(a, p))
    np.testing.assert_array_equal(s2, frst_transform(b, p))
    z1, z2 = radial_symmetry_pair(np.zeros((24, 24)), np.zeros((24, 24)), p)
    assert not z1.any() and not z2.any()
    r1, r2 = radial_symmetry_pair(a, a, p)
    np.testing.assert_array_equal(r1, r2)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_output_range(seed):
    s = frst_transform(np.random.default_rng(seed).random((24, 24)), FRSTParams(radii=(2, 4)))
    assert s.min() == 0.0 and s.max() == 1.0
