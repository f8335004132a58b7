import numpy as np
import pytest

from snnc.errors import ShapeError
from snnc.mathops import (SeededRng, conv2d, erf, sample_gaussian,
                          std_normal_cdf, std_normal_pdf)

# Reference values computed beforehand with a 50-digit arbitrary-precision
# evaluation of the erf Maclaurin series / incomplete-gamma continuation.
ERF_TABLE = {
    0.046875: 0.05285405915644373347688,
    0.125: 0.140316204801333817393,
    0.25: 0.2763263901682369329851,
    0.46875: 0.4926134732179379915882,
    0.5: 0.5204998778130465376827,
    1.0: 0.8427007929497148693412,
    1.5: 0.966105146475310727067,
    2.0: 0.9953222650189527341621,
    2.5: 0.9995930479825550410604,
    3.0: 0.9999779095030014145586,
    3.5: 0.9999992569016276585873,
    4.0: 0.99999998458274209972,
    4.5: 0.9999999998033839558457,
    5.0: 0.9999999999984625402056,
    5.5: 0.9999999999999926421521,
    6.0: 0.9999999999999999784803,
}
PHI_1 = 0.8413447460685429485852
PHI_HALF = 0.6914624612740131036377
PDF_0 = 0.3989422804014326779399


def test_erf_oracle_table():
    for x, ref in ERF_TABLE.items():
        assert abs(erf(x) - ref) <= 1e-12
        assert abs(erf(-x) + ref) <= 1e-12


def test_erf_trivial_points():
    assert erf(0.0) == 0.0
    assert erf(6.0) > 1 - 1e-9
    assert -1.0 <= erf(-50.0) and erf(50.0) <= 1.0


def test_erf_oddness_property(rng):
    xs = rng.uniform(-6, 6, size=1000)
    assert np.max(np.abs(erf(xs) + erf(-xs))) <= 1e-12


def test_erf_rejects_non_finite():
    for bad in (np.nan, np.inf, -np.inf):
        with pytest.raises(ValueError):
            erf(bad)


def test_cdf_reflection_and_monotone(rng):
    xs = rng.uniform(-6, 6, size=1000)
    assert np.max(np.abs(std_normal_cdf(xs) + std_normal_cdf(-xs) - 1.0)) <= 1e-12
    grid = np.linspace(-8, 8, 2001)
    vals = std_normal_cdf(grid)
    assert np.all(np.diff(vals) >= 0)


def test_cdf_pdf_values():
    assert std_normal_cdf(0.0) == 0.5
    assert abs(std_normal_cdf(1.0) - PHI_1) <= 1e-12
    assert abs(std_normal_cdf(0.5) - PHI_HALF) <= 1e-12
    assert abs(std_normal_pdf(0.0) - PDF_0) <= 1e-12
    with pytest.raises(ValueError):
        std_normal_cdf(np.inf)
    with pytest.raises(ValueError):
        std_normal_pdf(np.nan)


def test_sample_gaussian_degenerate_and_deterministic():
    r = SeededRng(123)
    assert np.array_equal(sample_gaussian(r, (5,), 3.25, 0.0), np.full(5, 3.25))
    a = sample_gaussian(SeededRng(9), (1000,), 0.0, 1.0)
    b = sample_gaussian(SeededRng(9), (1000,), 0.0, 1.0)
    assert np.array_equal(a, b)
    c = sample_gaussian(SeededRng(10), (1000,), 0.0, 1.0)
    assert not np.array_equal(a, c)


def test_sample_gaussian_moments_seed7():
    draws = sample_gaussian(SeededRng(7), (10 ** 6,), 0.0, 1.0)
    assert abs(draws.mean()) <= 0.004  # 4 standard errors
    assert abs(draws.var(ddof=1) - 1.0) <= 0.006


def test_sample_gaussian_rejects_negative_sigma():
    with pytest.raises(ValueError):
        sample_gaussian(SeededRng(1), (3,), 0.0, -0.1)


def test_substreams_are_uncorrelated():
    root = SeededRng(42)
    streams = [sample_gaussian(root.substream(i), (10 ** 5,), 0.0, 1.0)
               for i in range(3)]
    for i in range(3):
        for j in range(i + 1, 3):
            r = np.corrcoef(streams[i], streams[j])[0, 1]
            assert abs(r) <= 0.01


def brute_conv(x, k, b, stride, padding):
    n, c, h, w = x.shape
    oc, ic, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for ni in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[ni, o, i, j] = np.sum(patch * k[o]) + b[o]
    return out


def test_conv2d_identity_and_constant():
    x = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(conv2d(x, np.ones((1, 1)), None), x)
    out = conv2d(np.random.default_rng(0).normal(size=(2, 5, 5)),
                 np.zeros((3, 2, 2, 2)), np.array([1.0, -2.0, 0.5]))
    for ch, bias in enumerate((1.0, -2.0, 0.5)):
        assert np.allclose(out[ch], bias)


def test_conv2d_matches_brute_force(rng):
    x = rng.normal(size=(3, 3))
    k = rng.normal(size=(2, 2))
    got = conv2d(x, k, None)
    want = brute_conv(x[None, None], k[None, None], np.zeros(1), 1, 0)[0, 0]
    assert np.max(np.abs(got - want)) <= 1e-12

    for _ in range(5):
        n, c, oc = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(4, 8), rng.integers(4, 8)
        kh, kw = rng.integers(1, 4), rng.integers(1, 4)
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.normal(size=(n, c, h, w))
        k = rng.normal(size=(oc, c, kh, kw))
        b = rng.normal(size=oc)
        assert np.max(np.abs(conv2d(x, k, b, s, p)
                             - brute_conv(x, k, b, s, p))) <= 1e-12


def test_conv2d_linearity(rng):
    x = rng.normal(size=(2, 6, 6))
    y = rng.normal(size=(2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    a, b = 1.7, -0.4
    lhs = conv2d(a * x + b * y, k, None)
    rhs = a * conv2d(x, k, None) + b * conv2d(y, k, None)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 2, 2)), None)  # channels
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 5, 5)), None)  # too big
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(3))
