import numpy as np
import pytest
from hypothesis import given, strategies as st

from sfolab.fft import circular_convolve, circular_correlate, fft, fft_nd, ifft, ifft_nd, is_power_of_two


def direct_convolve(u, k):
    # summed over the lag m so a shift of u permutes the terms exactly
    n = len(u)
    return np.array([sum(k[m] * u[(i - m) % n] for m in range(n)) for i in range(n)])


def test_delta_and_constant():
    assert np.allclose(fft([1, 0, 0, 0]), [1, 1, 1, 1], atol=0)
    X = fft(np.full(16, 2.5))
    assert X[0] == pytest.approx(40.0)
    assert np.abs(X[1:]).max() <= 1e-13


@pytest.mark.parametrize("n", [1, 2, 4, 8, 16, 64, 1024])
def test_matches_dft(rng, n):
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    k = np.arange(n)
    F = np.exp(-2j * np.pi * np.outer(k, k) / n)
    assert np.abs(fft(x) - F @ x).max() <= 1e-12 * max(1, n)
    assert np.abs(ifft(fft(x)) - x).max() <= 1e-12 * np.abs(x).max()


def test_round_trip_64(rng):
    x = rng.standard_normal(64)
    assert np.abs(ifft(fft(x)) - x).max() <= 1e-12


def test_axis_argument(rng):
    x = rng.standard_normal((4, 8, 16))
    for axis in range(3):
        ref = np.fft.fft(x, axis=axis)
        assert np.abs(fft(x, axis=axis) - ref).max() <= 1e-12


def test_non_power_of_two():
    with pytest.raises(ValueError):
        fft(np.ones(6))
    with pytest.raises(ValueError):
        fft_nd(np.ones((8, 12)))
    assert is_power_of_two(1) and is_power_of_two(64) and not is_power_of_two(0) and not is_power_of_two(24)


def test_nd_examples(rng):
    d = np.zeros((8, 8))
    d[0, 0] = 1.0
    assert np.abs(fft_nd(d) - 1.0).max() == 0.0
    f, g = rng.standard_normal(16), rng.standard_normal(8)
    F = fft_nd(np.outer(f, g))
    ref = np.outer(fft(f), fft(g))
    assert np.abs(F - ref).max() <= 1e-12 * np.abs(ref).max()
    x = rng.standard_normal((16, 16))
    assert np.abs(ifft_nd(fft_nd(x)) - x).max() <= 1e-12
    # axis order does not matter
    y = rng.standard_normal((3, 16, 8))
    a = fft(fft(y, axis=1), axis=2)
    b = fft(fft(y, axis=2), axis=1)
    assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()
    assert np.abs(fft_nd(y, axes=(1, 2)) - a).max() <= 1e-12 * np.abs(a).max()


def test_convolve_examples():
    assert np.allclose(circular_convolve([1, 2, 3, 4], [1, 0, 0, 0]), [1, 2, 3, 4], atol=1e-15)
    assert np.allclose(circular_convolve([1, 2, 3, 4], [0, 1, 0, 0]), [4, 1, 2, 3], atol=1e-15)
    with pytest.raises(ValueError):
        circular_convolve(np.ones(4), np.ones(8))


def test_convolve_vs_direct_128(rng):
    u, k = rng.standard_normal(128), rng.standard_normal(128)
    assert np.abs(circular_convolve(u, k) - direct_convolve(u, k)).max() <= 1e-10
    assert np.isrealobj(circular_convolve(u, k))


vectors = st.integers(0, 2 ** 32 - 1).map(lambda s: np.random.default_rng(s))


@given(vectors, st.sampled_from([4, 16, 64]), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(r, n, a, b):
    u, w, k = r.standard_normal((3, n))
    lhs = circular_convolve(a * u + b * w, k)
    rhs = a * circular_convolve(u, k) + b * circular_convolve(w, k)
    assert np.abs(lhs - rhs).max() <= 1e-10


@given(vectors, st.sampled_from([8, 32]), st.integers(0, 31))
def test_shift_commutes(r, n, s):
    u, k = r.standard_normal((2, n))
    assert np.array_equal(direct_convolve(np.roll(u, s), k), np.roll(direct_convolve(u, k), s))
    assert np.abs(circular_convolve(np.roll(u, s), k) - np.roll(circular_convolve(u, k), s)).max() <= 1e-10


@given(vectors, st.sampled_from([2, 8, 128]))
def test_parseval(r, n):
    x = r.standard_normal(n) + 1j * r.standard_normal(n)
    lhs = np.sum(np.abs(x) ** 2)
    rhs = np.sum(np.abs(fft(x)) ** 2) / n
    assert abs(lhs - rhs) <= 1e-12 * lhs


@given(vectors)
def test_correlation_is_adjoint(r):
    u, k, w = r.standard_normal((3, 32))
    assert abs(np.dot(circular_convolve(u, k), w) - np.dot(u, circular_correlate(w, k))) <= 1e-10
