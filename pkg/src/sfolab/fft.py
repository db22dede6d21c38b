"""Radix-2 FFT, axis-wise multi-dimensional transforms and circular convolution.

Transforms act on the last axis of an array (or on the axes given) and are
vectorized over all other axes.  Only power-of-two lengths are accepted.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = [
    "is_power_of_two",
    "fft",
    "ifft",
    "fft_nd",
    "ifft_nd",
    "circular_convolve",
    "circular_correlate",
]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_length(n: int) -> None:
    if not is_power_of_two(n):
        raise ValueError(f"FFT length must be a power of two, got {n}")


_LEAF_BITS = 3
CHUNK_ELEMS = 1 << 14   # complex entries per block of rows, sized to stay in cache


def _stage(y, w, lead, n, m, out=None):
    y = y.reshape(*lead, n // (2 * m), 2, m)
    if out is None:
        out = np.empty_like(y)
    else:
        out = out.reshape(y.shape)
    odd = y[..., 1, :] * w
    np.add(y[..., 0, :], odd, out=out[..., 0, :])
    np.subtract(y[..., 0, :], odd, out=out[..., 1, :])
    return out


@lru_cache(maxsize=64)
def _plan(n: int, inverse: bool = False):
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
    sign = 1.0 if inverse else -1.0
    twiddles = []
    m = 1
    while m < n:
        twiddles.append(np.exp(sign * 1j * np.pi * np.arange(m) / m))
        m *= 2
    # The first few butterfly stages act on independent blocks of 2^leaf
    # entries; running them on the identity gives one small matrix that
    # applies all of them at once.
    leaf = min(bits, _LEAF_BITS)
    size = 1 << leaf
    block = np.eye(size, dtype=np.complex128)
    m = 1
    for w in twiddles[:leaf]:
        block = _stage(block, w, (size,), size, m)
        m *= 2
    return rev, block.reshape(size, size), tuple(twiddles[leaf:])


def _fft_last(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized transform along the last axis (exp(+i...) kernel if ``inverse``).

    Rows are transformed in blocks of about ``CHUNK_ELEMS`` entries so every
    butterfly pass works on cache-resident data.
    """
    n = x.shape[-1]
    _check_length(n)
    rev, block, twiddles = _plan(n, inverse)
    lead = x.shape[:-1]
    size = block.shape[0]
    rows = np.asarray(x).reshape(-1, n)
    result = np.empty((rows.shape[0], n), dtype=np.complex128)
    step = max(1, CHUNK_ELEMS // n)
    spare = None
    for start in range(0, rows.shape[0], step):
        chunk = rows[start:start + step]
        r = chunk.shape[0]
        y = np.asarray(chunk[:, rev], dtype=np.complex128).reshape(-1, size) @ block
        if spare is None or spare.size != y.size:
            spare = np.empty_like(y)
        m = size
        for w in twiddles:
            out = _stage(y, w, (r,), n, m, spare)
            spare, y = y, out
            m *= 2
        result[start:start + r] = y.reshape(r, n)
    return result.reshape(*lead, n)


def fft(x, axis: int = -1) -> np.ndarray:
    """Forward DFT ``X[k] = sum_j x[j] exp(-2 pi i jk/n)`` along ``axis``."""
    x = np.asarray(x)
    if x.ndim == 0:
        raise ValueError("fft needs at least one axis")
    return np.moveaxis(_fft_last(np.moveaxis(x, axis, -1)), -1, axis)


def ifft(X, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`fft` (includes the 1/n factor)."""
    X = np.asarray(X, dtype=np.complex128)
    if X.ndim == 0:
        raise ValueError("ifft needs at least one axis")
    n = X.shape[axis]
    out = _fft_last(np.moveaxis(X, axis, -1), inverse=True)
    out /= n
    return np.moveaxis(out, -1, axis)


def _axes(x: np.ndarray, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    return tuple(int(a) % x.ndim for a in axes)


def fft_nd(x, axes=None) -> np.ndarray:
    """Apply :func:`fft` along each listed axis in order (all axes by default)."""
    y = np.asarray(x)
    for a in _axes(y, axes):
        y = fft(y, axis=a)
    return y


def ifft_nd(X, axes=None) -> np.ndarray:
    y = np.asarray(X, dtype=np.complex128)
    for a in _axes(y, axes):
        y = ifft(y, axis=a)
    return y


def circular_convolve(u, k) -> np.ndarray:
    """``out[i] = sum_j k[(i-j) mod n] u[j]`` for real vectors via the FFT."""
    u = np.asarray(u, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if u.shape[-1] != k.shape[-1]:
        raise ValueError(f"length mismatch: {u.shape[-1]} vs {k.shape[-1]}")
    return np.real(ifft(fft(u) * fft(k)))


def circular_correlate(w, k) -> np.ndarray:
    """Adjoint of convolution with ``k``: ``out[j] = sum_i k[(i-j) mod n] w[i]``."""
    w = np.asarray(w, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if w.shape[-1] != k.shape[-1]:
        raise ValueError(f"length mismatch: {w.shape[-1]} vs {k.shape[-1]}")
    return np.real(ifft(fft(w) * np.conj(fft(k))))
