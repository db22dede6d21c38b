"""Fixed orthonormal filter banks: the Hilbert-eigenvector basis (USB) and the
Fourier, Chebyshev and random-orthogonal comparison bases.

A filter column ``phi[:, l]`` is read at grid offset ``t = (i - j) mod n``;
entry 0 is offset 0.  Higher-dimensional modes are separable products of the
1-D columns, either with one shared index (tied) or every index tuple (multi).
"""
from __future__ import annotations

import csv
import enum
import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import fft as _fft
from .linalg import hilbert_eigen, qr_orthonormalize

__all__ = [
    "BasisKind",
    "IndexScheme",
    "SpectralBasis",
    "ModeSet",
    "hilbert_matrix",
    "build_basis",
    "extend_modes",
    "project_truncate",
    "write_basis_csv",
    "MAX_MULTI_MODES",
]

MAX_MULTI_MODES = 10_000


class BasisKind(str, enum.Enum):
    USB = "usb"
    FOURIER = "fourier"
    CHEBYSHEV = "chebyshev"
    RANDOM = "random"

    @classmethod
    def parse(cls, value) -> "BasisKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"randomorthogonal": "random", "random_orthogonal": "random", "hilbert": "usb"}
        return cls(aliases.get(key, key))


class IndexScheme(str, enum.Enum):
    TIED = "tied"
    MULTI = "multi"


def hilbert_matrix(n: int) -> np.ndarray:
    """``H[i, j] = 1 / (i + j - 1)`` with 1-based indices."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(1, n + 1, dtype=np.float64)
    return 1.0 / (i[:, None] + i[None, :] - 1.0)


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    kind: BasisKind
    n: int
    L: int
    filters: np.ndarray          # (n, L), orthonormal columns
    eigenvalues: np.ndarray      # (L,) for USB, empty otherwise
    seed: int | None = None
    spectra: np.ndarray = field(repr=False, default=None)  # (L, n) complex
    meta: dict = field(default_factory=dict, repr=False)

    def truncated(self, L: int) -> "SpectralBasis":
        """The same basis keeping only its first ``L`` modes."""
        if not 1 <= L <= self.L:
            raise ValueError(f"cannot truncate {self.L} modes to {L}")
        eig = self.eigenvalues[:L] if self.eigenvalues.size else self.eigenvalues
        return SpectralBasis(self.kind, self.n, L, self.filters[:, :L], eig, self.seed,
                             self.spectra[:L], dict(self.meta))


def _fourier_columns(n: int, L: int) -> np.ndarray:
    t = np.arange(n)
    cols = [np.full(n, 1.0 / np.sqrt(n))]
    k = 1
    while len(cols) < L:
        if 2 * k == n:
            cols.append(np.cos(np.pi * t) / np.sqrt(n))
            break
        arg = 2.0 * np.pi * k * t / n
        cols.append(np.cos(arg) * np.sqrt(2.0 / n))
        cols.append(np.sin(arg) * np.sqrt(2.0 / n))
        k += 1
    return np.array(cols[:L]).T


def chebyshev_samples(n: int, L: int) -> np.ndarray:
    """T_0..T_{L-1} at the grid midpoints mapped to [-1, 1] (not orthonormal)."""
    z = 2.0 * (np.arange(n) + 0.5) / n - 1.0
    return np.cos(np.arange(L)[None, :] * np.arccos(z)[:, None])


def _chebyshev_columns(n: int, L: int) -> np.ndarray:
    # Orthonormal basis of span{T_0..T_{L-1}} on the midpoints.  Arnoldi on
    # multiplication by z spans the same nested polynomial spaces as QR of the
    # sampled T_k (same leading-coefficient signs) without its conditioning loss.
    z = 2.0 * (np.arange(n) + 0.5) / n - 1.0
    Q = np.zeros((n, L))
    Q[:, 0] = 1.0 / np.sqrt(n)
    for k in range(1, L):
        v = z * Q[:, k - 1]
        for _ in range(2):
            v -= Q[:, :k] @ (Q[:, :k].T @ v)
        Q[:, k] = v / np.linalg.norm(v)
    return Q


@lru_cache(maxsize=64)
def _build_cached(kind: BasisKind, n: int, L: int, seed):
    meta = {}
    eigenvalues = np.zeros(0)
    if kind is BasisKind.USB:
        w, V = hilbert_eigen(n)
        filters = V[:, :L]
        eigenvalues = w[:L]
        H = hilbert_matrix(n)
        resid = np.linalg.norm(H @ filters - filters * eigenvalues) / np.linalg.norm(H)
        meta["reconstruction_residual"] = float(resid)
    elif kind is BasisKind.FOURIER:
        filters = _fourier_columns(n, L)
    elif kind is BasisKind.CHEBYSHEV:
        filters = _chebyshev_columns(n, L)
    else:
        rng = np.random.default_rng(seed)
        filters = qr_orthonormalize(rng.standard_normal((n, L)))
    filters = np.ascontiguousarray(filters, dtype=np.float64)
    spectra = _fft.fft(filters.T)
    for arr in (filters, eigenvalues, spectra):
        arr.setflags(write=False)
    return SpectralBasis(kind, n, L, filters, eigenvalues, seed, spectra, meta)


def build_basis(kind, n: int, L: int, seed: int | None = None) -> SpectralBasis:
    """Construct an ``n x L`` orthonormal filter bank.

    ``kind`` is one of usb, fourier, chebyshev, random.  ``seed`` is required
    for (and only used by) the random orthogonal basis.  Results are cached
    and immutable.
    """
    kind = BasisKind.parse(kind)
    n, L = int(n), int(L)
    if not _fft.is_power_of_two(n):
        raise ValueError(f"grid size must be a power of two, got {n}")
    if not 1 <= L <= n:
        raise ValueError(f"need 1 <= L <= n, got L={L}, n={n}")
    if kind is BasisKind.RANDOM:
        if seed is None:
            raise ValueError("random orthogonal basis needs a seed")
        seed = int(seed)
    else:
        seed = None
    return _build_cached(kind, n, L, seed)


@dataclass(frozen=True, eq=False)
class ModeSet:
    """K separable M-dimensional filters and their M-dimensional spectra."""

    arity: int
    scheme: IndexScheme
    indices: tuple            # one index tuple per mode
    fields: np.ndarray        # (K, n, ..., n)
    spectra: np.ndarray       # (K, n, ..., n) complex

    @property
    def K(self) -> int:
        return len(self.indices)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.fields.shape[1:]


def _outer(vectors) -> np.ndarray:
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def extend_modes(basis: SpectralBasis, M: int, scheme="tied") -> ModeSet:
    """Tensor-product extension of a 1-D basis to an ``M``-dimensional square grid."""
    scheme = IndexScheme(scheme)
    if M not in (1, 2, 3):
        raise ValueError(f"arity must be 1, 2 or 3, got {M}")
    L = basis.L
    if scheme is IndexScheme.TIED or M == 1:
        indices = tuple((l,) * M for l in range(L))
    else:
        if L ** M > MAX_MULTI_MODES:
            raise ValueError(f"multi-index with L^M = {L ** M} modes exceeds {MAX_MULTI_MODES}")
        indices = tuple(itertools.product(range(L), repeat=M))
    phi = basis.filters
    spec = basis.spectra
    fields = np.array([_outer([phi[:, i] for i in idx]) for idx in indices])
    spectra = np.array([_outer([spec[i] for i in idx]) for idx in indices])
    fields.setflags(write=False)
    spectra.setflags(write=False)
    return ModeSet(M, scheme, indices, fields, spectra)


def project_truncate(g, basis: SpectralBasis, L: int | None = None):
    """Project ``g`` onto the first ``L`` filters.

    ``g`` has length ``n`` along its first axis; extra trailing axes (e.g. the
    entries of a matrix-valued kernel) are projected column by column and the
    error is the Frobenius ratio over all of them.

    Returns ``(theta, reconstruction, rel_error)``.
    """
    g = np.asarray(g, dtype=np.float64)
    L = basis.L if L is None else int(L)
    if g.shape[0] != basis.n:
        raise ValueError(f"kernel length {g.shape[0]} does not match basis n={basis.n}")
    if not 0 <= L <= basis.L:
        raise ValueError(f"L must be in [0, {basis.L}], got {L}")
    flat = g.reshape(basis.n, -1)
    Phi = basis.filters[:, :L]
    theta = Phi.T @ flat
    recon = Phi @ theta
    norm = np.linalg.norm(flat)
    rel = 0.0 if norm == 0.0 else float(np.linalg.norm(flat - recon) / norm)
    return theta.reshape((L,) + g.shape[1:]), recon.reshape(g.shape), rel


def write_basis_csv(basis: SpectralBasis, path, eigen_path=None) -> None:
    """Filters as CSV (one column per mode) plus an optional eigenvalue sidecar."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"mode_{l + 1}" for l in range(basis.L)])
        for row in basis.filters:
            w.writerow([repr(float(v)) for v in row])
    if eigen_path is not None:
        with open(eigen_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "eigenvalue"])
            for l in range(basis.L):
                val = float(basis.eigenvalues[l]) if basis.eigenvalues.size else float("nan")
                w.writerow([l + 1, repr(val)])
