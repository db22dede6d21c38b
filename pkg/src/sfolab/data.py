"""Synthetic periodic PDE datasets, their binary file format and error metrics.

Fields are stored as ``(N, channels, *grid)`` float64 arrays.  Inputs carry the
initial condition followed by one coordinate channel ``i/n`` per spatial axis;
targets stack the solution snapshots as channels.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import fft as _fft

log = logging.getLogger(__name__)

__all__ = [
    "Grid",
    "Dataset",
    "splitmix64",
    "sub_seed",
    "default_substeps",
    "solve_diffusion_reaction",
    "gen_diffusion_reaction_1d",
    "heat_solution",
    "gen_heat_2d",
    "rel_l2",
    "boundary_mask",
    "boundary_interior_errors",
    "subsample",
    "split_indices",
    "save_dataset",
    "load_dataset",
    "dataset_bytes",
    "DATA_MAGIC",
    "DATA_VERSION",
]

DATA_MAGIC = b"SFODATA1"
DATA_VERSION = 1
REACTION_DIFFUSIVITY = 0.5
MIN_STEPS = 256         # internal steps over the unit time interval, at least
BLOWUP_LIMIT = 10.0
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Grid:
    sizes: tuple
    length: float = 1.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not 1 <= len(sizes) <= 3:
            raise ValueError("grid arity must be 1, 2 or 3")
        for s in sizes:
            if s < 8 or not _fft.is_power_of_two(s):
                raise ValueError(f"grid sizes must be powers of two >= 8, got {sizes}")

    @property
    def arity(self) -> int:
        return len(self.sizes)

    @property
    def spacing(self) -> tuple:
        return tuple(self.length / s for s in self.sizes)

    @property
    def periodic(self) -> tuple:
        return (True,) * self.arity

    def coordinates(self) -> np.ndarray:
        """``(arity, *sizes)`` array of ``i/n`` per axis."""
        axes = [np.arange(s) / s for s in self.sizes]
        return np.array(np.meshgrid(*axes, indexing="ij"))


@dataclass(eq=False)
class Dataset:
    grid: Grid
    inputs: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets have different sample counts")
        if self.inputs.shape[0] < 2:
            raise ValueError("a dataset needs at least 2 samples")
        for name, arr in (("inputs", self.inputs), ("targets", self.targets)):
            if arr.shape[2:] != self.grid.sizes:
                raise ValueError(f"{name} grid {arr.shape[2:]} does not match {self.grid.sizes}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contain non-finite values")

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def in_channels(self) -> int:
        return self.inputs.shape[1]

    @property
    def out_channels(self) -> int:
        return self.targets.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.grid, self.inputs[idx], self.targets[idx], dict(self.meta))

    def header(self) -> dict:
        return {
            "version": DATA_VERSION,
            "arity": self.grid.arity,
            "sizes": list(self.grid.sizes),
            "spacing": list(self.grid.spacing),
            "N": self.N,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "meta": self.meta,
        }


# ---------------------------------------------------------------- seeding

def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sub_seed(seed: int, index: int, attempt: int = 0) -> int:
    """Per-sample seed: ``splitmix64(splitmix64(seed) ^ (index + attempt * 2^32))``."""
    return splitmix64(splitmix64(int(seed) & _MASK64) ^ ((index + (attempt << 32)) & _MASK64))


# ---------------------------------------------------------------- diffusion-reaction

def _cyclic_tridiag_solver(n: int, diag: float, off: float):
    """Solve ``off*u[i-1] + diag*u[i] + off*u[i+1] = r[i]`` (periodic) for r of shape (n, B)."""
    # Sherman-Morrison: the periodic matrix is a tridiagonal T plus w v^T.
    gamma = -diag
    main = np.full(n, diag)
    main[0] -= gamma
    main[-1] -= off * off / gamma
    # Thomas factorization of T, shared by every solve.
    cp = np.zeros(n)
    denom = np.zeros(n)
    denom[0] = main[0]
    cp[0] = off / denom[0]
    for i in range(1, n):
        denom[i] = main[i] - off * cp[i - 1]
        cp[i] = off / denom[i]

    def thomas(r):
        y = np.empty_like(r)
        y[0] = r[0] / denom[0]
        for i in range(1, n):
            y[i] = (r[i] - off * y[i - 1]) / denom[i]
        for i in range(n - 2, -1, -1):
            y[i] -= cp[i] * y[i + 1]
        return y

    w = np.zeros((n, 1))
    w[0, 0], w[-1, 0] = gamma, off
    z = thomas(w)[:, 0]
    vz = z[0] + (off / gamma) * z[-1]

    def solve(r):
        y = thomas(r)
        vy = y[0] + (off / gamma) * y[-1]
        return y - np.outer(z, vy / (1.0 + vz))

    return solve


def _logistic(u, t):
    e = np.exp(t)
    return u * e / (1.0 - u + u * e)


def default_substeps(n_t: int) -> int:
    return max(1, -(-MIN_STEPS // n_t))


def solve_diffusion_reaction(u0, n_t: int, substeps: int | None = None,
                             t_end: float = 1.0, nu: float = REACTION_DIFFUSIVITY,
                             reaction: bool = True) -> np.ndarray:
    """Integrate ``u_t = nu u_xx + u(1-u)`` on the periodic unit interval.

    ``u0`` is ``(n,)`` or ``(B, n)``.  Returns snapshots at ``t_k = k t_end / n_t``
    for ``k = 1..n_t`` with shape ``(B, n_t, n)`` (or ``(n_t, n)``).

    Each step is Strang split: an exact logistic half step, a TR-BDF2 diffusion
    step with periodic second differences, and another logistic half step.
    ``reaction=False`` keeps only the diffusion steps.  ``substeps`` (steps
    per snapshot) defaults to :func:`default_substeps`.
    """
    substeps = default_substeps(n_t) if substeps is None else int(substeps)
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    u = np.asarray(u0, dtype=np.float64)
    single = u.ndim == 1
    u = np.atleast_2d(u).T.copy()                      # (n, B)
    n = u.shape[0]
    k = t_end / (n_t * substeps)
    lam = nu * n * n                                   # nu / h^2 on the unit interval
    g = 2.0 - np.sqrt(2.0)
    c1 = 0.5 * g * k * lam
    trap = _cyclic_tridiag_solver(n, 1.0 + 2.0 * c1, -c1)
    c2 = (1.0 - g) / (2.0 - g) * k * lam
    bdf = _cyclic_tridiag_solver(n, 1.0 + 2.0 * c2, -c2)
    w_new = 1.0 / (g * (2.0 - g))
    w_old = (1.0 - g) ** 2 / (g * (2.0 - g))

    out = np.empty((n_t,) + u.shape)
    for s in range(n_t):
        for _ in range(substeps):
            if reaction:
                u = _logistic(u, 0.5 * k)
            lap = np.roll(u, 1, axis=0) - 2.0 * u + np.roll(u, -1, axis=0)
            mid = trap(u + c1 * lap)
            u = bdf(w_new * mid - w_old * u)
            if reaction:
                u = _logistic(u, 0.5 * k)
        out[s] = u
    out = out.transpose(2, 0, 1)                       # (B, n_t, n)
    return out[0] if single else out


def _band_limited_1d(rng, n: int) -> np.ndarray:
    x = np.arange(n) / n
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    f = np.zeros(n)
    for k in range(1, 5):
        f += a[k - 1] * np.sin(2 * np.pi * k * x) + b[k - 1] * np.cos(2 * np.pi * k * x)
    lo, hi = f.min(), f.max()
    return 0.05 + 0.9 * (f - lo) / (hi - lo)


def gen_diffusion_reaction_1d(n: int = 64, n_t: int = 16, N: int = 512, seed: int = 0,
                              substeps: int | None = None) -> Dataset:
    if n_t < 2:
        raise ValueError("n_t must be >= 2")
    substeps = default_substeps(n_t) if substeps is None else int(substeps)
    grid = Grid((n,))
    u0 = np.array([_band_limited_1d(np.random.default_rng(sub_seed(seed, j)), n) for j in range(N)])
    traj = solve_diffusion_reaction(u0, n_t, substeps)
    attempts = np.zeros(N, dtype=int)
    while True:
        bad = np.where(~np.all(np.isfinite(traj) & (np.abs(traj) <= BLOWUP_LIMIT), axis=(1, 2)))[0]
        if bad.size == 0:
            break
        for j in bad:
            attempts[j] += 1
            log.warning("diffusion-reaction sample %d blew up; regenerating (attempt %d)", j, attempts[j])
            u0[j] = _band_limited_1d(np.random.default_rng(sub_seed(seed, j, attempts[j])), n)
        traj[bad] = solve_diffusion_reaction(u0[bad], n_t, substeps)
    coords = np.broadcast_to(grid.coordinates(), (N, 1, n))
    inputs = np.concatenate([u0[:, None, :], coords], axis=1)
    meta = {"pde": "diff-react-1d", "n": n, "n_t": n_t, "N": N, "seed": int(seed),
            "nu": REACTION_DIFFUSIVITY, "t_end": 1.0, "substeps": substeps,
            "regenerated": int((attempts > 0).sum())}
    return Dataset(grid, inputs, traj, meta)


# ---------------------------------------------------------------- heat 2-D

def heat_solution(u0, times, nu: float) -> np.ndarray:
    """Exact periodic heat flow of ``u0`` (``(..., n, n)``) on the unit square.

    Fourier mode with integer wave numbers ``(kx, ky)`` decays by
    ``exp(-nu (2 pi)^2 (kx^2 + ky^2) t)``.  Returns ``(..., len(times), n, n)``.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    n = u0.shape[-1]
    k = np.fft.fftfreq(n, 1.0 / n)
    k2 = (2.0 * np.pi) ** 2 * (k[:, None] ** 2 + k[None, :] ** 2)
    uhat = _fft.fft_nd(u0, axes=(-2, -1))
    out = [np.real(_fft.ifft_nd(uhat * np.exp(-nu * k2 * t), axes=(-2, -1))) for t in times]
    return np.stack(out, axis=-3)


def _band_limited_2d(rng, n: int, kmax: int = 3) -> np.ndarray:
    x = np.arange(n) / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    f = np.full((n, n), rng.standard_normal())
    for kx in range(0, kmax + 1):
        for ky in range(-kmax, kmax + 1):
            if kx == 0 and ky <= 0:
                continue
            a, b = rng.standard_normal(2)
            arg = 2.0 * np.pi * (kx * X + ky * Y)
            f += a * np.cos(arg) + b * np.sin(arg)
    return f


def gen_heat_2d(n: int = 32, n_t: int = 8, N: int = 256, seed: int = 0,
                diffusivity: float = 0.01) -> Dataset:
    if n_t < 2:
        raise ValueError("n_t must be >= 2")
    grid = Grid((n, n))
    u0 = np.array([_band_limited_2d(np.random.default_rng(sub_seed(seed, j)), n) for j in range(N)])
    times = np.arange(1, n_t + 1) / n_t
    targets = heat_solution(u0, times, diffusivity)
    coords = np.broadcast_to(grid.coordinates(), (N, 2, n, n))
    inputs = np.concatenate([u0[:, None], coords], axis=1)
    meta = {"pde": "heat-2d", "n": n, "n_t": n_t, "N": N, "seed": int(seed),
            "nu": float(diffusivity), "t_end": 1.0, "kmax": 3}
    return Dataset(grid, inputs, targets, meta)


# ---------------------------------------------------------------- metrics

def _per_sample(u, mask=None):
    u = np.asarray(u, dtype=np.float64)
    if mask is not None:
        u = u[..., mask]
    return u.reshape(u.shape[0], -1)


def _restricted_rel_l2(u, u_hat, mask=None) -> float:
    u, u_hat = np.asarray(u, dtype=np.float64), np.asarray(u_hat, dtype=np.float64)
    if u.shape != u_hat.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {u_hat.shape}")
    a, b = _per_sample(u, mask), _per_sample(u_hat, mask)
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("relative L2 undefined: a target has zero norm")
    return float(100.0 * np.mean(np.linalg.norm(a - b, axis=1) / norms))


def rel_l2(u, u_hat) -> float:
    """Mean relative L2 error in percent; the first axis indexes samples."""
    return _restricted_rel_l2(u, u_hat)


def boundary_mask(sizes, frac: float = 0.1) -> np.ndarray:
    """True on grid points within ``floor(frac*n)`` of any axis edge."""
    mask = np.zeros(tuple(sizes), dtype=bool)
    for ax, n in enumerate(sizes):
        b = int(np.floor(frac * n))
        if b < 1:
            raise ValueError(f"boundary band is empty for axis size {n}")
        idx = np.arange(n)
        edge = (idx < b) | (idx >= n - b)
        shape = [1] * len(sizes)
        shape[ax] = n
        mask |= edge.reshape(shape)
    if mask.all():
        raise ValueError("interior region is empty")
    return mask


def boundary_interior_errors(u, u_hat, frac: float = 0.1):
    """``(full%, boundary%, interior%)`` over fields shaped ``(N, C, *grid)``."""
    u = np.asarray(u, dtype=np.float64)
    mask = boundary_mask(u.shape[2:], frac)
    return (_restricted_rel_l2(u, u_hat), _restricted_rel_l2(u, u_hat, mask),
            _restricted_rel_l2(u, u_hat, ~mask))


def subsample(ds: Dataset, s: int) -> Dataset:
    s = int(s)
    if s < 1 or any(n % s for n in ds.grid.sizes):
        raise ValueError(f"stride {s} does not divide grid sizes {ds.grid.sizes}")
    if s == 1:
        return ds
    sl = (slice(None), slice(None)) + (slice(None, None, s),) * ds.grid.arity
    grid = Grid(tuple(n // s for n in ds.grid.sizes), ds.grid.length)
    meta = dict(ds.meta, subsample=s * ds.meta.get("subsample", 1))
    return Dataset(grid, ds.inputs[sl], ds.targets[sl], meta)


def split_indices(N: int, frac: float = 0.9, seed: int = 0):
    """Seeded shuffle, then first ``frac`` for training and the rest for validation."""
    if not 0.0 < frac < 1.0:
        raise ValueError("split fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(N)
    cut = int(round(frac * N))
    cut = min(max(cut, 1), N - 1)
    return perm[:cut], perm[cut:]


# ---------------------------------------------------------------- file format

def dataset_bytes(ds: Dataset) -> bytes:
    g = ds.grid
    parts = [DATA_MAGIC, struct.pack("<I", DATA_VERSION), struct.pack("<I", g.arity),
             struct.pack(f"<{g.arity}I", *g.sizes), struct.pack(f"<{g.arity}d", *g.spacing),
             struct.pack("<3I", ds.N, ds.in_channels, ds.out_channels)]
    meta = json.dumps(ds.meta, sort_keys=True).encode()
    parts += [struct.pack("<I", len(meta)), meta,
              ds.inputs.astype("<f8").tobytes(), ds.targets.astype("<f8").tobytes()]
    return b"".join(parts)


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(count, what):
        nonlocal pos
        if pos + count > len(data):
            raise ValueError(f"dataset file truncated at byte offset {pos} while reading {what} "
                             f"(need {count} bytes, {len(data) - pos} left)")
        chunk = data[pos:pos + count]
        pos += count
        return chunk

    magic = take(8, "magic")
    if magic != DATA_MAGIC:
        raise ValueError(f"bad magic {magic!r} at byte offset 0 (expected {DATA_MAGIC!r})")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != DATA_VERSION:
        raise ValueError(f"unsupported dataset version {version} at byte offset 8")
    (arity,) = struct.unpack("<I", take(4, "arity"))
    if not 1 <= arity <= 3:
        raise ValueError(f"invalid grid arity {arity} at byte offset 12")
    sizes = struct.unpack(f"<{arity}I", take(4 * arity, "sizes"))
    struct.unpack(f"<{arity}d", take(8 * arity, "spacing"))
    N, ca, cu = struct.unpack("<3I", take(12, "counts"))
    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    meta = json.loads(take(mlen, "metadata").decode())
    pts = int(np.prod(sizes))
    inputs = np.frombuffer(take(8 * N * ca * pts, "inputs"), dtype="<f8")
    targets = np.frombuffer(take(8 * N * cu * pts, "targets"), dtype="<f8")
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} unexpected trailing bytes at byte offset {pos}")
    grid = Grid(tuple(sizes))
    return Dataset(grid, inputs.reshape((N, ca) + tuple(sizes)).astype(np.float64),
                   targets.reshape((N, cu) + tuple(sizes)).astype(np.float64), meta)
