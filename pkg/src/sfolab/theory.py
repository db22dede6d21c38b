"""Three-point stencil operators, their matrix-valued Green's kernels and the
basis truncation study for exponentially decaying kernels.

A stencil acts on block sequences as ``(Au)[i] = A0 u[i] + A1 (u[i-1] + u[i+1])``
with ``A0 = U diag(alpha) U^T`` and ``A1 = U diag(beta) U^T``.  It is stable
when ``alpha_j > 2 |beta_j|`` for every j, and then its inverse is convolution
with a kernel ``G[t] = sum_k Theta_k r_k^|t|`` with ``|r_k| < 1``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .basis import BasisKind, SpectralBasis, build_basis, project_truncate
from .linalg import solve_dense, sym_eigen

__all__ = [
    "StencilSpec",
    "GreensKernel",
    "UnstableStencilError",
    "check_stability",
    "greens_closed_form",
    "greens_numeric",
    "impulse_residual",
    "geometric_kernel",
    "greens_one_sided",
    "truncation_study",
    "modes_for_accuracy",
    "log_fit",
    "decay_ratios",
    "diffusion_reaction_stencil",
    "rotation",
    "write_rows",
    "BOUNDARY_BUFFER",
]

BOUNDARY_BUFFER = 20
COMMUTE_TOL = 1e-10


class UnstableStencilError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StencilSpec:
    U: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.U, dtype=np.float64))
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        d = U.shape[0]
        if U.shape != (d, d) or alpha.shape != (d,) or beta.shape != (d,):
            raise ValueError(f"inconsistent stencil shapes U{U.shape} alpha{alpha.shape} beta{beta.shape}")
        if np.abs(U.T @ U - np.eye(d)).max() > 1e-10:
            raise ValueError("U must be orthogonal")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def scalar(cls, alpha: float, beta: float) -> "StencilSpec":
        return cls(np.eye(1), [alpha], [beta])

    @classmethod
    def from_matrices(cls, A0, A1, tol: float = COMMUTE_TOL) -> "StencilSpec":
        """Recover ``(U, alpha, beta)`` from symmetric commuting blocks."""
        A0 = np.atleast_2d(np.asarray(A0, dtype=np.float64))
        A1 = np.atleast_2d(np.asarray(A1, dtype=np.float64))
        scale = max(np.abs(A0).max(), np.abs(A1).max(), 1.0)
        if np.abs(A0 - A0.T).max() > tol * scale or np.abs(A1 - A1.T).max() > tol * scale:
            raise ValueError("stencil blocks must be symmetric")
        if np.abs(A0 @ A1 - A1 @ A0).max() > tol * scale * scale:
            raise ValueError("stencil blocks A0 and A1 do not commute")
        # A generic combination separates eigenvalues that either block alone repeats.
        _, U = sym_eigen(A0 + np.pi * A1)
        alpha = np.diag(U.T @ A0 @ U).copy()
        beta = np.diag(U.T @ A1 @ U).copy()
        return cls(U, alpha, beta)

    @property
    def d(self) -> int:
        return self.alpha.shape[0]

    @property
    def A0(self) -> np.ndarray:
        return (self.U * self.alpha) @ self.U.T

    @property
    def A1(self) -> np.ndarray:
        return (self.U * self.beta) @ self.U.T


@dataclass(frozen=True, eq=False)
class GreensKernel:
    roots: np.ndarray        # (d,)
    thetas: np.ndarray       # (d, d, d): rank-one weight per eigen-direction
    tmax: int
    samples: np.ndarray      # (2*tmax+1, d, d), offsets -tmax..tmax

    def at(self, t: int) -> np.ndarray:
        return self.samples[t + self.tmax]

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.tmax, self.tmax + 1)


def check_stability(spec: StencilSpec) -> bool:
    return bool(np.all(spec.alpha > 2.0 * np.abs(spec.beta)))


def _roots_and_weights(spec: StencilSpec):
    a, b = spec.alpha, spec.beta
    disc = np.sqrt(a * a - 4.0 * b * b)
    # Root of beta r^2 + alpha r + beta = 0 inside the unit disc, in the
    # cancellation-free form -2 beta / (alpha + disc); it is 0 when beta = 0.
    roots = np.where(b == 0.0, 0.0, -2.0 * b / (a + disc))
    amp = np.where(b == 0.0, 1.0 / a, 1.0 / disc)
    thetas = np.einsum("ik,jk,k->kij", spec.U, spec.U, amp)
    return roots, thetas


def greens_closed_form(spec: StencilSpec, tmax: int) -> GreensKernel:
    if not check_stability(spec):
        raise UnstableStencilError(f"unstable stencil: alpha={spec.alpha}, beta={spec.beta}")
    if tmax < 0:
        raise ValueError("tmax must be >= 0")
    roots, thetas = _roots_and_weights(spec)
    t = np.abs(np.arange(-tmax, tmax + 1))
    powers = np.where(t[:, None] == 0, 1.0, roots[None, :] ** t[:, None])  # 0**0 = 1
    samples = np.einsum("tk,kij->tij", powers, thetas)
    return GreensKernel(roots, thetas, int(tmax), samples)


def _block_tridiagonal(spec: StencilSpec, N: int) -> np.ndarray:
    d = spec.d
    A = np.zeros((N * d, N * d))
    A0, A1 = spec.A0, spec.A1
    for i in range(N):
        A[i * d:(i + 1) * d, i * d:(i + 1) * d] = A0
        if i + 1 < N:
            A[i * d:(i + 1) * d, (i + 1) * d:(i + 2) * d] = A1
            A[(i + 1) * d:(i + 2) * d, i * d:(i + 1) * d] = A1
    return A


def greens_numeric(spec: StencilSpec, tmax: int, N: int | None = None) -> GreensKernel:
    """Center block column of the inverse of a finite ``N``-block window."""
    if not check_stability(spec):
        raise UnstableStencilError(f"unstable stencil: alpha={spec.alpha}, beta={spec.beta}")
    min_N = 2 * tmax + 1 + 2 * BOUNDARY_BUFFER
    N = min_N if N is None else int(N)
    if N % 2 == 0 or N < min_N:
        raise ValueError(f"window size must be odd and >= {min_N}, got {N}")
    d = spec.d
    c = N // 2
    rhs = np.zeros((N * d, d))
    rhs[c * d:(c + 1) * d] = np.eye(d)
    X = solve_dense(_block_tridiagonal(spec, N), rhs).reshape(N, d, d)
    roots, thetas = _roots_and_weights(spec)
    return GreensKernel(roots, thetas, int(tmax), X[c - tmax:c + tmax + 1].copy())


def impulse_residual(kernel: GreensKernel, spec: StencilSpec) -> float:
    """Max entry of ``A1 G[t-1] + A0 G[t] + A1 G[t+1] - [t=0] I`` over ``|t| <= tmax-1``."""
    G = kernel.samples
    A0, A1 = spec.A0, spec.A1
    worst = 0.0
    for t in range(-kernel.tmax + 1, kernel.tmax):
        k = t + kernel.tmax
        r = A1 @ G[k - 1] + A0 @ G[k] + A1 @ G[k + 1]
        if t == 0:
            r = r - np.eye(spec.d)
        worst = max(worst, float(np.abs(r).max()))
    return worst


def geometric_kernel(c: float, rho: float, n: int, one_sided: bool = False) -> np.ndarray:
    """``c * rho^|t|`` on an ``n``-point grid.

    The default reads entry ``i`` at the signed circular offset in
    ``(-n/2, n/2]``; ``one_sided=True`` gives the causal samples ``t = 0..n-1``.
    """
    if abs(rho) >= 1.0:
        raise ValueError(f"need |rho| < 1, got {rho}")
    i = np.arange(n)
    t = i if one_sided else np.where(i > n // 2, n - i, i)
    with np.errstate(under="ignore"):
        return c * np.where(t == 0, 1.0, float(rho) ** t)


def greens_one_sided(spec: StencilSpec, n: int) -> np.ndarray:
    """``G[0..n-1]`` as an ``(n, d, d)`` array (``(n,)`` for scalar stencils)."""
    G = greens_closed_form(spec, n - 1).samples[n - 1:]
    return G[:, 0, 0].copy() if spec.d == 1 else G


def _basis_for(kind, n, L, seed):
    kind = BasisKind.parse(kind)
    return build_basis(kind, n, L, seed=seed if kind is BasisKind.RANDOM else None)


def truncation_study(kernel, kinds=("usb", "fourier", "chebyshev", "random"), Ls=None, seed: int = 0):
    """Rows ``(kind, L, rel_error)`` of the rank-L projection error per basis kind."""
    kernel = np.asarray(kernel, dtype=np.float64)
    n = kernel.shape[0]
    Ls = list(range(1, n + 1)) if Ls is None else [int(L) for L in Ls]
    rows = []
    for kind in kinds:
        basis = _basis_for(kind, n, max(Ls), seed)
        for L in Ls:
            rows.append((BasisKind.parse(kind).value, L, project_truncate(kernel, basis, L)[2]))
    return rows


def modes_for_accuracy(kernel, basis: SpectralBasis, eps_list):
    """Smallest ``L`` with rank-L error ``<= eps``; ``None`` marks an unreachable (saturated) target."""
    errs = [project_truncate(kernel, basis, L)[2] for L in range(basis.L + 1)]
    out = []
    for eps in eps_list:
        hit = next((L for L, e in enumerate(errs) if e <= eps), None)
        out.append((float(eps), hit))
    return out


def log_fit(eps_list, L_list):
    """Least-squares line of ``L`` against ``log10(1/eps)``: ``(slope, intercept, r2)``."""
    x = np.log10(1.0 / np.asarray(eps_list, dtype=np.float64))
    y = np.asarray(L_list, dtype=np.float64)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, icept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float((resid ** 2).sum()) / ss_tot
    return float(slope), float(icept), r2


def decay_ratios(kernel, basis: SpectralBasis, L_range=(4, 24), step: int = 4, floor: float = 1e-12):
    """``(L, err(L+step)/err(L))`` for L in the range while ``err(L+step)`` is above ``floor``."""
    out = []
    for L in range(L_range[0], L_range[1] + 1):
        e0 = project_truncate(kernel, basis, L)[2]
        e1 = project_truncate(kernel, basis, L + step)[2]
        if e1 <= floor or e0 == 0.0:
            break
        out.append((L, e1 / e0))
    return out


def diffusion_reaction_stencil(D, R, h: float) -> StencilSpec:
    """Stencil of ``-D u'' + R u`` with second differences at spacing ``h``."""
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    if h <= 0:
        raise ValueError("spacing must be positive")
    scale = max(np.abs(D).max(), np.abs(R).max(), 1.0)
    if np.abs(D @ R - R @ D).max() > COMMUTE_TOL * scale * scale:
        raise ValueError("D and R do not commute")
    for name, X in (("D", D), ("R", R)):
        if np.abs(X - X.T).max() > COMMUTE_TOL * scale or np.linalg.eigvalsh(X).min() <= 0:
            raise ValueError(f"{name} must be symmetric positive definite")
    return StencilSpec.from_matrices(R + (2.0 / h ** 2) * D, -(1.0 / h ** 2) * D)


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in row])
