"""Small dense linear algebra: Jacobi eigensolvers, Householder QR and a pivoted solver.

Matrices are plain 2-D ``numpy.float64`` arrays.  Everything here is
single-threaded numpy and pure in its inputs.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = [
    "ConvergenceError",
    "SingularMatrixError",
    "sym_eigen",
    "qr_orthonormalize",
    "solve_dense",
    "one_sided_jacobi",
    "symmetric_cauchy_factor",
    "hilbert_eigen",
    "normalize_signs",
]

MAX_SWEEPS = 100
BLOCK_THRESHOLD = 64   # sizes above this use block rotations
INNER_SWEEPS = 1       # scalar sweeps per block pair and round
BLOCK_COUNT = 16       # index blocks in the block schedule
PIVOT_RTOL = 1e-12


class ConvergenceError(RuntimeError):
    """An iterative eigensolver hit its sweep cap."""


class SingularMatrixError(np.linalg.LinAlgError):
    """A pivot fell below the relative threshold."""


def _as_matrix(A, name="A") -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


@lru_cache(maxsize=64)
def _round_robin(m: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Tournament schedule: m-1 rounds of m/2 disjoint index pairs (m even)."""
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        top = np.array(idx[: m // 2])
        bottom = np.array(idx[m // 2:][::-1])
        rounds.append((np.minimum(top, bottom), np.maximum(top, bottom)))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return tuple(rounds)


def normalize_signs(V: np.ndarray) -> np.ndarray:
    """Flip columns so the first largest-magnitude entry of each is positive."""
    V = np.array(V, dtype=np.float64, copy=True)
    if V.size == 0:
        return V
    lead = np.argmax(np.abs(V), axis=0)
    signs = np.where(V[lead, np.arange(V.shape[1])] < 0, -1.0, 1.0)
    return V * signs


@lru_cache(maxsize=16)
def _frame_moves(m: int, blocks: int = 1):
    """Per-round position permutations for the round-robin schedule.

    With ``blocks == 1`` the round-r pairs sit at positions ``(k, k + m/2)``.
    With ``blocks > 1`` the schedule runs over ``m / blocks`` groups of
    ``blocks`` consecutive indices and each paired group is stored as one
    contiguous slab of ``2 * blocks`` rows.  ``moves[r]`` reorders the
    round-(r-1) layout into the round-r layout (``moves[0]`` starts from the
    natural order).
    """
    if blocks == 1:
        layouts = [np.concatenate([P, Q]) for P, Q in _round_robin(m)]
    else:
        off = np.arange(blocks)
        layouts = [(np.stack([P, Q], axis=1).ravel()[:, None] * blocks + off).ravel()
                   for P, Q in _round_robin(m // blocks)]
    moves = []
    prev = np.arange(m)
    for lay in layouts:
        where = np.empty(m, dtype=np.intp)
        where[prev] = np.arange(m)
        moves.append(where[lay])
        prev = lay
    return tuple(moves)


def _off_norm(W: np.ndarray) -> float:
    off = W.copy()
    k = np.arange(W.shape[-1])
    off[..., k, k] = 0.0
    return float(np.linalg.norm(off.ravel()))


def _rotate_rows(X: np.ndarray, c: np.ndarray, s: np.ndarray, h: int) -> np.ndarray:
    """Rows k and k+h of each matrix in the stack go to (c x_k - s x_q, s x_k + c x_q)."""
    R = np.empty_like(X)
    top, bot = X[..., :h, :], X[..., h:, :]
    np.multiply(top, c, out=R[..., :h, :])
    R[..., :h, :] -= s * bot
    np.multiply(top, s, out=R[..., h:, :])
    R[..., h:, :] += c * bot
    return R


def _jacobi_stack(W: np.ndarray, target: float, sweeps: int | None = None):
    """Scalar parallel-order Jacobi on a stack of symmetric (m, m) matrices, m even.

    Returns the diagonalized stack and the eigenvector stack Q with
    ``W_in = Q diag(W_out) Q^T``, both in the original index order.
    """
    m = W.shape[-1]
    h = m // 2
    Vt = np.broadcast_to(np.eye(m), W.shape).copy()
    pos = np.arange(m)
    k = np.arange(h)
    for sweep in range(MAX_SWEEPS):
        if sweep == sweeps or _off_norm(W) <= target:
            break
        for mv in _frame_moves(m):
            W = W.take(mv, axis=-2).take(mv, axis=-1)
            Vt = Vt.take(mv, axis=-2)
            pos = pos[mv]
            apq = W[..., k, k + h]
            active = apq != 0.0
            if not active.any():
                continue
            d = np.diagonal(W, axis1=-2, axis2=-1)
            with np.errstate(over="ignore"):
                # a huge theta means a negligible pivot: t underflows to 0
                theta = (d[..., h:] - d[..., :h]) / (2.0 * np.where(active, apq, 1.0))
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(1.0, theta))
            t = np.where(active, t, 0.0)
            c = (1.0 / np.sqrt(1.0 + t * t))[..., None]
            s = t[..., None] * c
            # J^T W J for symmetric W: rotate row halves, transpose, rotate again.
            W = _rotate_rows(W, c, s, h)
            W = _rotate_rows(np.ascontiguousarray(np.swapaxes(W, -1, -2)), c, s, h)
            W[..., k, k + h] = 0.0
            W[..., k + h, k] = 0.0
            Vt = _rotate_rows(Vt, c, s, h)
    else:
        raise ConvergenceError(f"Jacobi did not converge in {MAX_SWEEPS} sweeps (n={m})")
    back = np.argsort(pos)
    W = W.take(back, axis=-2).take(back, axis=-1)
    return W, np.swapaxes(Vt.take(back, axis=-2), -1, -2)


def _block_jacobi(W: np.ndarray, b: int, target: float):
    """Block parallel-order Jacobi.

    Each round runs ``INNER_SWEEPS`` scalar sweeps on every paired (2b, 2b)
    diagonal block at once and applies the accumulated rotations to the rest
    of the matrix with matrix products.
    """
    m = W.shape[0]
    g = m // (2 * b)                     # block pairs per round
    Vt = np.eye(m)
    pos = np.arange(m)
    sel = np.arange(g)
    moves = _frame_moves(m, b)
    for _ in range(MAX_SWEEPS):
        if _off_norm(W) <= target:
            break
        for mv in moves:
            W = W.take(mv, axis=0).take(mv, axis=1)
            Vt = Vt[mv]
            pos = pos[mv]
            W4 = W.reshape(g, 2 * b, g, 2 * b)
            sub = W4[sel, :, sel, :]
            if _off_norm(sub) == 0.0:
                continue
            D, Q = _jacobi_stack(sub, 0.25 * target / np.sqrt(g), INNER_SWEEPS)
            Qt = np.swapaxes(Q, -1, -2)
            W = np.matmul(Qt, W.reshape(g, 2 * b, m)).reshape(m, m)
            W = np.matmul(Qt, np.ascontiguousarray(W.T).reshape(g, 2 * b, m)).reshape(m, m)
            W4 = W.reshape(g, 2 * b, g, 2 * b)
            W4[sel, :, sel, :] = D      # exact values, not the product's rounding
            Vt = np.matmul(Qt, Vt.reshape(g, 2 * b, m)).reshape(m, m)
    else:
        raise ConvergenceError(f"block Jacobi did not converge in {MAX_SWEEPS} sweeps (n={m})")
    return np.diagonal(W).copy(), Vt, pos


def sym_eigen(A, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied in parallel (round-robin) order so that each round
    touches disjoint index pairs and can be vectorized; above
    ``BLOCK_THRESHOLD`` the same schedule runs over blocks of indices, with
    the rotations inside each block pair accumulated and applied as one
    orthogonal transform.
    Iterates until the off-diagonal Frobenius norm drops below
    ``0.5 * tol * ||A||_F``.

    Returns eigenvalues sorted descending and a column-orthonormal eigenvector
    matrix with the sign convention of :func:`normalize_signs`.
    """
    A = _as_matrix(A)
    n, m = A.shape
    if n != m:
        raise ValueError(f"sym_eigen needs a square matrix, got {A.shape}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    norm = np.linalg.norm(A)
    if np.max(np.abs(A - A.T), initial=0.0) > tol * max(norm, 1.0):
        raise ValueError("sym_eigen needs a symmetric matrix")
    if n == 1:
        return A[0].copy(), np.ones((1, 1))

    # Padding rows/columns are zero and decoupled: every rotation that could
    # touch them has a zero pivot, so they stay put and are dropped at the end.
    target = 0.5 * tol * norm
    if n <= BLOCK_THRESHOLD:
        m = n + (n % 2)
    else:
        b = -(-n // BLOCK_COUNT)
        m = b * BLOCK_COUNT
    W = np.zeros((m, m))
    W[:n, :n] = 0.5 * (A + A.T)
    if n <= BLOCK_THRESHOLD:
        D, Q = _jacobi_stack(W[None], target)
        w, V = np.diagonal(D[0])[:n], Q[0][:n, :n]
    else:
        d, Vt, pos = _block_jacobi(W, b, target)
        keep = pos < n
        w, V = d[keep], Vt[keep][:, :n].T
    order = np.argsort(-w, kind="stable")
    return w[order].copy(), normalize_signs(V[:, order])


def _householder(A: np.ndarray):
    """In-place style Householder QR; returns (reflectors, R)."""
    R = np.array(A, dtype=np.float64, copy=True)
    n, m = R.shape
    vs = []
    for k in range(min(n, m)):
        x = R[k:, k]
        alpha = np.linalg.norm(x)
        v = x.copy()
        if alpha == 0.0:
            vs.append(None)
            continue
        v[0] += alpha if x[0] >= 0 else -alpha
        vnorm = np.linalg.norm(v)
        if vnorm == 0.0:
            vs.append(None)
            continue
        v /= vnorm
        R[k:, k:] -= 2.0 * np.outer(v, v @ R[k:, k:])
        vs.append(v)
    return vs, R


def _apply_reflectors(vs, E: np.ndarray) -> np.ndarray:
    Q = np.array(E, dtype=np.float64, copy=True)
    for k in reversed(range(len(vs))):
        v = vs[k]
        if v is None:
            continue
        Q[k:, :] -= 2.0 * np.outer(v, v @ Q[k:, :])
    return Q


def qr_orthonormalize(A) -> np.ndarray:
    """Orthonormal basis for the column span of ``A`` (Householder QR).

    Column signs follow a positive diagonal of R, so an already orthonormal
    input with positive diagonal comes back unchanged.
    """
    A = _as_matrix(A)
    n, m = A.shape
    if m > n:
        raise ValueError(f"qr_orthonormalize needs cols <= rows, got {A.shape}")
    scale = np.linalg.norm(A)
    vs, R = _householder(A)
    diag = np.diag(R)[:m]
    if scale == 0.0 or np.any(np.abs(diag) < PIVOT_RTOL * scale):
        raise SingularMatrixError("rank-deficient input to qr_orthonormalize")
    Q = _apply_reflectors(vs, np.eye(n, m))
    return Q * np.where(diag < 0, -1.0, 1.0)


def _orthonormal_complement(U: np.ndarray) -> np.ndarray:
    n, r = U.shape
    vs, _ = _householder(U)
    full = _apply_reflectors(vs, np.eye(n))
    return full[:, r:]


def solve_dense(A, b) -> np.ndarray:
    """Gaussian elimination with partial pivoting.  ``b`` may hold several columns."""
    A = _as_matrix(A)
    n = A.shape[0]
    if A.shape[1] != n:
        raise ValueError(f"solve_dense needs a square matrix, got {A.shape}")
    b = np.asarray(b, dtype=np.float64)
    vector = b.ndim == 1
    B = b.reshape(n, -1).copy()
    if B.shape[0] != n:
        raise ValueError(f"right-hand side has {b.shape[0]} rows, expected {n}")

    M = A.copy()
    threshold = PIVOT_RTOL * np.max(np.sum(np.abs(A), axis=1), initial=0.0)
    for k in range(n):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if abs(M[p, k]) <= threshold or M[p, k] == 0.0:
            raise SingularMatrixError(f"matrix is singular to working precision (column {k})")
        if p != k:
            M[[k, p]] = M[[p, k]]
            B[[k, p]] = B[[p, k]]
        f = M[k + 1:, k] / M[k, k]
        M[k + 1:, k:] -= np.outer(f, M[k, k:])
        B[k + 1:] -= np.outer(f, B[k])
    X = np.empty_like(B)
    for k in range(n - 1, -1, -1):
        X[k] = (B[k] - M[k, k + 1:] @ X[k + 1:]) / M[k, k]
    return X[:, 0] if vector else X


def one_sided_jacobi(X, tol: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Left singular vectors and singular values of ``X`` by one-sided Jacobi.

    Columns are rotated pairwise until every pair is orthogonal to relative
    accuracy ``tol`` (default ``rows * eps``).  For column-graded inputs
    ``X = B D`` with well-conditioned ``B`` this gives singular values and
    vectors to high relative accuracy.
    """
    X = _as_matrix(X, "X")
    n, r = X.shape
    tol = n * np.finfo(float).eps if tol is None else tol
    W = X.T.copy()  # rows are the working columns
    if r % 2:
        W = np.vstack([W, np.zeros((1, n))])
    schedule = _round_robin(W.shape[0])
    for _ in range(MAX_SWEEPS):
        rotated = False
        for P, Q in schedule:
            wp, wq = W[P], W[Q]
            a = np.sqrt(np.einsum("ij,ij->i", wp, wp))
            b = np.sqrt(np.einsum("ij,ij->i", wq, wq))
            c = np.einsum("ij,ij->i", wp, wq)
            active = np.abs(c) > tol * a * b
            if not active.any():
                continue
            rotated = True
            cc = np.where(active, c, 1.0)
            zeta = (b - a) * (b + a) / (2.0 * cc)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(active, t, 0.0)
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = cs * t
            W[P] = cs[:, None] * wp - sn[:, None] * wq
            W[Q] = sn[:, None] * wp + cs[:, None] * wq
        if not rotated:
            break
    else:
        raise ConvergenceError(f"one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps")
    W = W[:r]
    sigma = np.linalg.norm(W, axis=1)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    U = (W[order] / np.where(sigma > 0, sigma, 1.0)[:, None]).T
    return sigma, U


def symmetric_cauchy_factor(x, floor: float = 1e-290) -> tuple[np.ndarray, np.ndarray]:
    """Pivoted factor ``C = X X^T`` of the SPD Cauchy matrix ``C_ij = 1/(x_i + x_j)``.

    Gaussian elimination with diagonal (complete) pivoting, done through the
    closed-form Schur-complement update ``C_ij * (x_i-x_k)(x_j-x_k)/((x_k+x_i)(x_k+x_j))``
    so that every entry is computed to high relative accuracy.  Elimination
    stops once the largest remaining pivot falls below ``floor``.

    Returns ``X`` (n x r, columns in pivot order) and the pivot order.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    s = np.ones(n)  # Schur complement is diag(s) C diag(s)
    remaining = np.ones(n, dtype=bool)
    columns, order = [], []
    for _ in range(n):
        idx = np.flatnonzero(remaining)
        diag = s[idx] ** 2 / (2.0 * x[idx])
        j = int(np.argmax(diag))
        if diag[j] < floor:
            break
        k = idx[j]
        col = np.zeros(n)
        col[idx] = s[idx] / (x[idx] + x[k]) * np.sqrt(2.0 * x[k])
        columns.append(col)
        order.append(k)
        remaining[k] = False
        rest = np.flatnonzero(remaining)
        s[rest] *= (x[rest] - x[k]) / (x[rest] + x[k])
    return np.array(columns).T.reshape(n, len(columns)), np.array(order, dtype=int)


@lru_cache(maxsize=16)
def _hilbert_eigen_cached(n: int):
    X, _ = symmetric_cauchy_factor(np.arange(n) + 0.5)
    sigma, U = one_sided_jacobi(X)
    w = sigma ** 2
    if U.shape[1] < n:
        U = np.hstack([U, _orthonormal_complement(U)])
        w = np.concatenate([w, np.zeros(n - w.size)])
    V = normalize_signs(U)
    V.setflags(write=False)
    w.setflags(write=False)
    return w, V


def hilbert_eigen(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of the n x n Hilbert matrix to high relative accuracy.

    ``H_ij = 1/(i+j-1)`` is the Cauchy matrix with nodes ``i - 1/2``; its
    structured factor avoids rounding the entries of H.  Eigenvalues too small
    for double precision (below ~1e-290) are reported as 0 and their
    eigenvectors complete the orthonormal basis.  Results are cached.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    w, V = _hilbert_eigen_cached(int(n))
    return w.copy(), V.copy()
