import numpy as np
import pytest

from sfolab.basis import hilbert_matrix
from sfolab.linalg import (
    ConvergenceError,
    SingularMatrixError,
    hilbert_eigen,
    normalize_signs,
    one_sided_jacobi,
    qr_orthonormalize,
    solve_dense,
    sym_eigen,
    symmetric_cauchy_factor,
)
import sfolab.linalg as linalg


def random_symmetric(rng, n):
    A = rng.standard_normal((n, n))
    return A + A.T


def test_identity_eigen():
    w, V = sym_eigen(np.eye(3))
    assert np.array_equal(w, np.ones(3))
    assert np.allclose(np.abs(V), np.eye(3)[:, np.argmax(np.abs(V), axis=0)])


def test_hilbert_2x2_closed_form():
    w, V = sym_eigen([[1.0, 0.5], [0.5, 1.0 / 3.0]])
    s = np.sqrt(13.0)
    assert w[0] == pytest.approx((4 + s) / 6, abs=1e-14)
    assert w[1] == pytest.approx((4 - s) / 6, abs=1e-14)
    assert round(w[0], 5) == 1.26759 and round(w[1], 5) == 0.06574


@pytest.mark.parametrize("n", [2, 3, 5, 16, 33, 64, 65, 100])
def test_residual_and_orthonormality(rng, n):
    A = random_symmetric(rng, n)
    tol = 1e-12
    w, V = sym_eigen(A, tol)
    nA = np.linalg.norm(A)
    assert np.linalg.norm(A @ V - V * w) <= tol * nA
    assert np.linalg.norm(A - (V * w) @ V.T) <= 10 * tol * nA
    assert np.abs(V.T @ V - np.eye(n)).max() <= 1e-10
    assert np.all(np.diff(w) <= 0)


def test_sign_convention_and_determinism(rng):
    A = random_symmetric(rng, 40)
    w1, V1 = sym_eigen(A)
    w2, V2 = sym_eigen(A.copy())
    assert np.array_equal(w1, w2) and np.array_equal(V1, V2)
    lead = np.argmax(np.abs(V1), axis=0)
    assert np.all(V1[lead, np.arange(40)] > 0)


def test_degenerate_spectrum():
    A = np.diag([3.0, 1, 1, 1, 0] * 20)
    w, V = sym_eigen(A)
    assert np.array_equal(w[:20], np.full(20, 3.0))
    assert np.abs(A @ V - V * w).max() == 0.0


def test_hilbert_256_decay():
    H = hilbert_matrix(256)
    w, V = sym_eigen(H)
    assert w[24] / w[0] < 1e-12
    assert w[19] / w[0] < 1e-9
    assert np.linalg.norm(H @ V - V * w) <= 1e-12 * np.linalg.norm(H)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        sym_eigen(np.ones((2, 3)))
    with pytest.raises(ValueError):
        sym_eigen([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        sym_eigen(np.eye(2), tol=0.0)
    with pytest.raises(ValueError):
        sym_eigen([[np.nan, 0.0], [0.0, 1.0]])


def test_sweep_cap_is_reported(monkeypatch, rng):
    monkeypatch.setattr(linalg, "MAX_SWEEPS", 1)
    with pytest.raises(ConvergenceError):
        sym_eigen(random_symmetric(rng, 12))


def test_normalize_signs():
    V = np.array([[-1.0, 0.5], [0.2, -0.5]])
    out = normalize_signs(V)
    assert np.array_equal(out, [[1.0, 0.5], [-0.2, -0.5]])
    assert np.array_equal(normalize_signs([[0.3], [-0.3]]), [[0.3], [-0.3]])


def test_qr_examples(rng):
    assert np.allclose(qr_orthonormalize(np.eye(4)), np.eye(4), atol=1e-15)
    Q = qr_orthonormalize([[2.0, 0.0], [0.0, 3.0]])
    assert np.allclose(np.abs(Q), np.eye(2), atol=1e-15)
    A = rng.standard_normal((64, 16))
    Q = qr_orthonormalize(A)
    assert np.abs(Q.T @ Q - np.eye(16)).max() <= 1e-12
    # same span: A is reproduced by projecting onto Q
    assert np.abs(Q @ (Q.T @ A) - A).max() <= 1e-12 * np.abs(A).max()


def test_qr_rank_deficiency():
    A = np.ones((5, 2))
    with pytest.raises(SingularMatrixError):
        qr_orthonormalize(A)
    with pytest.raises(ValueError):
        qr_orthonormalize(np.ones((2, 3)))


def test_solve_examples(rng):
    b = rng.standard_normal(5)
    assert np.array_equal(solve_dense(np.eye(5), b), b)
    assert np.allclose(solve_dense(np.diag([2.0, 4.0]), [2.0, 8.0]), [1.0, 2.0], atol=1e-15)
    A = rng.standard_normal((30, 30))
    b = rng.standard_normal(30)
    x = solve_dense(A, b)
    bound = 1e-9 * (np.abs(A).sum(axis=1).max() * np.abs(x).max() + np.abs(b).max())
    assert np.abs(A @ x - b).max() <= bound


def test_solve_tridiagonal_green():
    N = 101
    A = 2.5 * np.eye(N) + np.eye(N, k=1) + np.eye(N, k=-1)
    b = np.zeros(N)
    b[N // 2] = 1.0
    x = solve_dense(A, b)
    # closed form for alpha=2.5, beta=1: r=-0.5, amplitude 2/3
    t = np.arange(-20, 21)
    assert np.abs(x[N // 2 + t] - (2.0 / 3.0) * (-0.5) ** np.abs(t)).max() <= 1e-8


def test_solve_singular():
    with pytest.raises(SingularMatrixError):
        solve_dense([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0])


def test_one_sided_jacobi_matches_dense(rng):
    X = rng.standard_normal((20, 12))
    sigma, U = one_sided_jacobi(X)
    wd, Vd = sym_eigen(X @ X.T)
    assert np.allclose(sigma ** 2, wd[:12], rtol=1e-12)
    assert np.abs(normalize_signs(U) - Vd[:, :12]).max() <= 1e-10
    assert np.abs(U.T @ U - np.eye(12)).max() <= 1e-13


def test_cauchy_factor_reproduces_hilbert():
    x = np.arange(12) + 0.5
    F, perm = symmetric_cauchy_factor(x)
    assert sorted(perm) == list(range(12))
    assert np.abs(F @ F.T - hilbert_matrix(12)).max() <= 1e-15


def test_hilbert_eigen_agrees_with_jacobi():
    w, V = hilbert_eigen(64)
    wd, Vd = sym_eigen(hilbert_matrix(64))
    assert np.abs(w[:10] - wd[:10]).max() <= 1e-13 * w[0]
    assert np.abs(V[:, :8] - Vd[:, :8]).max() <= 1e-10  # error grows like eps/gap
    assert np.all(np.diff(w) < 0) and np.all(w > 0)


def test_hilbert_eigen_high_precision():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 60
    n = 16
    H = mpmath.matrix(n, n)
    for i in range(n):
        for j in range(n):
            H[i, j] = mpmath.mpf(1) / (i + j + 1)
    E, _ = mpmath.eigsy(H)
    ref = np.sort(np.array([float(e) for e in E]))[::-1]
    w, _ = hilbert_eigen(n)
    assert np.abs(w / ref - 1).max() <= 1e-12
