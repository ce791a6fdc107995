import numpy as np
import pytest

from pfn.eigen import (
    JACOBI_MAX_N,
    NotSymmetricError,
    jacobi_eigh,
    leading_eigenvectors,
    symmetric_eigendecomposition,
)


def random_symmetric(rng, n):
    a = rng.normal(size=(n, n))
    return (a + a.T) / 2


def residual_and_orthogonality(a, w, v):
    res = max(np.linalg.norm(a @ v[:, i] - w[i] * v[:, i]) for i in range(len(w)))
    orth = np.abs(v.T @ v - np.eye(v.shape[1])).max()
    return res / max(np.linalg.norm(a), 1e-300), orth


def test_identity():
    w, v = jacobi_eigh(np.eye(3))
    np.testing.assert_array_equal(w, [1, 1, 1])
    np.testing.assert_allclose(v.T @ v, np.eye(3), atol=1e-15)


def test_diagonal():
    w, v = jacobi_eigh(np.diag([1.0, 3.0]))
    np.testing.assert_array_equal(w, [3, 1])
    np.testing.assert_allclose(np.abs(v), [[0, 1], [1, 0]], atol=1e-15)


def test_two_by_two_closed_form():
    w, v = jacobi_eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert abs(w[0] - 3) <= 1e-10 and abs(w[1] - 1) <= 1e-10
    s = 1 / np.sqrt(2)
    assert np.abs(np.abs(v[:, 0]) - [s, s]).max() <= 1e-10
    assert abs(v[0, 0] * v[1, 0] - 0.5) <= 1e-10  # same sign
    assert abs(v[0, 1] * v[1, 1] + 0.5) <= 1e-10  # opposite signs


@pytest.mark.parametrize("n", [1, 2, 3, 7, 16, 33, 50])
def test_random_matrices(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        a = random_symmetric(rng, n)
        w, v = jacobi_eigh(a)
        res, orth = residual_and_orthogonality(a, w, v)
        assert res <= 1e-8 and orth <= 1e-8
        assert np.all(np.diff(w) <= 0)
        np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(a))[::-1], atol=1e-9 * max(1, np.abs(w).max()))


def test_zero_matrix_and_degenerate_spectrum():
    w, v = jacobi_eigh(np.zeros((4, 4)))
    assert np.all(w == 0)
    a = np.ones((5, 5))  # eigenvalues 5, 0, 0, 0, 0
    w, v = jacobi_eigh(a)
    np.testing.assert_allclose(w, [5, 0, 0, 0, 0], atol=1e-12)
    res, orth = residual_and_orthogonality(a, w, v)
    assert res <= 1e-8 and orth <= 1e-8


def test_rejects_non_symmetric():
    with pytest.raises(NotSymmetricError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(NotSymmetricError):
        jacobi_eigh(np.zeros((2, 3)))


def test_dispatch_and_lapack_agree():
    rng = np.random.default_rng(11)
    a = random_symmetric(rng, JACOBI_MAX_N + 6)
    w, v = symmetric_eigendecomposition(a)
    res, orth = residual_and_orthogonality(a, w, v)
    assert res <= 1e-8 and orth <= 1e-8
    wj, _ = symmetric_eigendecomposition(a, "jacobi")
    np.testing.assert_allclose(w, wj, atol=1e-9)
    with pytest.raises(ValueError):
        symmetric_eigendecomposition(a, "power")


@pytest.mark.parametrize("n", [10, 90])
def test_leading_eigenvectors(n):
    rng = np.random.default_rng(n)
    a = random_symmetric(rng, n)
    w, v = leading_eigenvectors(a, 3)
    assert v.shape == (n, 3)
    np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(a))[::-1][:3], atol=1e-9)
    res, orth = residual_and_orthogonality(a, w, v)
    assert res <= 1e-8 and orth <= 1e-8
    with pytest.raises(ValueError):
        leading_eigenvectors(a, 0)
