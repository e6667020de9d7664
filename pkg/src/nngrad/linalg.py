"""Dense linear algebra, Kronecker-structured operations, and Gaussian sampling.

All matrices are plain ``numpy`` arrays in row-major storage. Symmetric
positive-definite (SPD) arguments are factored with an unpivoted Cholesky;
a factorization failure raises :class:`NotPositiveDefinite` instead of
silently regularizing, because keeping curvature matrices PSD is the
caller's contract.

Vectorization convention: ``vec`` stacks columns (Fortran order), so that
``(B kron A) vec(X) = vec(A X B^T)``. Kronecker-structured operators are
represented by :class:`KroneckerPair` and never densified here; tests
compare against explicit ``numpy.kron`` expansions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class NotPositiveDefinite(Exception):
    """Raised when a Cholesky pivot is not strictly positive.

    Signals a broken PSD invariant upstream; never caught-and-patched
    internally.
    """


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return (a + a.T) / 2.

    Exponential moving averages of outer products drift from exact symmetry
    at round-off scale; accumulation sites re-symmetrize with this helper.
    """
    return (a + a.T) / 2.0


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization (Fortran order)."""
    return np.asarray(m).reshape(-1, order="F")


def unvec(x: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`vec` for a given (rows, cols) shape."""
    return np.asarray(x).reshape(shape, order="F")


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T == a.

    Raises
    ------
    NotPositiveDefinite
        If any pivot is <= 0 (the matrix is not positive definite).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    try:
        return scipy.linalg.cholesky(a, lower=True)
    except scipy.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err)) from err


def spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for SPD ``a`` via Cholesky."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"rhs has {b.shape[0]} rows, matrix is {a.shape[0]}x{a.shape[1]}")
    chol = cholesky(a)
    return scipy.linalg.cho_solve((chol, True), b)


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Explicit inverse of an SPD matrix, symmetrized."""
    return symmetrize(spd_solve(a, np.eye(np.asarray(a).shape[0])))


def spd_logdet(a: np.ndarray) -> float:
    """log det of an SPD matrix via its Cholesky factor."""
    chol = cholesky(a)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


@dataclass(frozen=True)
class KroneckerPair:
    """Kronecker-structured SPD operator ``scale * (left kron right)``.

    ``left`` acts on the column index and ``right`` on the row index of the
    matrix-shaped operand: applying the pair to ``vec(V)`` equals
    ``vec(scale * right @ V @ left)`` for symmetric factors.
    """

    left: np.ndarray
    right: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def shape_of_operand(self) -> tuple[int, int]:
        return (self.right.shape[0], self.left.shape[0])


def _check_operand(k: KroneckerPair, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != k.shape_of_operand:
        raise ValueError(
            f"operand shape {v.shape} does not match Kronecker pair "
            f"(rows {k.right.shape[0]}, cols {k.left.shape[0]})"
        )
    return v


def kron_solve(k: KroneckerPair, v: np.ndarray) -> np.ndarray:
    """Apply the inverse of ``scale * (left kron right)`` to a matrix-shaped v.

    Returns ``(1/scale) * right^-1 @ v @ left^-1``, which reshapes the dense
    solve ``(scale * left kron right)^-1 vec(v)``. Cost is two small SPD
    solves instead of one solve of size rows*cols.
    """
    v = _check_operand(k, v)
    x = spd_solve(k.right, v)
    x = spd_solve(k.left, x.T).T
    return x / k.scale


def kron_quadratic_form(k: KroneckerPair, v: np.ndarray) -> float:
    """vec(v)^T (scale * left kron right) vec(v), without densifying.

    Equals ``scale * trace(left^T v^T right v)``; nonnegative for SPD
    factors.
    """
    v = _check_operand(k, v)
    return float(k.scale * np.sum(v * (k.right @ v @ k.left)))


def sample_gaussian(mean, cov, rng: np.random.Generator, size: int | None = None):
    """Draw from N(mean, cov) as mean + L z with L the Cholesky factor of cov.

    Deterministic given the generator state. With ``size`` given, returns a
    (size, d) array of independent draws sharing one factorization.
    """
    mean = np.asarray(mean, dtype=float)
    chol = cholesky(cov)
    if size is None:
        return mean + chol @ rng.standard_normal(mean.shape[0])
    z = rng.standard_normal((size, mean.shape[0]))
    return mean + z @ chol.T


def sample_mvg(
    m: np.ndarray,
    row_cov: np.ndarray,
    col_cov: np.ndarray,
    rng: np.random.Generator,
    size: int | None = None,
):
    """Draw a matrix W with vec(W) ~ N(vec(M), col_cov kron row_cov).

    W = M + L_r Z L_c^T where Z is i.i.d. standard normal, ``row_cov`` is the
    covariance among rows and ``col_cov`` among columns.
    """
    m = np.asarray(m, dtype=float)
    if row_cov.shape[0] != m.shape[0] or col_cov.shape[0] != m.shape[1]:
        raise ValueError(
            f"mean is {m.shape}, row_cov {row_cov.shape}, col_cov {col_cov.shape}"
        )
    lr = cholesky(row_cov)
    lc = cholesky(col_cov)
    if size is None:
        z = rng.standard_normal(m.shape)
        return m + lr @ z @ lc.T
    z = rng.standard_normal((size,) + m.shape)
    return m + np.einsum("ij,njk,lk->nil", lr, z, lc)


def sample_mvg_chol(
    m: np.ndarray, row_chol: np.ndarray, col_chol: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Matrix-variate normal draw from precomputed covariance factors."""
    z = rng.standard_normal(m.shape)
    return m + row_chol @ z @ col_chol.T
