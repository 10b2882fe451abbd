"""Dense symmetric linear algebra and the special functions used everywhere else.

All functions are pure: they never mutate their inputs and hold no state, so
they are safe to call from any number of concurrent workers.  Matrices are
plain ``numpy`` arrays; "symmetric matrix" means symmetric to within a small
relative tolerance (text round-trips of transmitted matrices can lose exact
symmetry, so near-symmetric inputs are symmetrized rather than rejected).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DimensionError, NotPositiveDefiniteError, NumericalError

# Relative asymmetry tolerated before an input stops counting as symmetric.
SYM_RTOL = 1e-12

# Eigenvalue floor used when projecting onto the positive definite cone.
PD_EPSILON = 1e-5

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_square(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 1:
        raise DimensionError("matrix dimension must be >= 1")
    return a


def symmetrize(a) -> np.ndarray:
    """Return (A + A^T)/2."""
    a = _as_square(a)
    return (a + a.T) / 2.0


def is_symmetric(a, rtol: float = SYM_RTOL) -> bool:
    """True when the asymmetry of ``a`` is below ``rtol`` relative to its scale."""
    a = _as_square(a)
    scale = np.abs(a).max()
    if scale == 0.0:
        return True
    return float(np.abs(a - a.T).max()) <= rtol * scale


def ensure_symmetric(a, rtol: float = SYM_RTOL) -> np.ndarray:
    """Validate near-symmetry and return the symmetrized matrix.

    Raises :class:`DimensionError` for non-square input and ``ValueError``
    when the asymmetry exceeds the tolerance.
    """
    a = _as_square(a)
    if not is_symmetric(a, rtol):
        raise ValueError(
            f"matrix is not symmetric within relative tolerance {rtol:g}"
        )
    return symmetrize(a)


@dataclass(frozen=True)
class EigDecomp:
    """Spectral decomposition A = Q diag(values) Q^T.

    ``values`` are sorted in descending order and ``vectors`` holds the
    corresponding orthonormal eigenvectors as columns.
    """

    values: np.ndarray
    vectors: np.ndarray


def sym_eig(a) -> EigDecomp:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending."""
    a = ensure_symmetric(a)
    try:
        values, vectors = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        try:
            cond = float(np.linalg.cond(a))
        except np.linalg.LinAlgError:
            cond = float("inf")
        raise NumericalError(
            f"symmetric eigendecomposition did not converge: {exc}",
            condition_estimate=cond,
        ) from exc
    order = np.argsort(values)[::-1]
    return EigDecomp(values=values[order], vectors=vectors[:, order])


def min_eigenvalue(a) -> float:
    return float(sym_eig(a).values[-1])


def is_positive_definite(a, rtol: float = SYM_RTOL) -> bool:
    """True when ``a`` is (near-)symmetric with all eigenvalues > 0."""
    a = _as_square(a)
    if not is_symmetric(a, rtol):
        return False
    return min_eigenvalue(a) > 0.0


def inv_sqrt_pd(a) -> np.ndarray:
    """Inverse symmetric square root B = Q diag(v^{-1/2}) Q^T with B A B = I.

    Raises :class:`NotPositiveDefiniteError` naming the offending eigenvalue
    when ``a`` is not positive definite.
    """
    dec = sym_eig(a)
    smallest = float(dec.values[-1])
    if smallest <= 0.0:
        raise NotPositiveDefiniteError(
            "matrix is not positive definite; inverse square root undefined",
            eigenvalue=smallest,
        )
    b = (dec.vectors / np.sqrt(dec.values)) @ dec.vectors.T
    return symmetrize(b)


def sqrt_pd(a) -> np.ndarray:
    """Symmetric square root of a positive definite matrix."""
    dec = sym_eig(a)
    smallest = float(dec.values[-1])
    if smallest <= 0.0:
        raise NotPositiveDefiniteError(
            "matrix is not positive definite; square root undefined",
            eigenvalue=smallest,
        )
    b = (dec.vectors * np.sqrt(dec.values)) @ dec.vectors.T
    return symmetrize(b)


def vech(a) -> np.ndarray:
    """Stack the lower triangle (diagonal included) column by column."""
    a = ensure_symmetric(a)
    p = a.shape[0]
    iu = np.triu_indices(p)
    # Column-major lower triangle of A == row-major upper triangle of A^T.
    return a.T[iu].copy()


def vech_len(p: int) -> int:
    return p * (p + 1) // 2


def vech_dim(length: int) -> int:
    """Matrix dimension p such that p(p+1)/2 == length."""
    p = int(round((math.sqrt(8 * length + 1) - 1) / 2))
    if vech_len(p) != length:
        raise DimensionError(f"{length} is not a valid vech length")
    return p


def vech_inv(v, p: int) -> np.ndarray:
    """Inverse of :func:`vech`: rebuild the p x p symmetric matrix."""
    v = np.asarray(v, dtype=float).ravel()
    if p < 1:
        raise DimensionError("matrix dimension must be >= 1")
    if v.size != vech_len(p):
        raise DimensionError(
            f"vech vector has length {v.size}, expected {vech_len(p)} for p={p}"
        )
    a = np.zeros((p, p))
    iu = np.triu_indices(p)
    a.T[iu] = v
    upper = np.triu_indices(p, k=1)
    a[upper] = a.T[upper]
    return a


def pd_project(a, eps: float = PD_EPSILON) -> np.ndarray:
    """Project a (near-)symmetric matrix onto { eigenvalues >= eps }.

    Symmetrizes first, then clips each eigenvalue at ``eps`` and rebuilds.
    A matrix whose smallest eigenvalue already is >= eps is returned
    unchanged (no reconstruction round-off is introduced).
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    a = symmetrize(a)
    values, vectors = np.linalg.eigh(a)
    if values[0] >= eps:
        return a
    clipped = np.maximum(values, eps)
    return symmetrize((vectors * clipped) @ vectors.T)


def std_normal(u: float) -> tuple[float, float]:
    """Standard normal density and distribution function at ``u``.

    Returns ``(pdf, cdf)``.  The cdf is evaluated through ``erfc`` so there
    is no cancellation in either tail.
    """
    u = float(u)
    if not math.isfinite(u):
        raise ValueError("u must be finite")
    pdf = _INV_SQRT_2PI * math.exp(-0.5 * u * u)
    cdf = 0.5 * math.erfc(-u / _SQRT2)
    return pdf, cdf


def chi2_quantile(dof: int, alpha: float) -> float:
    """Upper-alpha quantile t of the chi-squared law: P(chi2_dof > t) = alpha.

    Inverts the regularized incomplete gamma with a safeguarded root search
    bracketed around the Wilson-Hilferty approximation.
    """
    if dof < 1 or int(dof) != dof:
        raise ValueError("dof must be a positive integer")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    dof = int(dof)
    k = dof / 2.0

    # f(t) = P(k, t/2) - (1 - alpha); increasing, f(0) < 0 < f(inf).
    target = 1.0 - alpha

    def f(t: float) -> float:
        return special.gammainc(k, t / 2.0) - target

    # Wilson-Hilferty initial guess for the bracket.
    z = float(special.ndtri(target))
    wh = dof * (1.0 - 2.0 / (9.0 * dof) + z * math.sqrt(2.0 / (9.0 * dof))) ** 3
    hi = max(wh, 1e-8)
    while f(hi) < 0.0:
        hi *= 2.0

    from scipy.optimize import brentq

    # f(0) = -(1 - alpha) < 0, so [0, hi] always brackets the root.
    t = brentq(f, 0.0, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=200)
    return float(t)
