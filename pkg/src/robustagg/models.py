"""M-estimation problems (logistic and linear regression) and local fitting.

A local server fits its own shard and reports the estimate together with the
empirical sandwich variance of the estimator.  Observation sequences are held
columnar (response vector plus design matrix) so the criterion, gradient and
Hessian evaluate as vectorized reductions; indexing an :class:`Observations`
still yields individual ``(y, x)`` pairs.

Summation discipline: fitting uses single-threaded ``einsum``/``add.reduce``
reductions (deterministic for a fixed observation order), while the sandwich
variance accumulates every entry with exactly rounded summation so the
transmitted matrix is bit-identical under any permutation of the shard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .errors import (
    DimensionError,
    NonConvergenceError,
    RankDeficiencyError,
    SeparationError,
    SingularMatrixError,
)
from . import numkit

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100

# Iterate growth beyond this multiple of the first Newton step signals that
# the step norms diverge (complete separation).
_DIVERGENCE_RATIO = 1e4

# A fit whose every margin exceeds this classifies each observation with
# probability within ~1e-6 of its label: the likelihood has no interior
# maximizer and the gradient tolerance was reached only through saturation.
_SATURATED_MARGIN = 13.8


class ModelKind(Enum):
    LOGISTIC = "logistic"
    LINEAR = "linear"


@dataclass(frozen=True)
class ModelSpec:
    """An M-estimation problem: which criterion, and how many parameters."""

    kind: ModelKind
    p: int

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("parameter dimension p must be >= 1")

    @classmethod
    def logistic(cls, p: int) -> "ModelSpec":
        return cls(ModelKind.LOGISTIC, p)

    @classmethod
    def linear(cls, p: int) -> "ModelSpec":
        return cls(ModelKind.LINEAR, p)


class Observations:
    """A sequence of observations (y_i, x_i), stored columnar and immutable."""

    def __init__(self, y, X):
        y = np.ascontiguousarray(y, dtype=float)
        X = np.ascontiguousarray(X, dtype=float)
        if y.ndim != 1:
            raise DimensionError("y must be one-dimensional")
        if X.ndim != 2:
            raise DimensionError("X must be two-dimensional")
        if X.shape[0] != y.shape[0]:
            raise DimensionError(
                f"y has {y.shape[0]} rows but X has {X.shape[0]}"
            )
        if not (np.isfinite(y).all() and np.isfinite(X).all()):
            raise ValueError("observations must be finite")
        y.flags.writeable = False
        X.flags.writeable = False
        self.y = y
        self.X = X

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Observations(self.y[i], self.X[i])
        return float(self.y[i]), self.X[i]


@dataclass(frozen=True)
class LocalFit:
    """One server's fitted estimate and its sandwich variance.

    ``sigma_pd`` is False when the sandwich came out numerically singular or
    indefinite (possible for degenerate shards, e.g. an exact fit with zero
    residuals); callers may repair such a matrix with ``numkit.pd_project``.
    """

    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    n_k: int
    server_id: int | str
    newton_iters: int
    grad_norm: float
    sigma_pd: bool = True

    def __post_init__(self):
        self.theta_hat.flags.writeable = False
        self.sigma_hat.flags.writeable = False


def _check_data(model: ModelSpec, data: Observations) -> None:
    if data.n == 0:
        raise DimensionError("observation sequence is empty")
    if data.p != model.p:
        raise DimensionError(
            f"model expects p={model.p} covariates, data has {data.p}"
        )
    if model.kind is ModelKind.LOGISTIC:
        bad = ~np.isin(data.y, (0.0, 1.0))
        if bad.any():
            raise ValueError("logistic responses must be 0 or 1")


def criterion_eval(model: ModelSpec, data: Observations, theta):
    """Averaged criterion value with its analytic gradient and Hessian.

    Returns ``(value, gradient, hessian)`` of ``n^{-1} sum_i m(Z_i; theta)``.
    Logistic log-likelihood terms are evaluated through ``log1p``/``expit``
    so long linear predictors cannot overflow.
    """
    _check_data(model, data)
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != model.p:
        raise DimensionError(f"theta has length {theta.size}, expected {model.p}")
    y, X = data.y, data.X
    n = data.n
    eta = X @ theta

    if model.kind is ModelKind.LINEAR:
        resid = y - eta
        value = -float(np.add.reduce(resid * resid)) / n
        grad = 2.0 * np.einsum("i,ij->j", resid, X) / n
        hess = -2.0 * np.einsum("ij,ik->jk", X, X) / n
        return value, grad, numkit.symmetrize(hess)

    # Logistic: m = y*eta - log(1 + e^eta), stable via logaddexp.
    pi = expit(eta)
    value = float(np.add.reduce(y * eta - np.logaddexp(0.0, eta))) / n
    grad = np.einsum("i,ij->j", y - pi, X) / n
    w = pi * (1.0 - pi)
    hess = -np.einsum("i,ij,ik->jk", w, X, X) / n
    return value, grad, numkit.symmetrize(hess)


def _per_obs_gradients(model: ModelSpec, data: Observations, theta) -> np.ndarray:
    """Matrix whose i-th row is grad m(Z_i; theta)."""
    eta = data.X @ np.asarray(theta, dtype=float).ravel()
    if model.kind is ModelKind.LINEAR:
        return 2.0 * (data.y - eta)[:, None] * data.X
    return (data.y - expit(eta))[:, None] * data.X


def _fsum_mean_outer(rows: np.ndarray) -> np.ndarray:
    """Exactly rounded mean of the outer products of the given row vectors.

    ``math.fsum`` yields the correctly rounded sum irrespective of the order
    of the terms, which makes the result invariant under row permutation.
    """
    n, p = rows.shape
    out = np.empty((p, p))
    for j in range(p):
        for k in range(j, p):
            s = math.fsum((rows[:, j] * rows[:, k]).tolist()) / n
            out[j, k] = s
            out[k, j] = s
    return out


def sandwich_variance(
    model: ModelSpec, data: Observations, theta_hat, *, allow_singular: bool = False
) -> np.ndarray:
    """Empirical sandwich variance U^{-1} V U^{-1} at ``theta_hat``.

    V is the centered average of outer products of per-observation gradients
    (the mean gradient is subtracted even though it is ~0 at a solution) and
    U is the negative averaged Hessian.  With ``allow_singular=True`` a
    singular U is inverted in the pseudo-inverse sense, which the simulation
    layer needs when recomputing the matrix at an extreme contaminated
    parameter; by default a singular U raises.
    """
    _check_data(model, data)
    theta_hat = np.asarray(theta_hat, dtype=float).ravel()
    n, p = data.n, model.p

    grads = _per_obs_gradients(model, data, theta_hat)
    gbar = np.array([math.fsum(grads[:, j].tolist()) / n for j in range(p)])
    v_hat = _fsum_mean_outer(grads - gbar)

    if model.kind is ModelKind.LINEAR:
        u_hat = 2.0 * _fsum_mean_outer(data.X)
    else:
        w = expit(data.X @ theta_hat)
        w = w * (1.0 - w)
        u_hat = _fsum_mean_outer(np.sqrt(w)[:, None] * data.X)

    if allow_singular:
        u_inv = _pinv_sym(u_hat)
        sigma = u_inv @ v_hat @ u_inv
    else:
        try:
            half = np.linalg.solve(u_hat, v_hat)
            sigma = np.linalg.solve(u_hat, half.T).T
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                "averaged Hessian is singular; sandwich variance undefined"
            ) from None
    return numkit.symmetrize(sigma)


def _pinv_sym(a: np.ndarray) -> np.ndarray:
    """Eigenvalue-thresholded pseudo-inverse of a symmetric matrix.

    Besides the usual relative cutoff, eigenvalues below an absolute floor
    near machine precision are treated as exact zeros: for a saturated
    logistic fit the averaged Hessian can carry eigenvalues around 1e-200
    that are pure rounding debris, and inverting them would manufacture
    astronomically large variance matrices.
    """
    values, vectors = np.linalg.eigh(numkit.symmetrize(a))
    cutoff = max(np.abs(values).max() * 1e-12, 64.0 * np.finfo(float).eps)
    keep = np.abs(values) > cutoff
    inv = np.zeros_like(values)
    inv[keep] = 1.0 / values[keep]
    return numkit.symmetrize((vectors * inv) @ vectors.T)


def fit_local(
    model: ModelSpec,
    data: Observations,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    server_id: int | str = 0,
) -> LocalFit:
    """Maximize the local criterion on one shard.

    Linear regression solves the normal equations in closed form; logistic
    regression runs Newton-Raphson from the zero vector with step halving.
    Raises :class:`SeparationError` when the logistic iterates diverge (or
    only one response class is present), :class:`RankDeficiencyError` for a
    singular Hessian, and :class:`NonConvergenceError` at the iteration cap.
    """
    _check_data(model, data)
    if data.n < model.p:
        raise DimensionError(
            f"need at least p={model.p} observations, shard has {data.n}"
        )

    if model.kind is ModelKind.LINEAR:
        xtx = np.einsum("ij,ik->jk", data.X, data.X)
        xty = data.X.T @ data.y
        try:
            theta = np.linalg.solve(xtx, xty)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(
                "design matrix is rank deficient; least squares has no unique solution"
            ) from None
        _, grad, _ = criterion_eval(model, data, theta)
        iters = 0
    else:
        classes = np.unique(data.y)
        if classes.size < 2:
            raise SeparationError(
                "only one response class present; logistic MLE does not exist"
            )
        theta = np.zeros(model.p)
        value, grad, hess = criterion_eval(model, data, theta)
        iters = 0
        first_step_norm = None
        converged = float(np.linalg.norm(grad)) <= tol
        while not converged:
            if iters >= max_iter:
                raise NonConvergenceError(
                    f"logistic fit did not converge in {max_iter} iterations",
                    best=theta,
                    residual=float(np.linalg.norm(grad)),
                )
            try:
                step = np.linalg.solve(-hess, grad)
            except np.linalg.LinAlgError:
                raise RankDeficiencyError(
                    "logistic Hessian is singular at the current iterate"
                ) from None
            # Step halving: keep the criterion from decreasing.
            scale = 1.0
            for _ in range(60):
                cand = theta + scale * step
                cand_value, cand_grad, cand_hess = criterion_eval(model, data, cand)
                if cand_value >= value - 1e-14 * abs(value):
                    break
                scale /= 2.0
            theta, value, grad, hess = cand, cand_value, cand_grad, cand_hess
            iters += 1
            norm = float(np.linalg.norm(theta))
            if first_step_norm is None:
                first_step_norm = norm
            if norm > _DIVERGENCE_RATIO * max(1.0, first_step_norm):
                raise SeparationError(
                    "logistic step norms diverged; data appear completely separated"
                )
            converged = float(np.linalg.norm(grad)) <= tol
        margins = (2.0 * data.y - 1.0) * (data.X @ theta)
        if data.n > 0 and float(margins.min()) > _SATURATED_MARGIN:
            raise SeparationError(
                "every observation is classified with saturated probability; "
                "the data are completely separated"
            )

    sigma = sandwich_variance(model, data, theta)
    return LocalFit(
        theta_hat=theta.copy(),
        sigma_hat=sigma,
        n_k=data.n,
        server_id=server_id,
        newton_iters=iters,
        grad_norm=float(np.linalg.norm(grad)),
        sigma_pd=numkit.is_positive_definite(sigma),
    )
