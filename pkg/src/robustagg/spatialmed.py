"""Weighted spatial median and its application to variance-matrix aggregation.

The spatial median of points x_1..x_K with weights w_k minimizes
``sum_k w_k ||x_k - eta||_2``.  It always lies in the convex hull of the
points, which is what guarantees positive definiteness when the points are
half-vectorized positive definite matrices: any convex combination of PD
matrices is PD.

The solver is a Weiszfeld iteration with the Vardi-Zhang correction for
iterates that land on (or within 1e-12 of) a data point, where the plain
update is undefined.  Exact duplicate points are merged up front so the
anchor test sees their combined weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NonConvergenceError, NumericalError
from . import numkit

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 500

_ANCHOR_ATOL = 1e-12


@dataclass(frozen=True)
class WeightedPoint:
    value: np.ndarray
    weight: float

    def __post_init__(self):
        object.__setattr__(self, "value", np.array(self.value, dtype=float).ravel())
        if not (self.weight > 0.0 and math.isfinite(self.weight)):
            raise ValueError("weight must be positive and finite")
        if not np.isfinite(self.value).all():
            raise ValueError("point coordinates must be finite")
        self.value.flags.writeable = False


@dataclass
class SpatialMedianResult:
    eta: np.ndarray
    iterations: int
    objective: float
    anchored: bool


def weighted_median(values, weights) -> float:
    """Lower weighted median: smallest v with cumulative weight >= half."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    half = cum[-1] / 2.0
    idx = int(np.searchsorted(cum, half))
    return float(values[order][min(idx, values.size - 1)])


def _objective(x: np.ndarray, w: np.ndarray, eta: np.ndarray) -> float:
    dist = np.linalg.norm(x - eta, axis=1)
    return math.fsum((w * dist).tolist())


def _merge_duplicates(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Collapse exactly equal rows, summing their weights."""
    uniq, inverse = np.unique(x, axis=0, return_inverse=True)
    if uniq.shape[0] == x.shape[0]:
        return x, w
    merged_w = np.zeros(uniq.shape[0])
    np.add.at(merged_w, inverse, w)
    return uniq, merged_w


def spatial_median(
    points,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> SpatialMedianResult:
    """Minimize the weighted sum of Euclidean distances to the given points.

    Convergence is declared when the first-order condition holds: either the
    weighted sum of unit vectors toward the non-coincident points has norm
    <= ``tol``, or the iterate sits on a data point whose weight dominates
    the pull of all the others (the subgradient condition for an anchored
    optimum).
    """
    pts = list(points)
    if not pts:
        raise ValueError("at least one point is required")
    d = pts[0].value.size
    for pt in pts:
        if pt.value.size != d:
            raise DimensionError("points disagree on dimension")
    x_all = np.stack([pt.value for pt in pts])
    w_all = np.array([pt.weight for pt in pts])
    x, w = _merge_duplicates(x_all, w_all)
    k = x.shape[0]

    if k == 1:
        return SpatialMedianResult(eta=x[0].copy(), iterations=0, objective=0.0, anchored=True)

    if k == 2:
        # Two distinct points: the heavier one is optimal (its weight bounds
        # the pull of the other).  With equal weights every point of the
        # segment is optimal; return the midpoint and flag non-uniqueness
        # through anchored=False.
        if w[0] > w[1]:
            eta = x[0].copy()
            anchored = True
        elif w[1] > w[0]:
            eta = x[1].copy()
            anchored = True
        else:
            eta = (x[0] + x[1]) / 2.0
            anchored = False
        return SpatialMedianResult(
            eta=eta, iterations=0, objective=_objective(x, w, eta), anchored=anchored
        )

    scale = np.maximum(1.0, np.linalg.norm(x, axis=1))
    eta = np.array([weighted_median(x[:, j], w) for j in range(d)])
    iterations = 0
    best_eta, best_foc = eta.copy(), math.inf

    def anchored_at(j: int) -> SpatialMedianResult | None:
        # Subgradient optimality at data point j: the pull of all the other
        # points must not exceed its own weight.  The condition is sufficient
        # for global optimality, so it may be tested at any time.
        others = np.arange(k) != j
        diff_j = x[others] - x[j]
        dist_j = np.linalg.norm(diff_j, axis=1)
        pull = (w[others] / dist_j) @ diff_j
        if float(np.linalg.norm(pull)) <= w[j]:
            return SpatialMedianResult(
                eta=x[j].copy(),
                iterations=iterations,
                objective=_objective(x, w, x[j]),
                anchored=True,
            )
        return None

    prev_delta = None
    while True:
        diff = x - eta
        dist = np.linalg.norm(diff, axis=1)
        nearest = int(np.argmin(dist / np.maximum(scale, 1.0)))
        anchored = anchored_at(nearest)
        if anchored is not None:
            return anchored
        coincident = dist <= _ANCHOR_ATOL * scale

        if coincident.any():
            # The iterate sits on a data point that is not the optimum;
            # Vardi-Zhang moves off it, damped by the point's weight.
            j = int(np.argmin(dist))
            others = np.arange(k) != j
            pull = (w[others] / dist[others]) @ diff[others]
            pull_norm = float(np.linalg.norm(pull))
            t_plain = (w[others] / dist[others]) @ x[others] / np.sum(w[others] / dist[others])
            r = w[j] / pull_norm
            eta_new = (1.0 - r) * t_plain + r * eta
            prev_delta = None
        else:
            foc = (w / dist) @ diff
            foc_norm = float(np.linalg.norm(foc))
            if foc_norm < best_foc:
                best_eta, best_foc = eta.copy(), foc_norm
            if foc_norm <= tol:
                return SpatialMedianResult(
                    eta=eta,
                    iterations=iterations,
                    objective=_objective(x, w, eta),
                    anchored=False,
                )
            inv = w / dist
            eta_new = (inv @ x) / inv.sum()
            # The plain iteration converges only linearly, with rate close to
            # one when the optimum sits just off a data point.  Successive
            # steps are then nearly collinear with a stable contraction
            # factor, so an Aitken jump to the geometric-series limit cuts
            # through the crawl; it is accepted only if it does not increase
            # the objective.
            delta = eta_new - eta
            if prev_delta is not None:
                dn = float(np.linalg.norm(delta))
                pn = float(np.linalg.norm(prev_delta))
                if dn > 0.0 and pn > 0.0:
                    cos = float(delta @ prev_delta) / (dn * pn)
                    rho = dn / pn
                    if cos > 0.99 and 0.2 < rho < 0.9999:
                        cand = eta_new + delta * (rho / (1.0 - rho))
                        if _objective(x, w, cand) <= _objective(x, w, eta_new):
                            eta_new = cand
                            delta = None
            prev_delta = delta

        if iterations >= max_iter:
            raise NonConvergenceError(
                f"spatial median did not converge in {max_iter} iterations",
                best=best_eta,
                residual=best_foc,
            )
        eta = eta_new
        iterations += 1


def aggregate_sigma(
    estimates,
    eps: float = numkit.PD_EPSILON,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> np.ndarray:
    """Robustly aggregate the transmitted variance matrices.

    Any received matrix that is asymmetric or not positive definite is first
    repaired by symmetrizing and clipping its eigenvalues at ``eps``; the
    half-vectorized matrices are then combined by the weighted spatial
    median (weights sqrt(n_k)) and the result is rebuilt.  Because every
    input to the median is PD and the median lies in their convex hull, the
    output is PD; that is asserted before returning.
    """
    ests = sorted(
        list(estimates), key=lambda e: (isinstance(e.server_id, str), e.server_id)
    )
    if not ests:
        raise ValueError("at least one local estimate is required")
    p = ests[0].p

    points = []
    for e in ests:
        s = e.sigma_star
        if s.shape != (p, p):
            raise DimensionError("variance matrices disagree on dimension")
        if numkit.is_symmetric(s) and numkit.min_eigenvalue(numkit.symmetrize(s)) > 0.0:
            kept = s
        else:
            kept = numkit.pd_project(s, eps)
        points.append(WeightedPoint(value=numkit.vech(kept), weight=math.sqrt(e.n_k)))

    result = spatial_median(points, tol=tol, max_iter=max_iter)
    sigma = numkit.vech_inv(result.eta, p)
    smallest = numkit.min_eigenvalue(sigma)
    if smallest <= 0.0:
        raise NumericalError(
            f"aggregated variance matrix lost positive definiteness "
            f"(min eigenvalue {smallest:.3e})"
        )
    return sigma
