"""Two-step detection of contaminated transmitted estimates.

Step 1 flags a server whose estimate sits too far from the robust aggregate
in Mahalanobis distance (d1, standardized by the aggregated variance).
Step 2 runs only for servers that pass step 1 and repeats the test with the
server's own transmitted variance matrix (d2); a variance matrix that is not
even positive definite is itself evidence of contamination, since an
uncontaminated sandwich estimate is PD by construction.  Both distances are
asymptotically sqrt(chi-squared) with p degrees of freedom for clean
servers, so the common threshold is sqrt of the upper-alpha chi-squared
quantile.

The per-server tests are applied exactly as stated, once per server; no
multiplicity correction across the K servers is attempted (none is part of
the procedure), so with K servers about alpha * K clean servers will be
flagged on average.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NotPositiveDefiniteError
from . import numkit
from .aggregate import LocalEstimate

DEFAULT_ALPHA = 0.05


@dataclass
class ServerDetection:
    """Distances and flags for one server.

    ``d2`` is None when step 2 was gated off (theta already flagged) or when
    the server's variance matrix was not invertible as a PD matrix; in the
    latter case ``sigma_flagged`` is True.  ``error`` records a per-server
    computation failure without aborting the rest of the report.
    """

    server_id: int | str
    n_k: int
    d1: float | None
    d2: float | None
    theta_flagged: bool
    sigma_flagged: bool
    error: str | None = None


@dataclass
class DetectionReport:
    records: list[ServerDetection]
    alpha: float
    threshold: float
    p: int

    def flagged_theta_ids(self) -> list:
        return [r.server_id for r in self.records if r.theta_flagged]

    def flagged_sigma_ids(self) -> list:
        return [r.server_id for r in self.records if r.sigma_flagged]

    def to_csv(self, fileobj) -> None:
        """Write one row per server: id, n_k, d1, d2, flags, error."""
        writer = csv.writer(fileobj, lineterminator="\n")
        writer.writerow(
            ["server_id", "n_k", "d1", "d2", "theta_flagged", "sigma_flagged", "error"]
        )
        for r in self.records:
            writer.writerow(
                [
                    r.server_id,
                    r.n_k,
                    "" if r.d1 is None else repr(r.d1),
                    "" if r.d2 is None else repr(r.d2),
                    r.theta_flagged,
                    r.sigma_flagged,
                    "" if r.error is None else r.error,
                ]
            )

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


def _quad_form(diff: np.ndarray, sigma: np.ndarray) -> float:
    """diff^T sigma^{-1} diff, clipped at zero against rounding."""
    sol = np.linalg.solve(sigma, diff)
    return max(float(diff @ sol), 0.0)


def mahalanobis_d1(est: LocalEstimate, theta_hat, sigma_hat) -> float:
    """Distance of the transmitted estimate from the aggregate, standardized
    by the (robust) aggregated variance: sqrt{n_k (t - th)^T Sigma^{-1} (t - th)}."""
    theta_hat = np.asarray(theta_hat, dtype=float).ravel()
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    if theta_hat.size != est.p:
        raise DimensionError("theta_hat dimension does not match the estimate")
    if sigma_hat.shape != (est.p, est.p):
        raise DimensionError("sigma_hat dimension does not match the estimate")
    smallest = numkit.min_eigenvalue(sigma_hat)
    if smallest <= 0.0:
        raise NotPositiveDefiniteError(
            "sigma_hat must be positive definite for the detection distance",
            eigenvalue=smallest,
        )
    diff = est.theta_star - theta_hat
    return math.sqrt(est.n_k * _quad_form(diff, numkit.symmetrize(sigma_hat)))


def mahalanobis_d2(est: LocalEstimate, theta_hat) -> float | None:
    """Same distance but standardized by the server's own variance matrix.

    Returns None when the transmitted matrix is not symmetric positive
    definite (including singular), which the caller treats as contamination
    evidence rather than a numeric distance.
    """
    theta_hat = np.asarray(theta_hat, dtype=float).ravel()
    if theta_hat.size != est.p:
        raise DimensionError("theta_hat dimension does not match the estimate")
    s = est.sigma_star
    if not numkit.is_symmetric(s):
        return None
    s = numkit.symmetrize(s)
    if numkit.min_eigenvalue(s) <= 0.0:
        return None
    diff = est.theta_star - theta_hat
    return math.sqrt(est.n_k * _quad_form(diff, s))


def detect(
    estimates,
    theta_hat,
    sigma_hat,
    alpha: float = DEFAULT_ALPHA,
) -> DetectionReport:
    """Run the two-step contamination screen over all servers.

    ``sigma_hat`` should be a robust aggregate of the variance estimates
    (or a trusted server's matrix); it standardizes every d1.  Per-server
    failures are recorded on the corresponding row instead of aborting.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    ests = sorted(
        list(estimates), key=lambda e: (isinstance(e.server_id, str), e.server_id)
    )
    if not ests:
        raise ValueError("at least one local estimate is required")
    p = ests[0].p
    threshold = math.sqrt(numkit.chi2_quantile(p, alpha))

    records = []
    for e in ests:
        try:
            d1 = mahalanobis_d1(e, theta_hat, sigma_hat)
        except NotPositiveDefiniteError:
            raise  # a bad sigma_hat invalidates the whole report
        except (DimensionError, np.linalg.LinAlgError) as exc:
            records.append(
                ServerDetection(
                    server_id=e.server_id,
                    n_k=e.n_k,
                    d1=None,
                    d2=None,
                    theta_flagged=False,
                    sigma_flagged=False,
                    error=str(exc),
                )
            )
            continue
        theta_flagged = d1 > threshold
        d2 = None
        sigma_flagged = False
        if not theta_flagged:
            d2 = mahalanobis_d2(e, theta_hat)
            sigma_flagged = d2 is None or d2 > threshold
        records.append(
            ServerDetection(
                server_id=e.server_id,
                n_k=e.n_k,
                d1=d1,
                d2=d2,
                theta_flagged=theta_flagged,
                sigma_flagged=sigma_flagged,
            )
        )
    return DetectionReport(records=records, alpha=alpha, threshold=threshold, p=p)
