"""Numerical primitives shared by the rest of the package.

Distribution functions are built from ``math.erfc`` and closed forms so
that quantile/CDF pairs round-trip by construction.  Regression fitters
are thin, deterministic wrappers over dense linear algebra: a QR solve
with a pivot check for least squares and ridge-jittered IRLS for
logistic fits.  Random number generation uses keyed Philox streams, so
a `(seed, stream_id)` pair reproduces the same draws on any machine and
under any thread schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RegressionFit",
    "SeededRng",
    "SingularDesignError",
    "normal_cdf",
    "normal_quantile",
    "chi2_4_cdf",
    "chi2_4_quantile",
    "fit_linear",
    "fit_logistic",
    "predict_logistic",
    "find_root",
    "expit",
]

_SQRT2 = math.sqrt(2.0)


class SingularDesignError(ValueError):
    """Raised when a regression design matrix is rank deficient."""

    def __init__(self, column: int, message: str | None = None):
        self.column = column
        super().__init__(message or f"design matrix is singular at column {column}")


@dataclass(frozen=True)
class RegressionFit:
    """Result of a linear or logistic fit.

    ``coefficients[0]`` is the intercept, followed by one slope per
    design column.  ``residuals`` are response residuals (``y - fitted``
    for linear fits, ``label - probability`` for logistic fits).
    """

    coefficients: np.ndarray
    residuals: np.ndarray
    converged: bool
    iterations: int
    quasi_separated: bool = False


@dataclass(frozen=True)
class SeededRng:
    """Counter-based RNG stream identified by (seed, stream_id).

    Streams with distinct ids are statistically independent, so parallel
    work can hand one stream to each task and stay deterministic.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array(
            [self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))

    def stream(self, stream_id: int) -> "SeededRng":
        return SeededRng(self.seed, stream_id)


def normal_cdf(x: float) -> float:
    """Standard normal CDF, accurate to well below 1e-12 absolute."""
    return 0.5 * math.erfc(-x / _SQRT2)


def normal_quantile(p: float) -> float:
    """Inverse of :func:`normal_cdf` on (0, 1), by bisection.

    Bisection on the CDF itself guarantees the round-trip property
    |normal_cdf(normal_quantile(p)) - p| stays at the CDF's resolution.
    """
    if not (0.0 < p < 1.0):
        raise ValueError(f"normal_quantile requires p in (0, 1), got {p}")
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return 0.5 * (lo + hi)


def chi2_4_cdf(x: float) -> float:
    """CDF of the chi-square distribution with 4 degrees of freedom."""
    if x <= 0.0:
        return 0.0
    return 1.0 - math.exp(-x / 2.0) * (1.0 + x / 2.0)


def chi2_4_quantile(p: float) -> float:
    """Quantile of the 4-df chi-square via bisection on the closed-form CDF."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"chi2_4_quantile requires p in (0, 1), got {p}")
    lo, hi = 0.0, 1.0
    while chi2_4_cdf(hi) < p:
        hi *= 2.0
        if hi > 1e8:  # pragma: no cover - p < 1 guarantees termination
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_4_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return 0.5 * (lo + hi)


def _with_intercept(design: np.ndarray) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    return np.hstack([np.ones((design.shape[0], 1)), design])


def fit_linear(design: np.ndarray, outcome: np.ndarray) -> RegressionFit:
    """Ordinary least squares with an intercept, via QR.

    Raises :class:`SingularDesignError` carrying the index of the first
    deficient column (0 = intercept, k = k-th design column) when a
    diagonal entry of R falls below 1e-10 times the largest one.
    """
    x = _with_intercept(design)
    y = np.asarray(outcome, dtype=float)
    n, p = x.shape
    if y.shape != (n,):
        raise ValueError("outcome length does not match design rows")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("non-finite values in regression inputs")
    if n < p + 1:
        raise ValueError(f"need at least {p + 1} rows for {p} columns, got {n}")
    q, r = np.linalg.qr(x)
    diag = np.abs(np.diag(r))
    tol = 1e-10 * diag.max()
    bad = np.nonzero(diag <= tol)[0]
    if bad.size:
        raise SingularDesignError(int(bad[0]))
    beta = np.linalg.solve(r, q.T @ y)
    residuals = y - x @ beta
    return RegressionFit(coefficients=beta, residuals=residuals, converged=True, iterations=1)


def expit(eta: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    eta = np.asarray(eta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def fit_logistic(design: np.ndarray, labels: np.ndarray, max_iter: int = 100) -> RegressionFit:
    """Logistic regression by IRLS with a 1e-8 ridge jitter.

    Requires both classes present.  Quasi-separation (any coefficient
    magnitude above 30) is flagged on the returned fit, not raised.
    """
    x = _with_intercept(design)
    y = np.asarray(labels, dtype=float)
    n, p = x.shape
    if y.shape != (n,):
        raise ValueError("labels length does not match design rows")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("logistic fit needs both classes present")
    if n < p + 1:
        raise ValueError(f"need at least {p + 1} rows for {p} columns, got {n}")
    beta = np.zeros(p)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prob = expit(x @ beta)
        w = prob * (1.0 - prob)
        xtwx = (x.T * w) @ x + 1e-8 * np.eye(p)
        grad = x.T @ (y - prob)
        try:
            step = np.linalg.solve(xtwx, grad)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - ridge prevents this
            raise SingularDesignError(-1, str(exc)) from exc
        beta = beta + step
        if np.abs(step).max() < 1e-8:
            converged = True
            break
    prob = expit(x @ beta)
    return RegressionFit(
        coefficients=beta,
        residuals=y - prob,
        converged=converged,
        iterations=it,
        quasi_separated=bool(np.abs(beta).max() > 30.0),
    )


def predict_logistic(fit: RegressionFit, design: np.ndarray) -> np.ndarray:
    """Fitted probabilities from a logistic RegressionFit on new rows."""
    x = _with_intercept(design)
    return expit(x @ fit.coefficients)


def find_root(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Bisection root of a sign-changing function on [lo, hi].

    The bracket is doubled around its center up to 60 times if f(lo) and
    f(hi) share a sign.  Robustness over speed: monotone callers only.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    flo, fhi = f(lo), f(hi)
    expansions = 0
    while flo * fhi > 0 and expansions < 60:
        center = 0.5 * (lo + hi)
        half = hi - lo
        lo, hi = center - half, center + half
        flo, fhi = f(lo), f(hi)
        expansions += 1
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0:
        raise ValueError(f"no sign change on bracket [{lo:g}, {hi:g}] after {expansions} expansions")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        if fmid == 0.0:
            return mid
        if flo * fmid < 0:
            hi = mid
        else:
            lo, flo = mid, fmid
    return 0.5 * (lo + hi)
