"""Generalized least squares fits, studentized statistics and the two tests.

The global test compares ``max J_{r,j}^2`` with a Gumbel-type threshold; the
multiple test thresholds ``|J_{r,j}|`` at a level chosen to keep a normal
approximation of the false discovery proportion below ``alpha``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import ndtr
from scipy.stats import norm

from .errors import DimensionError, NumericalError
from .model import CoefficientMatrix, assemble_all_blocks, build_growth_basis

__all__ = [
    "FitResult",
    "GlobalTestReport",
    "MultipleTestReport",
    "CONDITION_LIMIT",
    "gls_fit",
    "test_statistics",
    "gumbel_quantile",
    "gumbel_cdf",
    "global_test",
    "fdp_hat",
    "fdp_threshold_cap",
    "multiple_test",
]

CONDITION_LIMIT = 1e12


@dataclass
class FitResult:
    """GLS coefficients for every region.

    ``precision_diagonals[r]`` holds the diagonal of
    ``(X' Sigma_r^{-1} X)^{-1}``, i.e. the sampling variances of ``beta_r``.
    ``statistics`` is the (R, 2p+2) matrix of studentized tested coefficients.
    """

    coefficients: CoefficientMatrix
    precision_diagonals: np.ndarray
    statistics: np.ndarray
    covariances: np.ndarray = field(default=None, repr=False)

    @property
    def standard_errors(self):
        return np.sqrt(self.precision_diagonals)

    @property
    def n_tested(self):
        return self.statistics.shape[1]


def gls_fit(dataset, design, components, keep_covariances=False):
    """Per-region GLS estimate using block inverses of the region covariances.

    Each region covariance is block diagonal with ``T x T`` blocks, so the
    normal equations are accumulated subject by subject without forming the
    ``NT x NT`` matrix.
    """
    X = design.per_subject_blocks
    n, t, k = X.shape
    if k > n * t:
        raise DimensionError(f"{k} coefficients exceed the {n * t} observations",
                             array_name="design")
    basis = build_growth_basis(dataset)
    blocks = assemble_all_blocks(components, basis)
    try:
        np.linalg.cholesky(blocks)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("a region covariance block is not positive definite") from exc
    R = blocks.shape[0]
    inv_blocks = np.linalg.inv(blocks)
    inv_blocks = 0.5 * (inv_blocks + np.swapaxes(inv_blocks, -1, -2))
    # Sigma_r^{-1} X, flattened so both products below are single batched matmuls
    wx = (inv_blocks @ X).reshape(R, n * t, k)
    y = np.swapaxes(dataset.responses, 0, 1).reshape(R, 1, n * t)
    info = X.reshape(n * t, k).T @ wx
    info = 0.5 * (info + np.swapaxes(info, 1, 2))
    score = (y @ wx)[:, 0, :]

    beta = np.empty((R, k))
    cov = np.empty((R, k, k))
    eye = np.eye(k)
    for r in range(R):
        cond = np.linalg.cond(info[r])
        if not cond < CONDITION_LIMIT:
            raise NumericalError(
                f"normal equations of region {r} are singular or ill-conditioned "
                f"(condition number {cond:.3g} >= {CONDITION_LIMIT:.0e})"
            )
        factor = linalg.cho_factor(info[r])
        beta[r] = linalg.cho_solve(factor, score[r])
        cov[r] = linalg.cho_solve(factor, eye)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    variances = np.diagonal(cov, axis1=1, axis2=2).copy()
    if np.any(variances <= 0):
        raise NumericalError("non-positive coefficient variance")
    coefficients = CoefficientMatrix(beta, design.p, design.q)
    fit = FitResult(coefficients, variances, None, cov if keep_covariances else None)
    fit.statistics = test_statistics(fit)
    return fit


def test_statistics(fit):
    """Studentized estimates ``beta_j / sd_j`` over the tested block ``j < 2p+2``."""
    m = 2 * fit.coefficients.p + 2
    var = np.asarray(fit.precision_diagonals)[:, :m]
    if np.any(var <= 0):
        raise NumericalError("zero or negative variance in a tested coefficient")
    return fit.coefficients.values[:, :m] / np.sqrt(var)


test_statistics.__test__ = False


def gumbel_quantile(alpha):
    """``q_alpha = -log(pi) - 2 log(log(1/(1-alpha)))``."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return -math.log(math.pi) - 2.0 * math.log(-math.log1p(-alpha))


def gumbel_cdf(phi):
    """Limiting null law of ``J - 2 log p + log log p``."""
    return np.exp(-np.exp(-np.asarray(phi, dtype=float) / 2.0) / math.sqrt(math.pi))


@dataclass
class GlobalTestReport:
    statistic: float
    threshold: float
    q_alpha: float
    p_tilde: int
    reject: bool
    approx_p_value: float
    alpha: float
    argmax: tuple = None


def global_test(stats, alpha=0.05):
    """Max-type test of all tested coefficients being zero."""
    stats = np.atleast_2d(np.asarray(stats, dtype=float))
    p_tilde = stats.size
    if p_tilde <= math.e:
        raise ValueError(f"p_tilde={p_tilde} is too small: log log p_tilde is undefined")
    q_alpha = gumbel_quantile(alpha)
    sq = stats ** 2
    J = float(sq.max())
    centre = 2.0 * math.log(p_tilde) - math.log(math.log(p_tilde))
    threshold = centre + q_alpha
    p_value = float(1.0 - gumbel_cdf(J - centre))
    argmax = tuple(int(a) for a in np.unravel_index(int(np.argmax(sq)), sq.shape))
    return GlobalTestReport(J, threshold, q_alpha, p_tilde, bool(J >= threshold),
                            p_value, alpha, argmax)


@dataclass
class MultipleTestReport:
    tau_hat: float
    t_cap: float
    fallback_used: bool
    rejections: list
    fdp_curve: np.ndarray
    alpha: float
    p_tilde: int
    fdp_at_tau: float

    @property
    def n_rejections(self):
        return len(self.rejections)

    def rejection_mask(self, shape):
        mask = np.zeros(shape, dtype=bool)
        for r, j in self.rejections:
            mask[r, j] = True
        return mask


def fdp_threshold_cap(p_tilde):
    """Upper end ``(2 log p - 2 log log p)^{1/2}`` of the threshold search range."""
    return math.sqrt(2.0 * math.log(p_tilde) - 2.0 * math.log(math.log(p_tilde)))


def fdp_hat(tau, abs_stats, p_tilde=None):
    """Estimated false discovery proportion at threshold(s) ``tau``."""
    a = np.sort(np.abs(np.ravel(abs_stats)))
    p_tilde = a.size if p_tilde is None else p_tilde
    tau = np.asarray(tau, dtype=float)
    count = a.size - np.searchsorted(a, tau, side="right")
    return 2.0 * (1.0 - ndtr(tau)) * p_tilde / np.maximum(count, 1)


def multiple_test(stats, alpha=0.1, curve_points=201):
    """Threshold ``|J|`` so the estimated FDP is at most ``alpha``.

    On each interval between consecutive sorted ``|J|`` values the rejection
    count is constant and the estimated FDP decreases, so the smallest
    feasible threshold is found exactly by solving for the normal tail on the
    first interval where it becomes feasible.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    stats = np.atleast_2d(np.asarray(stats, dtype=float))
    p_tilde = stats.size
    if p_tilde <= math.e:
        raise ValueError(f"p_tilde={p_tilde} is too small: log log p_tilde is undefined")
    a = np.sort(np.abs(stats.ravel()))
    t_cap = fdp_threshold_cap(p_tilde)

    starts = np.unique(np.concatenate([[0.0], a[a < t_cap]]))
    ends = np.append(starts[1:], t_cap)
    counts = np.maximum(a.size - np.searchsorted(a, starts, side="right"), 1)
    targets = alpha * counts / (2.0 * p_tilde)
    with np.errstate(invalid="ignore"):
        required = np.where(targets < 1.0, norm.isf(np.minimum(targets, 1.0)), -np.inf)
    cand = np.maximum(starts, required)
    feasible = cand < ends
    feasible[-1] = cand[-1] <= t_cap
    hits = np.flatnonzero(feasible)
    tau_hat = float(cand[hits[0]]) if hits.size else None
    fallback = tau_hat is None
    if fallback:
        tau_hat = math.sqrt(2.0 * math.log(p_tilde))
    rows, cols = np.nonzero(np.abs(stats) >= tau_hat)
    rejections = list(zip(rows.tolist(), cols.tolist()))
    grid = np.linspace(0.0, t_cap, curve_points)
    curve = np.column_stack([grid, fdp_hat(grid, a, p_tilde)])
    fdp_tau = float(fdp_hat(tau_hat, a, p_tilde))
    return MultipleTestReport(tau_hat, t_cap, fallback, rejections, curve, alpha,
                              p_tilde, fdp_tau)
