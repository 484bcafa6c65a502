"""Five-step estimator of the separable covariance of the growth curve model.

The error law has spatial covariance ``Sigma_R`` (regions), temporal
covariance ``Sigma_T`` (visits, trace ``T``) and a ``2 x 2`` random-effect
covariance ``Sigma_zeta`` for subject-level intercept/slope departures.

Steps:

1. off-diagonal ``Sigma_R`` from time- and subject-pooled cross products;
2. ``Sigma_T`` from the region pairs with the largest off-diagonal entries;
3. ``kappa = tr(Sigma_R)/R`` and ``Sigma_zeta`` using vectors that annihilate
   or extract the columns of each subject's growth basis;
4. diagonal of ``Sigma_R``;
5. assembly into per-region block covariances (see :mod:`hdgcm.model`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EstimationError, NumericalError, RankDeficientError
from .model import CovarianceComponents, build_growth_basis, center_responses

logger = logging.getLogger(__name__)

__all__ = [
    "PooledSpatialMoments",
    "PairSet",
    "AnnihilatorVectors",
    "TemporalMoments",
    "VARIANCE_FLOOR",
    "estimate_spatial_offdiag",
    "select_top_pairs",
    "pair_floor",
    "estimate_temporal",
    "compute_annihilators",
    "temporal_moments",
    "estimate_kappa",
    "estimate_zeta",
    "estimate_spatial_diag",
    "psd_repair",
    "estimate_all",
]

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class PooledSpatialMoments:
    """``sigma1`` is the average over subjects and visits of centered cross products."""

    sigma1: np.ndarray
    per_subject: np.ndarray = None


@dataclass(frozen=True)
class PairSet:
    """Region pairs ``(r1, r2)``, ``r1 < r2``, sorted by decreasing ``|Sigma_R[r1, r2]|``."""

    pairs: np.ndarray
    offdiag_values: np.ndarray

    @property
    def K(self):
        return len(self.pairs)


@dataclass(frozen=True)
class AnnihilatorVectors:
    """Per-subject vectors with ``u_i' G_i = 0``, ``v1_i' G_i = e_1'`` and ``v2_i' G_i = e_2'``.

    Arrays have shape (N, T).
    """

    u: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    @property
    def v(self):
        return np.stack([self.v1, self.v2], axis=2)


@dataclass(frozen=True)
class TemporalMoments:
    """Region-averaged temporal cross products ``sigma3`` with shape (N, T, T)."""

    sigma3: np.ndarray


def _symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def estimate_spatial_offdiag(centered, keep_per_subject=False):
    """Step 1.

    Parameters
    ----------
    centered : array, shape (N, R, T)
        Responses centered across subjects.

    Returns
    -------
    moments : PooledSpatialMoments
    offdiag : array, shape (R, R)
        ``sigma1`` with its diagonal set to zero.
    """
    centered = np.asarray(centered, dtype=float)
    n, r, t = centered.shape
    if n < 2:
        raise DimensionError("at least two subjects are required", array_name="responses")
    stacked = np.swapaxes(centered, 1, 2).reshape(n * t, r)
    sigma1 = _symmetrize(stacked.T @ stacked / (n * t))
    per_subject = None
    if keep_per_subject:
        per_subject = np.einsum("irt,ist->irs", centered, centered) / t
    if not np.all(np.isfinite(sigma1)):
        raise NumericalError("pooled spatial moments are not finite")
    offdiag = sigma1 - np.diag(np.diag(sigma1))
    return PooledSpatialMoments(sigma1, per_subject), offdiag


def select_top_pairs(offdiag, K=None):
    """Pick the ``K`` upper-triangle pairs with the largest absolute value.

    Ties are broken lexicographically by ``(r1, r2)``. ``K`` defaults to
    ``min(R, R(R-1)/2)``.
    """
    offdiag = np.asarray(offdiag, dtype=float)
    R = offdiag.shape[0]
    r1, r2 = np.triu_indices(R, k=1)
    n_pairs = r1.size
    if K is None:
        K = min(R, n_pairs)
    if K < 1 or K > n_pairs:
        raise ValueError(f"K={K} must be between 1 and the {n_pairs} available pairs")
    values = offdiag[r1, r2]
    # lexsort: last key is primary; triu order is already lexicographic
    order = np.lexsort((np.arange(n_pairs), -np.abs(values)))[:K]
    pairs = np.stack([r1[order], r2[order]], axis=1)
    return PairSet(pairs, values[order])


def pair_floor(offdiag):
    """Smallest usable ``|Sigma_R[r1, r2]|`` denominator for the temporal estimate."""
    offdiag = np.asarray(offdiag)
    vals = np.abs(offdiag[np.triu_indices(offdiag.shape[0], k=1)])
    med = float(np.median(vals)) if vals.size else 0.0
    return max(1e-3 * med, 1e-8)


def estimate_temporal(centered, pairs, floor=None, diagnostics=None, pooling="ratio"):
    """Step 2: pool ``Sigma_2[r1,r2] / Sigma_R[r1,r2]`` over the selected pairs.

    ``pooling="ratio"`` averages the per-pair ratios with equal weights;
    ``pooling="weighted"`` weights each ratio by ``|Sigma_R[r1,r2]|``, i.e.
    ``sum sign * Sigma_2 / sum |Sigma_R|``. Pairs whose off-diagonal value is
    below ``floor`` in magnitude are dropped. The result is symmetrized.
    """
    centered = np.asarray(centered, dtype=float)
    n = centered.shape[0]
    idx = pairs.pairs
    vals = pairs.offdiag_values
    if floor is None:
        floor = 1e-8
    keep = np.abs(vals) >= floor
    dropped = [tuple(int(k) for k in pq) for pq in idx[~keep]]
    if dropped:
        logger.warning("dropping %d region pair(s) with |offdiag| below %.3g: %s",
                       len(dropped), floor, dropped)
    if diagnostics is not None:
        diagnostics["dropped_pairs"] = dropped
    if not keep.any():
        raise EstimationError("every selected region pair is below the denominator floor")
    idx, vals = idx[keep], vals[keep]
    a = centered[:, idx[:, 0], :]
    b = centered[:, idx[:, 1], :]
    sigma2 = np.einsum("nkt,nks->kts", a, b) / n
    if pooling == "ratio":
        sigmaT = (sigma2 / vals[:, None, None]).mean(axis=0)
    elif pooling == "weighted":
        sigmaT = (np.sign(vals)[:, None, None] * sigma2).sum(axis=0) / np.abs(vals).sum()
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    sigmaT = _symmetrize(sigmaT)
    if not np.all(np.isfinite(sigmaT)):
        raise NumericalError("temporal covariance estimate is not finite")
    return sigmaT


def compute_annihilators(basis):
    """Null-space and dual vectors of each growth basis ``G_i``.

    ``u_i`` is the last column of the complete ``Q`` from a QR factorization of
    ``[G_i | I_T]``, with its sign fixed so the first non-negligible entry is
    positive. ``v_{i,j} = G_i (G_i' G_i)^{-1} e_j``.
    """
    G = np.asarray(basis.per_subject, dtype=float)
    n, t, _ = G.shape
    if t < 3:
        raise DimensionError(f"annihilator vectors need T >= 3, got T={t}",
                             array_name="time_values")
    gram = np.swapaxes(G, 1, 2) @ G
    det = gram[:, 0, 0] * gram[:, 1, 1] - gram[:, 0, 1] ** 2
    scale = gram[:, 0, 0] * gram[:, 1, 1]
    bad = np.flatnonzero(det <= 1e-12 * np.maximum(scale, 1.0))
    if bad.size:
        raise RankDeficientError(f"growth basis of subject {int(bad[0])} is rank deficient",
                                 subject=int(bad[0]))
    aug = np.concatenate([G, np.broadcast_to(np.eye(t), (n, t, t))], axis=2)
    q, _ = np.linalg.qr(aug, mode="complete")
    u = q[:, :, -1].copy()
    first = np.argmax(np.abs(u) > 1e-12, axis=1)
    sign = np.sign(u[np.arange(n), first])
    u *= sign[:, None]
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = G @ np.linalg.inv(gram)
    return AnnihilatorVectors(u, v[:, :, 0].copy(), v[:, :, 1].copy())


def temporal_moments(centered):
    """Per-subject average over regions of centered temporal outer products."""
    centered = np.asarray(centered, dtype=float)
    r = centered.shape[1]
    sigma3 = np.einsum("nrt,nrs->nts", centered, centered) / r
    return TemporalMoments(_symmetrize(sigma3))


def estimate_kappa(moments, sigmaT, annihilators):
    """Step 3a: ratio of quadratic forms along the annihilating directions."""
    u = annihilators.u
    num = np.einsum("nt,nts,ns->", u, moments.sigma3, u)
    den = np.einsum("nt,ts,ns->", u, sigmaT, u)
    if not den > 0:
        raise EstimationError(
            f"kappa denominator {den:.3g} is not positive; the temporal covariance "
            "estimate is not positive along the annihilating directions",
            step="kappa",
        )
    return float(num / den)


def psd_repair(a, floor=0.0):
    """Symmetrize and clamp eigenvalues below ``floor``.

    Returns the input (symmetrized) unchanged when no eigenvalue needs clamping,
    which makes the repair idempotent.
    """
    a = _symmetrize(np.asarray(a, dtype=float))
    w, V = np.linalg.eigh(a)
    # eigenvalues of an already repaired matrix may sit a rounding error below the floor
    if w.min() >= floor - 1e-12 * max(1.0, np.abs(w).max()):
        return a
    w = np.maximum(w, floor)
    return _symmetrize((V * w) @ V.T)


def estimate_zeta(moments, sigmaT, kappa, annihilators, diagnostics=None):
    """Step 3b: random-effect covariance, PSD-repaired."""
    v = annihilators.v
    extracted = np.einsum("ntj,nts,nsk->jk", v, moments.sigma3, v)
    temporal = np.einsum("ntj,ts,nsk->jk", v, sigmaT, v)
    n = v.shape[0]
    raw = _symmetrize((extracted - kappa * temporal) / n)
    repaired = psd_repair(raw, 0.0)
    changed = not np.array_equal(repaired, raw)
    if changed:
        logger.info("random-effect covariance clamped to PSD (eigenvalues %s)",
                    np.linalg.eigvalsh(raw))
    if diagnostics is not None:
        diagnostics["sigma_zeta_raw"] = raw
        diagnostics["sigma_zeta_repaired"] = changed
    return repaired


def estimate_spatial_diag(moments, kappa, floor=VARIANCE_FLOOR, diagnostics=None):
    """Step 4: ``diag(Sigma_1) - (tr(Sigma_1)/R - kappa)``, floored at ``floor``."""
    sigma1 = moments.sigma1
    R = sigma1.shape[0]
    raw = np.diag(sigma1) - (np.trace(sigma1) / R - kappa)
    low = np.flatnonzero(raw < floor)
    if low.size:
        logger.warning("flooring %d region variance(s) at %.3g: regions %s",
                       low.size, floor, low.tolist())
    if diagnostics is not None:
        diagnostics.setdefault("floored_regions", []).extend(int(k) for k in low)
    return np.maximum(raw, floor)


def estimate_all(dataset, K=None, keep_intermediates=False, pooling="ratio"):
    """Run steps 1 to 4 and return trace-normalized covariance components.

    ``Sigma_T`` is rescaled to trace ``T``; ``Sigma_R`` and ``kappa`` are divided
    by the same factor so every assembled region covariance is unchanged.
    """
    dataset.check_estimable()
    diagnostics = {}
    basis = build_growth_basis(dataset)
    centered = center_responses(dataset)
    T = dataset.n_times

    def step(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except EstimationError as exc:
            if exc.step is None:
                raise EstimationError(str(exc), step=name) from exc
            raise
        except (NumericalError, ValueError, np.linalg.LinAlgError) as exc:
            raise EstimationError(str(exc), step=name) from exc

    moments1, offdiag = step("step 1 (spatial off-diagonal)", estimate_spatial_offdiag, centered)
    pairs = step("step 2 (pair selection)", select_top_pairs, offdiag, K)
    floor = pair_floor(offdiag)
    sigmaT = step("step 2 (temporal covariance)", estimate_temporal, centered, pairs,
                  floor=floor, diagnostics=diagnostics, pooling=pooling)
    w_min = np.linalg.eigvalsh(sigmaT).min()
    if w_min <= 0:
        t_floor = 1e-8 * abs(np.trace(sigmaT)) / T
        logger.warning("temporal covariance estimate not positive definite "
                       "(min eigenvalue %.3g); clamping", w_min)
        sigmaT = psd_repair(sigmaT, t_floor)
        diagnostics["sigma_T_repaired"] = True
    ann = step("step 3 (annihilators)", compute_annihilators, basis)
    moments3 = temporal_moments(centered)
    kappa = step("step 3 (kappa)", estimate_kappa, moments3, sigmaT, ann)
    zeta = step("step 3 (random-effect covariance)", estimate_zeta, moments3, sigmaT,
                kappa, ann, diagnostics=diagnostics)
    diag = step("step 4 (spatial diagonal)", estimate_spatial_diag, moments1, kappa,
                diagnostics=diagnostics)

    trace = np.trace(sigmaT)
    if not trace > 0:
        raise EstimationError(f"temporal covariance has trace {trace:.3g}", step="normalization")
    factor = T / trace
    sigmaT = sigmaT * factor
    sigma_R = offdiag + np.diag(diag)
    sigma_R = sigma_R / factor
    kappa = kappa / factor
    diagnostics["trace_factor"] = factor
    d = np.diag(sigma_R)
    if np.any(d < VARIANCE_FLOOR):
        np.fill_diagonal(sigma_R, np.maximum(d, VARIANCE_FLOOR))
    diagnostics["pairs"] = pairs.pairs.tolist()
    if keep_intermediates:
        diagnostics["sigma1"] = moments1.sigma1
        diagnostics["kappa_raw"] = kappa * factor
        diagnostics["annihilators"] = ann
    return CovarianceComponents(sigma_R, sigmaT, zeta, kappa, diagnostics)
