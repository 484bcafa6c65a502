"""Data containers and assembly routines for the multi-response growth curve model.

Responses are stored as an ``(N, R, T)`` array ``y[i, r, t]``. Whenever a
per-region response vector or a design matrix is flattened, rows are ordered
subject-major: all time points of subject 1, then subject 2, and so on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DimensionError, NumericalError, RankDeficientError

__all__ = [
    "GrowthCurveDataset",
    "DesignMatrix",
    "GrowthBasis",
    "CovarianceComponents",
    "RegionCovariance",
    "CoefficientMatrix",
    "build_design",
    "build_growth_basis",
    "assemble_region_covariance",
    "assemble_all_blocks",
    "center_responses",
]


def _as_float_array(value, name, ndim):
    arr = np.asarray(value, dtype=float)
    if arr.ndim != ndim:
        raise DimensionError(
            f"{name} must have {ndim} dimensions, got shape {arr.shape}", array_name=name
        )
    if not np.all(np.isfinite(arr)):
        raise DimensionError(f"{name} contains non-finite values", array_name=name)
    return arr


@dataclass(frozen=True)
class GrowthCurveDataset:
    """Balanced longitudinal data for ``N`` subjects, ``R`` responses, ``T`` visits.

    Parameters
    ----------
    responses : array, shape (N, R, T)
    time_values : array, shape (N, T)
    static_covariates : array, shape (N, p), optional
        Time-invariant predictors. ``p`` may be zero.
    dynamic_covariates : array, shape (N, T, q), optional
        Time-varying predictors. ``q`` may be zero.

    Only shapes and finiteness are checked on construction. Use
    :meth:`check_estimable` before covariance estimation, which further needs
    ``T >= 3`` and non-constant time values for every subject.
    """

    responses: np.ndarray
    time_values: np.ndarray
    static_covariates: np.ndarray = None
    dynamic_covariates: np.ndarray = None
    region_names: tuple = field(default=None, compare=False)
    static_names: tuple = field(default=None, compare=False)
    dynamic_names: tuple = field(default=None, compare=False)
    subject_ids: tuple = field(default=None, compare=False)

    def __post_init__(self):
        y = _as_float_array(self.responses, "responses", 3)
        n, r, t = y.shape
        g = _as_float_array(self.time_values, "time_values", 2)
        if g.shape != (n, t):
            raise DimensionError(
                f"time_values has shape {g.shape}, expected {(n, t)}", array_name="time_values"
            )
        x = self.static_covariates
        x = np.zeros((n, 0)) if x is None else _as_float_array(x, "static_covariates", 2)
        if x.shape[0] != n:
            raise DimensionError(
                f"static_covariates has {x.shape[0]} rows, expected {n}",
                array_name="static_covariates",
            )
        z = self.dynamic_covariates
        z = np.zeros((n, t, 0)) if z is None else _as_float_array(z, "dynamic_covariates", 3)
        if z.shape[:2] != (n, t):
            raise DimensionError(
                f"dynamic_covariates has shape {z.shape}, expected ({n}, {t}, q)",
                array_name="dynamic_covariates",
            )
        if n < 1 or r < 1 or t < 1:
            raise DimensionError(f"empty dataset with shape {y.shape}", array_name="responses")
        for name, arr in (("responses", y), ("time_values", g),
                          ("static_covariates", x), ("dynamic_covariates", z)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name, size in (("region_names", r), ("static_names", x.shape[1]),
                           ("dynamic_names", z.shape[2]), ("subject_ids", n)):
            names = getattr(self, name)
            if names is not None:
                names = tuple(str(s) for s in names)
                if len(names) != size:
                    raise DimensionError(
                        f"{name} has {len(names)} entries, expected {size}", array_name=name
                    )
                object.__setattr__(self, name, names)

    @property
    def n_subjects(self):
        return self.responses.shape[0]

    @property
    def n_regions(self):
        return self.responses.shape[1]

    @property
    def n_times(self):
        return self.responses.shape[2]

    @property
    def p(self):
        return self.static_covariates.shape[1]

    @property
    def q(self):
        return self.dynamic_covariates.shape[2]

    @property
    def n_coefficients(self):
        return 2 * self.p + self.q + 2

    def check_estimable(self):
        """Raise unless the covariance estimator can run on this dataset."""
        if self.n_subjects < 2:
            raise DimensionError("at least two subjects are required", array_name="responses")
        if self.n_times < 3:
            raise DimensionError(
                f"at least three time points are required, got T={self.n_times}",
                array_name="time_values",
            )
        _check_basis_rank(self.time_values, self.subject_ids)

    def subset(self, subjects):
        """Dataset restricted to the given subject indices (in that order)."""
        idx = np.asarray(subjects)
        ids = None if self.subject_ids is None else tuple(self.subject_ids[k] for k in idx)
        return GrowthCurveDataset(
            self.responses[idx], self.time_values[idx], self.static_covariates[idx],
            self.dynamic_covariates[idx], self.region_names, self.static_names,
            self.dynamic_names, ids,
        )

    def scaled(self, factor, regions=None):
        """Copy with responses multiplied by ``factor`` (optionally only some regions)."""
        y = np.array(self.responses)
        if regions is None:
            y *= factor
        else:
            y[:, regions, :] *= factor
        return GrowthCurveDataset(
            y, self.time_values, self.static_covariates, self.dynamic_covariates,
            self.region_names, self.static_names, self.dynamic_names, self.subject_ids,
        )

    def coefficient_names(self):
        xs = self.static_names or tuple(f"x{k + 1}" for k in range(self.p))
        zs = self.dynamic_names or tuple(f"z{k + 1}" for k in range(self.q))
        return ("intercept", "time", *xs, *(f"time:{s}" for s in xs), *zs)


@dataclass(frozen=True)
class DesignMatrix:
    """Stacked fixed-effect design ``X`` with ``N*T`` rows and ``2p+q+2`` columns.

    Column order is ``(1, g, x, g*x, z)`` so the tested block ``eta_r`` is the
    leading ``2p+2`` coefficients.
    """

    rows: np.ndarray
    n_subjects: int
    n_times: int
    p: int
    q: int

    @property
    def per_subject_blocks(self):
        """View of shape (N, T, 2p+q+2)."""
        return self.rows.reshape(self.n_subjects, self.n_times, -1)

    @property
    def n_columns(self):
        return self.rows.shape[1]

    @property
    def n_tested(self):
        return 2 * self.p + 2


def build_design(dataset):
    """Fixed-effect design matrix of the combined (level 1 + level 2) model."""
    n, t = dataset.n_subjects, dataset.n_times
    g = dataset.time_values[:, :, None]
    x = np.broadcast_to(dataset.static_covariates[:, None, :], (n, t, dataset.p))
    blocks = np.concatenate(
        [np.ones((n, t, 1)), g, x, g * x, dataset.dynamic_covariates], axis=2
    )
    rows = np.ascontiguousarray(blocks.reshape(n * t, -1))
    rows.setflags(write=False)
    return DesignMatrix(rows, n, t, dataset.p, dataset.q)


def _check_basis_rank(time_values, subject_ids=None, tol=1e-12):
    g = np.asarray(time_values)
    spread = g.max(axis=1) - g.min(axis=1)
    scale = np.maximum(1.0, np.abs(g).max(axis=1))
    bad = np.flatnonzero(spread <= tol * scale)
    if bad.size:
        i = int(bad[0])
        label = subject_ids[i] if subject_ids is not None else i
        raise RankDeficientError(
            f"growth basis of subject {label!r} is rank deficient (all time values equal)",
            subject=label,
        )


@dataclass(frozen=True)
class GrowthBasis:
    """Per-subject ``T x 2`` matrices ``G_i = [1, g_i]`` stored as an (N, T, 2) array.

    The block-diagonal ``NT x 2N`` matrix ``G`` is never formed except by
    :meth:`to_dense`.
    """

    per_subject: np.ndarray

    @property
    def n_subjects(self):
        return self.per_subject.shape[0]

    @property
    def n_times(self):
        return self.per_subject.shape[1]

    @property
    def block_diagonal_shape(self):
        return (self.n_subjects * self.n_times, 2 * self.n_subjects)

    def to_dense(self):
        n, t = self.n_subjects, self.n_times
        out = np.zeros(self.block_diagonal_shape)
        for i in range(n):
            out[i * t:(i + 1) * t, 2 * i:2 * i + 2] = self.per_subject[i]
        return out


def build_growth_basis(dataset):
    """Stack the growth bases ``G_i``; raises if any subject has constant times."""
    _check_basis_rank(dataset.time_values, dataset.subject_ids)
    g = dataset.time_values
    basis = np.stack([np.ones_like(g), g], axis=2)
    basis.setflags(write=False)
    return GrowthBasis(basis)


@dataclass(frozen=True)
class CovarianceComponents:
    """Spatial, temporal and random-effect covariance pieces.

    ``sigma_R`` is ``R x R``, ``sigma_T`` is ``T x T`` (normalized to trace
    ``T`` by the estimator), ``sigma_zeta`` is ``2 x 2`` and ``kappa`` is
    ``tr(sigma_R) / R``. ``diagnostics`` records repairs made while estimating.
    """

    sigma_R: np.ndarray
    sigma_T: np.ndarray
    sigma_zeta: np.ndarray
    kappa: float
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("sigma_R", "sigma_T", "sigma_zeta"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
                raise DimensionError(f"{name} must be square, got {arr.shape}", array_name=name)
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"{name} has non-finite entries")
            if np.abs(arr - arr.T).max() > 1e-12 * max(1.0, np.abs(arr).max()):
                raise NumericalError(f"{name} is not symmetric")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.sigma_zeta.shape != (2, 2):
            raise DimensionError("sigma_zeta must be 2 x 2", array_name="sigma_zeta")
        if not np.isfinite(self.kappa):
            raise NumericalError("kappa is not finite")
        T = self.sigma_T.shape[0]
        if abs(np.trace(self.sigma_T) - T) > 1e-8 * T:
            raise NumericalError(
                f"sigma_T must have trace T={T}, got {np.trace(self.sigma_T):.12g}")
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def region_variances(self):
        return np.diag(self.sigma_R)


class RegionCovariance:
    """Block-diagonal covariance of ``G zeta_r + eps_r`` for one region.

    Block ``i`` equals ``G_i Sigma_zeta G_i^T + [Sigma_R]_{rr} Sigma_T``.
    """

    def __init__(self, region_index, blocks):
        self.region_index = region_index
        self.blocks = blocks

    @property
    def n_subjects(self):
        return self.blocks.shape[0]

    @cached_property
    def cholesky_factors(self):
        try:
            return np.linalg.cholesky(self.blocks)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"covariance blocks of region {self.region_index} are not positive definite"
            ) from exc

    @cached_property
    def block_inverses(self):
        inv = np.linalg.inv(self.cholesky_factors)
        return np.swapaxes(inv, 1, 2) @ inv

    @cached_property
    def log_det(self):
        diag = np.diagonal(self.cholesky_factors, axis1=1, axis2=2)
        return float(2.0 * np.log(diag).sum())

    def to_dense(self):
        n, t = self.blocks.shape[:2]
        out = np.zeros((n * t, n * t))
        for i in range(n):
            out[i * t:(i + 1) * t, i * t:(i + 1) * t] = self.blocks[i]
        return out


def _symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def assemble_all_blocks(components, basis):
    """Covariance blocks for every region at once, shape (R, N, T, T)."""
    G = basis.per_subject
    if components.sigma_T.shape[0] != G.shape[1]:
        raise DimensionError(
            f"sigma_T is {components.sigma_T.shape}, basis has T={G.shape[1]}",
            array_name="sigma_T",
        )
    random_part = G @ components.sigma_zeta @ np.swapaxes(G, 1, 2)
    scale = components.region_variances
    blocks = random_part[None] + scale[:, None, None, None] * components.sigma_T[None, None]
    blocks = _symmetrize(blocks)
    if not np.all(np.isfinite(blocks)):
        raise NumericalError("assembled covariance blocks contain non-finite entries")
    return blocks


def assemble_region_covariance(components, basis, r):
    """Covariance of region ``r`` from its components (one ``T x T`` block per subject)."""
    R = components.sigma_R.shape[0]
    if not 0 <= r < R:
        raise IndexError(f"region index {r} out of range for R={R}")
    s = components.sigma_R[r, r]
    if not np.isfinite(s):
        raise NumericalError(f"sigma_R[{r}, {r}] is not finite")
    G = basis.per_subject
    blocks = G @ components.sigma_zeta @ np.swapaxes(G, 1, 2) + s * components.sigma_T
    blocks = _symmetrize(blocks)
    if not np.all(np.isfinite(blocks)):
        raise NumericalError(
            f"covariance blocks of region {r} are non-finite "
            "(check sigma_zeta, sigma_T and sigma_R)"
        )
    blocks.setflags(write=False)
    return RegionCovariance(r, blocks)


class CoefficientMatrix:
    """Fixed effects ``beta^(r)`` for all regions, stored row-wise as (R, 2p+q+2).

    The first ``2p+2`` entries of each row are ``eta_r = (mu0, mu1, gamma0, gamma1)``;
    the remaining ``q`` entries are ``xi_r``.
    """

    def __init__(self, values, p, q):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[1] != 2 * p + q + 2:
            raise DimensionError(
                f"coefficient array has shape {values.shape}, expected (R, {2 * p + q + 2})",
                array_name="coefficients",
            )
        self.values = values
        self.p = p
        self.q = q

    @property
    def per_region(self):
        return list(self.values)

    @property
    def eta(self):
        return self.values[:, :2 * self.p + 2]

    @property
    def xi(self):
        return self.values[:, 2 * self.p + 2:]

    @property
    def mu0(self):
        return self.values[:, 0]

    @property
    def mu1(self):
        return self.values[:, 1]

    @property
    def gamma0(self):
        return self.values[:, 2:2 + self.p]

    @property
    def gamma1(self):
        return self.values[:, 2 + self.p:2 * self.p + 2]


def center_responses(dataset):
    """Subtract the cross-subject mean at every (region, time)."""
    if dataset.n_subjects < 2:
        raise DimensionError("centering needs at least two subjects", array_name="responses")
    y = dataset.responses
    return y - y.mean(axis=0, keepdims=True)
