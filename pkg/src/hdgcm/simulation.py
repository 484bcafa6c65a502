"""Synthetic data from the multi-response growth curve model.

Temporal covariances follow autoregressive or moving-average bases with
heterogeneous visit variances; spatial covariances are inverses of sparse hub
or small-world precision matrices. Both are normalized so that
``tr(Sigma_T) = T`` and ``tr(Sigma_R) = R``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import networkx as nx
import numpy as np

from .errors import DimensionError, NumericalError
from .model import CoefficientMatrix, CovarianceComponents, GrowthCurveDataset

__all__ = [
    "SimulationConfig",
    "GroundTruth",
    "make_temporal",
    "make_spatial",
    "make_zeta",
    "make_coefficients",
    "make_truth",
    "sample_dataset",
    "sym_sqrt",
    "replication_rng",
]

TEMPORAL_KINDS = ("autoregressive", "moving_average")
SPATIAL_KINDS = ("hub", "small_world")
ERROR_FAMILIES = ("gaussian", "sub_gaussian")
_ALIASES = {"ar": "autoregressive", "ma": "moving_average", "small": "small_world",
            "smallworld": "small_world", "subgaussian": "sub_gaussian"}


def _canon(value, allowed, name):
    value = _ALIASES.get(str(value).lower().replace("-", "_"), str(value).lower())
    if value not in allowed:
        raise ValueError(f"unknown {name} {value!r}; expected one of {allowed}")
    return value


@dataclass(frozen=True)
class SimulationConfig:
    """Parameters of one simulation design.

    ``omega`` is the fraction of nonzero entries among the ``(2p+2) R`` tested
    coefficients, each equal to ``signal_value``. A fraction ``xi_sparsity`` of
    the ``q R`` untested coefficients equal ``xi_value``.
    """

    N: int = 200
    T: int = 4
    R: int = 50
    p: int = 10
    q: int = 2
    temporal_kind: str = "autoregressive"
    spatial_kind: str = "hub"
    omega: float = 0.05
    signal_value: float = 0.5
    xi_sparsity: float = 0.05
    xi_value: float = 0.5
    error_family: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "temporal_kind",
                           _canon(self.temporal_kind, TEMPORAL_KINDS, "temporal_kind"))
        object.__setattr__(self, "spatial_kind",
                           _canon(self.spatial_kind, SPATIAL_KINDS, "spatial_kind"))
        object.__setattr__(self, "error_family",
                           _canon(self.error_family, ERROR_FAMILIES, "error_family"))
        for name in ("N", "T", "R"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.p < 0 or self.q < 0:
            raise ValueError("p and q must be non-negative")
        for name in ("omega", "xi_sparsity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class GroundTruth:
    components: CovarianceComponents
    coefficients: CoefficientMatrix
    null_set: np.ndarray
    precision_R: np.ndarray

    @property
    def nonnull_mask(self):
        return ~self.null_set


def make_temporal(kind, T):
    """Temporal covariance scaled to trace ``T``.

    Visit standard deviations cycle through ``(1, 2, 3, 4)``.
    """
    kind = _canon(kind, TEMPORAL_KINDS, "temporal_kind")
    lag = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    if kind == "autoregressive":
        base = 0.4 ** lag
    else:
        base = np.where(lag <= 3, 1.0 / (lag + 1.0), 0.0)
    u = np.resize(np.arange(1.0, 5.0), T)
    scaled = base * np.outer(u, u)
    return scaled * (T / np.trace(scaled))


def _offdiag_draws(rng, size):
    mag = rng.uniform(0.2, 0.6, size=size)
    sign = rng.choice([-1.0, 1.0], size=size)
    return mag * sign


def _hub_edges(R):
    if R % 5:
        raise ValueError(f"hub graph needs R divisible by 5, got R={R}")
    edges = []
    for start in range(0, R, 5):
        edges.extend((start, start + k) for k in range(1, 5))
    return edges


def _small_world_edges(R, rng, rewire=0.05):
    if R < 3:
        raise ValueError(f"small-world graph needs R >= 3, got R={R}")
    seed = int(rng.integers(2 ** 32))
    graph = nx.watts_strogatz_graph(R, 2, rewire, seed=seed)
    return sorted(tuple(sorted(e)) for e in graph.edges())


def make_spatial(kind, R, rng):
    """Spatial covariance from a sparse precision graph.

    Returns ``(Sigma_R, Omega_R)`` where ``Omega_R`` is the shifted,
    rescaled precision matrix before inversion and normalization.
    """
    kind = _canon(kind, SPATIAL_KINDS, "spatial_kind")
    edges = _hub_edges(R) if kind == "hub" else _small_world_edges(R, rng)
    omega = np.eye(R)
    if edges:
        a, b = np.array(edges).T
        vals = _offdiag_draws(rng, len(edges))
        omega[a, b] = vals
        omega[b, a] = vals
    # shift keeps the smallest eigenvalue at least 0.05 before rescaling
    delta = max(0.05, 0.05 - np.linalg.eigvalsh(omega).min())
    omega = (omega + delta * np.eye(R)) / (1.0 + delta)
    cov = np.linalg.inv(omega)
    cov = 0.5 * (cov + cov.T)
    cov *= R / np.trace(cov)
    return cov, omega


def make_zeta(T):
    return np.array([[6.0, 3.0], [3.0, 9.0]]) / T


def _sparse_positions(rng, n_cells, fraction):
    k = int(round(fraction * n_cells))
    mask = np.zeros(n_cells, dtype=bool)
    if k:
        mask[rng.choice(n_cells, size=k, replace=False)] = True
    return mask


def make_coefficients(config, rng):
    """Sparse coefficients; returns ``(CoefficientMatrix, null_set)``."""
    R, p, q = config.R, config.p, config.q
    m = 2 * p + 2
    eta_mask = _sparse_positions(rng, R * m, config.omega).reshape(R, m)
    xi_mask = _sparse_positions(rng, R * q, config.xi_sparsity).reshape(R, q)
    values = np.zeros((R, m + q))
    values[:, :m][eta_mask] = config.signal_value
    values[:, m:][xi_mask] = config.xi_value
    return CoefficientMatrix(values, p, q), ~eta_mask


def make_truth(config, rng):
    sigma_T = make_temporal(config.temporal_kind, config.T)
    sigma_R, omega = make_spatial(config.spatial_kind, config.R, rng)
    components = CovarianceComponents(sigma_R, sigma_T, make_zeta(config.T),
                                      np.trace(sigma_R) / config.R)
    coefficients, null_set = make_coefficients(config, rng)
    return GroundTruth(components, coefficients, null_set, omega)


def sym_sqrt(a):
    """Symmetric PSD square root via eigendecomposition."""
    w, V = np.linalg.eigh(0.5 * (a + a.T))
    if w.min() < -1e-10 * max(1.0, w.max()):
        raise NumericalError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3g})")
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


_SUBG_SCALE = np.sqrt(13.0 / 12.0)


def _standard_draws(rng, size, family):
    if family == "gaussian":
        return rng.standard_normal(size)
    sign = rng.choice([-1.0, 1.0], size=size)
    return sign * rng.uniform(0.5, 1.5, size=size) / _SUBG_SCALE


def sample_dataset(config, truth, rng):
    """Draw designs, random effects and matrix-normal errors for one replicate."""
    N, T, R, p, q = config.N, config.T, config.R, config.p, config.q
    comp = truth.components
    if comp.sigma_T.shape != (T, T) or comp.sigma_R.shape != (R, R):
        raise DimensionError("ground truth does not match the configuration")
    g = rng.uniform(0.0, 1.0, size=(N, T))
    x = rng.standard_normal((N, p))
    z = rng.standard_normal((N, T, q))

    root_R = sym_sqrt(comp.sigma_R)
    root_T = sym_sqrt(comp.sigma_T)
    root_zeta = sym_sqrt(comp.sigma_zeta)
    fam = config.error_family
    eps = root_R @ _standard_draws(rng, (N, R, T), fam) @ root_T
    zeta = rng.standard_normal((N, R, 2)) @ root_zeta

    beta = truth.coefficients.values
    m = 2 * p + 2
    mean = beta[:, 0][None, :, None] + beta[:, 1][None, :, None] * g[:, None, :]
    mean = mean + (x @ beta[:, 2:2 + p].T)[:, :, None]
    mean = mean + (x @ beta[:, 2 + p:m].T)[:, :, None] * g[:, None, :]
    mean = mean + np.einsum("ntq,rq->nrt", z, beta[:, m:])
    y = mean + zeta[:, :, 0:1] + zeta[:, :, 1:2] * g[:, None, :] + eps
    return GrowthCurveDataset(y, g, x, z)


def replication_rng(seed, rep, arm=0):
    """Independent generator for replication ``rep`` of study arm ``arm``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(arm, rep)))
