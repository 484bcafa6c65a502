"""Monte-Carlo replication studies and the table presets built on them.

Every replication draws its own ground truth and data from a generator keyed
by ``(seed, arm, replication)``, so results do not depend on how replications
are scheduled across worker processes.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .covariance import estimate_all
from .errors import GCMError
from .inference import gls_fit, global_test, multiple_test
from .model import assemble_all_blocks, build_design, build_growth_basis
from .simulation import SimulationConfig, make_truth, replication_rng, sample_dataset

logger = logging.getLogger(__name__)

STUDY_KINDS = ("bias", "global", "fdr")

__all__ = [
    "StudyReport",
    "run_replication_study",
    "run_consistency_study",
    "run_null_calibration",
    "PRESETS",
    "preset_cells",
    "band_count",
]


@dataclass
class StudyReport:
    kind: str
    config: dict
    n_reps: int
    alpha: float
    n_failures: int
    metrics: dict
    per_rep: list = field(default_factory=list, repr=False)


def band_count(N, T):
    """Number of entries with ``|b1 - b2| <= T`` in an ``NT x NT`` matrix."""
    n = N * T
    return (2 * T + 1) * n - T * (T + 1)


def _fit(config, rng):
    truth = make_truth(config, rng)
    data = sample_dataset(config, truth, rng)
    comp = estimate_all(data)
    fit = gls_fit(data, build_design(data), comp)
    return truth, data, comp, fit


def _bias_rep(config, rng, alpha):
    truth, data, comp, fit = _fit(config, rng)
    basis = build_growth_basis(data)
    diff = assemble_all_blocks(comp, basis) - assemble_all_blocks(truth.components, basis)
    m = 2 * config.p + 2
    coef = (fit.coefficients.values[:, :m] - truth.coefficients.values[:, :m]).ravel()
    return {
        "cov_sum": float(diff.sum()),
        "cov_sumsq": float((diff ** 2).sum()),
        "cov_count": config.R * band_count(config.N, config.T),
        "coef_sum": float(coef.sum()),
        "coef_sumsq": float((coef ** 2).sum()),
        "coef_count": coef.size,
    }


def _global_rep(config, rng, alpha):
    _, _, _, fit = _fit(config, rng)
    report = global_test(fit.statistics, alpha)
    return {"reject": bool(report.reject), "statistic": report.statistic}


def _fdr_rep(config, rng, alpha):
    truth, _, _, fit = _fit(config, rng)
    report = multiple_test(fit.statistics, alpha)
    rejected = report.rejection_mask(fit.statistics.shape)
    nonnull = truth.nonnull_mask
    false = int((rejected & truth.null_set).sum())
    true = int((rejected & nonnull).sum())
    n_rej = int(rejected.sum())
    return {
        "fdp": false / max(n_rej, 1),
        "tpp": true / nonnull.sum() if nonnull.any() else float("nan"),
        "n_rejections": n_rej,
        "tau_hat": report.tau_hat,
        "fallback": report.fallback_used,
    }


_REP_FUNCS = {"bias": _bias_rep, "global": _global_rep, "fdr": _fdr_rep}


def _run_one(task):
    kind, config, arm, rep, alpha = task
    rng = replication_rng(config.seed, rep, arm)
    try:
        out = _REP_FUNCS[kind](config, rng, alpha)
        out["ok"] = True
    except (GCMError, np.linalg.LinAlgError) as exc:
        out = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
    out["rep"] = rep
    out["arm"] = arm
    return out


def _execute(tasks, workers):
    if workers is None or workers <= 1 or len(tasks) <= 1:
        results = [_run_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    return sorted(results, key=lambda d: (d["arm"], d["rep"]))


def _mean_sd(rows, prefix):
    total = math.fsum(r[f"{prefix}_sum"] for r in rows)
    sumsq = math.fsum(r[f"{prefix}_sumsq"] for r in rows)
    count = sum(r[f"{prefix}_count"] for r in rows)
    if not count:
        return float("nan"), float("nan")
    mean = total / count
    return mean, math.sqrt(max(sumsq / count - mean ** 2, 0.0))


def _frac(rows, key):
    return math.fsum(float(r[key]) for r in rows) / len(rows) if rows else float("nan")


def run_replication_study(config, study_kind, n_reps, alpha=None, workers=1,
                          arms=("size", "power"), keep_reps=True):
    """Repeat simulate-estimate-test ``n_reps`` times and summarize.

    ``bias``: mean and SD of covariance-entry errors (within the band
    ``|b1-b2| <= T`` of every region covariance) and of the errors in the
    tested coefficients. ``global``: rejection rates with all tested
    coefficients zero (size) and under ``config`` (power). ``fdr``: mean
    false discovery proportion and mean true-positive proportion.
    """
    if study_kind not in STUDY_KINDS:
        raise ValueError(f"unknown study kind {study_kind!r}; expected one of {STUDY_KINDS}")
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    if alpha is None:
        alpha = {"global": 0.05, "fdr": 0.1}.get(study_kind, 0.05)

    if study_kind == "global":
        cfgs = {"size": config.with_(omega=0.0), "power": config}
        arm_ids = {"size": 0, "power": 1}
        tasks = [("global", cfgs[a], arm_ids[a], rep, alpha) for a in arms for rep in range(n_reps)]
    else:
        tasks = [(study_kind, config, 0, rep, alpha) for rep in range(n_reps)]
    results = _execute(tasks, workers)
    ok = [r for r in results if r["ok"]]
    failures = [r for r in results if not r["ok"]]
    for r in failures:
        logger.warning("replication %d (arm %d) failed: %s", r["rep"], r["arm"], r["error"])

    metrics = {}
    if study_kind == "bias":
        metrics["cov_bias"], metrics["cov_se"] = _mean_sd(ok, "cov")
        metrics["coef_bias"], metrics["coef_se"] = _mean_sd(ok, "coef")
    elif study_kind == "global":
        if "size" in arms:
            metrics["size"] = _frac([r for r in ok if r["arm"] == 0], "reject")
        if "power" in arms:
            metrics["power"] = _frac([r for r in ok if r["arm"] == 1], "reject")
    else:
        metrics["fdr"] = _frac(ok, "fdp")
        metrics["power"] = _frac(ok, "tpp")
        metrics["fallback_rate"] = _frac(ok, "fallback")
    return StudyReport(study_kind, config.to_dict(), n_reps, alpha, len(failures), metrics,
                       results if keep_reps else [])


def _max_block_error(comp, truth_comp, data):
    basis = build_growth_basis(data)
    return float(np.abs(assemble_all_blocks(comp, basis)
                        - assemble_all_blocks(truth_comp, basis)).max())


def _consistency_pair(task):
    config, rep, n_small = task
    rng = replication_rng(config.seed, rep, 2)
    truth = make_truth(config, rng)
    data = sample_dataset(config, truth, rng)
    small = data.subset(np.arange(n_small))
    err_full = _max_block_error(estimate_all(data), truth.components, data)
    err_small = _max_block_error(estimate_all(small), truth.components, small)
    return rep, err_small, err_full


def run_consistency_study(config, n_pairs, n_small, workers=1):
    """Paired max-norm covariance errors at ``n_small`` subjects versus ``config.N``.

    The smaller dataset is the first ``n_small`` subjects of the larger one.
    Returns ``(fraction improved, errors_small, errors_full)``.
    """
    tasks = [(config, rep, n_small) for rep in range(n_pairs)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_consistency_pair, tasks))
    else:
        out = [_consistency_pair(t) for t in tasks]
    out.sort()
    small = np.array([o[1] for o in out])
    full = np.array([o[2] for o in out])
    return float(np.mean(full < small)), small, full


def _null_rep(task):
    config, rep = task
    rng = replication_rng(config.seed, rep, 3)
    truth = make_truth(config, rng)
    data = sample_dataset(config, truth, rng)
    fit = gls_fit(data, build_design(data), truth.components)
    return rep, fit.statistics


def run_null_calibration(config, n_reps, workers=1):
    """Studentized statistics under the global null with the true covariance plugged in.

    Returns an array of shape (n_reps, R, 2p+2).
    """
    config = config.with_(omega=0.0)
    tasks = [(config, rep) for rep in range(n_reps)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_null_rep, tasks))
    else:
        out = [_null_rep(t) for t in tasks]
    out.sort(key=lambda o: o[0])
    return np.stack([o[1] for o in out])


def _grid(kind, T, temporal, columns, base):
    cells = []
    for R in (50, 100):
        for N in (100, 200):
            for col in columns:
                cfg = base.with_(N=N, T=T, R=R, temporal_kind=temporal, **col["config"])
                cells.append({"R": R, "N": N, "column": col["name"], "kind": kind,
                              "config": cfg})
    return cells


def preset_cells(name, temporal="autoregressive", base=None):
    """Cells of a named preset as dicts with ``R``, ``N``, ``column``, ``kind``, ``config``."""
    base = base or SimulationConfig()
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; valid presets: {', '.join(sorted(PRESETS))}")
    return PRESETS[name](temporal, base)


def _table1(T):
    def build(temporal, base):
        cols = [{"name": f"{s}_omega{w}", "config": {"spatial_kind": s, "omega": w,
                                                    "signal_value": 0.5, "xi_value": 0.5}}
                for w in (0.03, 0.05) for s in ("hub", "small_world")]
        return _grid("bias", T, temporal, cols, base)
    return build


def _table2(T):
    def build(temporal, base):
        cols = [{"name": s, "config": {"spatial_kind": s, "omega": 0.05,
                                       "signal_value": 0.2, "xi_value": 0.2}}
                for s in ("hub", "small_world")]
        return _grid("global", T, temporal, cols, base)
    return build


def _table3(T):
    def build(temporal, base):
        cols = [{"name": f"{s}_omega{w}", "config": {"spatial_kind": s, "omega": w,
                                                    "signal_value": 0.5, "xi_value": 0.5}}
                for w in (0.03, 0.05) for s in ("hub", "small_world")]
        return _grid("fdr", T, temporal, cols, base)
    return build


def _smoke(temporal, base):
    cfg = base.with_(N=100, T=4, R=50, temporal_kind=temporal)
    return [{"R": 50, "N": 100, "column": "hub", "kind": kind, "config": cfg}
            for kind in STUDY_KINDS]


PRESETS = {
    "table1-T4": _table1(4),
    "table1-T8": _table1(8),
    "table2-T4": _table2(4),
    "table2-T8": _table2(8),
    "table3-T4": _table3(4),
    "table3-T8": _table3(8),
    "smoke": _smoke,
}
