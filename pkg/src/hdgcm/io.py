"""Long-format CSV ingestion, analysis configuration and report emission.

The input holds one row per (subject, visit) with a subject id column, a
time column, time-invariant (static) covariates, time-varying (dynamic)
covariates and one column per response region. Only commas are accepted as
delimiters.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
import os
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .covariance import estimate_all
from .errors import IngestError
from .inference import global_test, gls_fit, multiple_test
from .model import GrowthCurveDataset, build_design

logger = logging.getLogger(__name__)

__all__ = [
    "ColumnMapping",
    "AnalysisConfig",
    "AnalysisReport",
    "ingest",
    "write_dataset",
    "dataset_to_csv",
    "write_files_atomically",
    "standardize_covariates",
    "load_config_file",
    "run_analysis",
    "write_report",
    "format_float",
]


def format_float(value):
    """17 significant digits, enough for an exact round trip through text."""
    return "%.17g" % value


@dataclass(frozen=True)
class ColumnMapping:
    """Roles of the CSV columns.

    ``responses=None`` takes every column not named elsewhere, in file order.
    """

    id_column: str = "subject"
    time_column: str = "time"
    static_columns: tuple = ()
    dynamic_columns: tuple = ()
    responses: tuple = None

    def __post_init__(self):
        for name in ("static_columns", "dynamic_columns", "responses"):
            value = getattr(self, name)
            if value is not None:
                if isinstance(value, str):
                    value = [v for v in value.split(",") if v]
                object.__setattr__(self, name, tuple(str(v) for v in value))
        named = [self.id_column, self.time_column, *self.static_columns,
                 *self.dynamic_columns, *(self.responses or ())]
        dupes = sorted(k for k, c in Counter(named).items() if c > 1)
        if dupes:
            raise ValueError(f"columns mapped to more than one role: {dupes}")

    def resolve(self, header):
        """Response columns for a file with the given header."""
        missing = [c for c in (self.id_column, self.time_column, *self.static_columns,
                               *self.dynamic_columns, *(self.responses or ()))
                   if c not in header]
        if missing:
            raise IngestError(f"columns not found in header: {missing}")
        if self.responses is not None:
            return self.responses
        taken = {self.id_column, self.time_column, *self.static_columns, *self.dynamic_columns}
        rest = tuple(c for c in header if c not in taken)
        if not rest:
            raise IngestError("no response columns left after mapping the other roles")
        return rest


def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter=",")
            header = next(reader, None)
            rows = [row for row in reader if row]
    except UnicodeDecodeError as exc:
        raise IngestError(f"{path}: not UTF-8 text ({exc})") from exc
    if header is None:
        raise IngestError(f"{path}: file is empty")
    header = [h.strip() for h in header]
    dupes = sorted(k for k, c in Counter(header).items() if c > 1)
    if dupes:
        raise IngestError(f"{path}: duplicate header names {dupes}")
    return header, rows


def ingest(path, mapping=None):
    """Read a long-format CSV into a :class:`GrowthCurveDataset`.

    Subjects keep their order of first appearance and each subject's rows
    are sorted by time.

    Raises
    ------
    IngestError
        For ragged subjects, non-numeric cells, duplicate (subject, time)
        rows or static covariates that change within a subject.
    OSError
        If the file cannot be read.
    """
    mapping = mapping or ColumnMapping()
    header, rows = _read_rows(path)
    responses = mapping.resolve(header)
    col = {name: k for k, name in enumerate(header)}
    if not rows:
        raise IngestError(f"{path}: no data rows")

    numeric = [mapping.time_column, *mapping.static_columns, *mapping.dynamic_columns, *responses]
    num_idx = [col[c] for c in numeric]
    values = np.empty((len(rows), len(numeric)))
    order, per_subject = [], {}
    for line, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise IngestError(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")
        for j, k in enumerate(num_idx):
            try:
                values[line - 2, j] = float(row[k])
            except ValueError:
                raise IngestError(
                    f"{path}: non-numeric value {row[k]!r} at line {line}, column {header[k]!r}"
                ) from None
        sid = row[col[mapping.id_column]].strip()
        if sid not in per_subject:
            per_subject[sid] = []
            order.append(sid)
        per_subject[sid].append(line - 2)
    if not np.all(np.isfinite(values)):
        line, j = np.argwhere(~np.isfinite(values))[0]
        raise IngestError(f"{path}: non-finite value at line {line + 2}, column {numeric[j]!r}")

    counts = Counter(len(v) for v in per_subject.values())
    T = counts.most_common(1)[0][0]
    ragged = [s for s in order if len(per_subject[s]) != T]
    if ragged:
        detail = ", ".join(f"{s} ({len(per_subject[s])} rows)" for s in ragged[:20])
        raise IngestError(f"{path}: subjects without exactly {T} rows: {detail}")

    p, q = len(mapping.static_columns), len(mapping.dynamic_columns)
    N, R = len(order), len(responses)
    g = np.empty((N, T))
    x = np.empty((N, p))
    z = np.empty((N, T, q))
    y = np.empty((N, R, T))
    for i, sid in enumerate(order):
        block = values[per_subject[sid]]
        times = block[:, 0]
        if np.unique(times).size != T:
            dup = [float(t) for t, c in Counter(times.tolist()).items() if c > 1]
            raise IngestError(f"{path}: duplicate (subject, time) rows for subject {sid} at {dup}")
        block = block[np.argsort(times, kind="stable")]
        g[i] = block[:, 0]
        static = block[:, 1:1 + p]
        varies = np.flatnonzero(np.ptp(static, axis=0) > 0) if p else []
        if len(varies):
            names = [mapping.static_columns[k] for k in varies]
            raise IngestError(
                f"{path}: time-invariant column varies within subject {sid}: {names}")
        x[i] = static[0] if p else x[i]
        z[i] = block[:, 1 + p:1 + p + q]
        y[i] = block[:, 1 + p + q:].T
    return GrowthCurveDataset(y, g, x, z, region_names=responses,
                              static_names=mapping.static_columns,
                              dynamic_names=mapping.dynamic_columns,
                              subject_ids=tuple(order))


def _dataset_names(dataset):
    regions = dataset.region_names or tuple(f"y{k + 1}" for k in range(dataset.n_regions))
    static = dataset.static_names or tuple(f"x{k + 1}" for k in range(dataset.p))
    dynamic = dataset.dynamic_names or tuple(f"z{k + 1}" for k in range(dataset.q))
    ids = dataset.subject_ids or tuple(str(i + 1) for i in range(dataset.n_subjects))
    return ids, static, dynamic, regions


def dataset_to_csv(dataset, id_column="subject", time_column="time"):
    """Long-format CSV text of ``dataset`` and the :class:`ColumnMapping` to read it back."""
    ids, static, dynamic, regions = _dataset_names(dataset)
    mapping = ColumnMapping(id_column, time_column, static, dynamic, regions)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([id_column, time_column, *static, *dynamic, *regions])
    for i, sid in enumerate(ids):
        for t in range(dataset.n_times):
            row = [dataset.time_values[i, t], *dataset.static_covariates[i],
                   *dataset.dynamic_covariates[i, t], *dataset.responses[i, :, t]]
            writer.writerow([sid, *(format_float(v) for v in row)])
    return buf.getvalue(), mapping


def write_dataset(dataset, path, id_column="subject", time_column="time"):
    """Write ``dataset`` as long-format CSV; returns the matching :class:`ColumnMapping`."""
    text, mapping = dataset_to_csv(dataset, id_column, time_column)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    return mapping


def standardize_covariates(dataset):
    """Center and scale non-binary covariate columns to unit variance.

    Columns with two or fewer distinct values (group indicators) and
    constant columns are left unchanged. Returns the new dataset and a record
    ``{column: {"mean": m, "sd": s}}`` of the transformed columns.
    """
    ids, static, dynamic, _ = _dataset_names(dataset)
    x = np.array(dataset.static_covariates)
    z = np.array(dataset.dynamic_covariates)
    record = {}

    def _apply(values, name):
        if np.unique(values).size <= 2:
            return values
        mean, sd = float(values.mean()), float(values.std())
        if sd == 0:
            return values
        record[name] = {"mean": mean, "sd": sd}
        return (values - mean) / sd

    for k, name in enumerate(static):
        x[:, k] = _apply(x[:, k], name)
    for k, name in enumerate(dynamic):
        z[:, :, k] = _apply(z[:, :, k], name)
    out = GrowthCurveDataset(dataset.responses, dataset.time_values, x, z,
                             dataset.region_names, dataset.static_names,
                             dataset.dynamic_names, dataset.subject_ids)
    return out, record


@dataclass(frozen=True)
class AnalysisConfig:
    """Settings of one real-data analysis.

    ``K`` overrides the number of region pairs used for the temporal
    covariance. ``seed`` is reserved; the analysis is deterministic.
    """

    input: str
    columns: ColumnMapping = field(default_factory=ColumnMapping)
    alpha_global: float = 0.05
    alpha_fdr: float = 0.1
    K: int = None
    out: str = "results"
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        for name in ("alpha_global", "alpha_fdr"):
            a = getattr(self, name)
            if not 0 < a < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {a}")
        if self.K is not None and int(self.K) < 1:
            raise ValueError(f"K must be positive, got {self.K}")
        if isinstance(self.columns, dict):
            object.__setattr__(self, "columns", ColumnMapping(**self.columns))

    @classmethod
    def from_mapping(cls, values):
        """Build from a flat dict such as a parsed config file.

        Column keys are ``id_column``, ``time_column``, ``static_columns``,
        ``dynamic_columns`` and ``responses``; list values may be given as
        comma-separated strings.
        """
        values = dict(values)
        col_keys = ("id_column", "time_column", "static_columns", "dynamic_columns", "responses")
        cols = {k: values.pop(k) for k in col_keys if k in values}
        known = {"input", "alpha_global", "alpha_fdr", "K", "out", "seed", "standardize"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown configuration keys: {unknown}")
        if "input" not in values:
            raise ValueError("configuration needs an 'input' path")
        return cls(columns=ColumnMapping(**cols), **values)

    def fingerprint(self):
        """Hash of every setting that affects results (the output path is excluded)."""
        d = asdict(self)
        d.pop("out")
        d.pop("input")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config_file(path):
    """Parse a flat key-value YAML file into a dict."""
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected key-value pairs at the top level")
    nested = sorted(k for k, v in data.items() if isinstance(v, dict))
    if nested:
        raise ValueError(f"{path}: nested sections are not supported: {nested}")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


@dataclass
class AnalysisReport:
    """Estimates, tests and diagnostics from :func:`run_analysis`."""

    components: object
    coefficients: np.ndarray
    standard_errors: np.ndarray
    statistics: np.ndarray
    global_test: object
    multiple_test: object
    region_names: tuple
    coefficient_names: tuple
    diagnostics: dict
    provenance: dict

    @property
    def rejected(self):
        """Rejected hypotheses as ``(region, coefficient)`` name pairs."""
        return [(self.region_names[r], self.coefficient_names[j])
                for r, j in self.multiple_test.rejections]

    def to_dict(self):
        c = self.components
        g = self.global_test
        m = self.multiple_test
        return {
            "provenance": self.provenance,
            "dimensions": {
                "n_regions": len(self.region_names),
                "n_coefficients": len(self.coefficient_names),
                "n_tested": int(self.statistics.shape[1]),
            },
            "covariance": {
                "kappa": c.kappa,
                "sigma_T": c.sigma_T.tolist(),
                "sigma_zeta": c.sigma_zeta.tolist(),
                "sigma_R_diagonal": np.diag(c.sigma_R).tolist(),
            },
            "global_test": {
                "statistic": g.statistic,
                "threshold": g.threshold,
                "q_alpha": g.q_alpha,
                "p_tilde": g.p_tilde,
                "alpha": g.alpha,
                "approx_p_value": g.approx_p_value,
                "decision": "reject" if g.reject else "fail to reject",
                "argmax": {"region": self.region_names[g.argmax[0]],
                           "coefficient": self.coefficient_names[g.argmax[1]]},
            },
            "multiple_test": {
                "tau_hat": m.tau_hat,
                "t_cap": m.t_cap,
                "fallback_used": m.fallback_used,
                "alpha": m.alpha,
                "fdp_at_tau": m.fdp_at_tau,
                "n_rejections": m.n_rejections,
                "rejected": [{"region": r, "coefficient": j} for r, j in self.rejected],
            },
            "diagnostics": self.diagnostics,
        }


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def run_analysis(config, dataset=None):
    """Estimate the covariance, fit every region and run both tests.

    ``dataset`` may be passed to skip ingestion (the input file is still
    hashed when it exists).
    """
    if dataset is None:
        dataset = ingest(config.input, config.columns)
    dataset.check_estimable()
    standardization = {}
    if config.standardize:
        dataset, standardization = standardize_covariates(dataset)
    components = estimate_all(dataset, K=config.K)
    fit = gls_fit(dataset, build_design(dataset), components)
    g = global_test(fit.statistics, config.alpha_global)
    m = multiple_test(fit.statistics, config.alpha_fdr)

    _, _, _, regions = _dataset_names(dataset)
    diag = components.diagnostics
    diagnostics = {
        "dropped_pairs": _jsonable(diag.get("dropped_pairs", [])),
        "pairs_used": _jsonable(diag.get("pairs", [])),
        "sigma_zeta_repaired": bool(diag.get("sigma_zeta_repaired", False)),
        "sigma_T_repaired": bool(diag.get("sigma_T_repaired", False)),
        "floored_regions": [regions[k] for k in diag.get("floored_regions", [])],
        "trace_factor": _jsonable(diag.get("trace_factor")),
    }
    provenance = {
        "package_version": __version__,
        "input_sha256": _sha256(config.input) if os.path.exists(config.input) else None,
        "config_sha256": config.fingerprint(),
        "config": _jsonable({k: v for k, v in asdict(config).items() if k != "out"}),
        "standardize": config.standardize,
        "standardized_columns": standardization,
        "n_subjects": dataset.n_subjects,
        "n_times": dataset.n_times,
    }
    return AnalysisReport(components, fit.coefficients.values, fit.standard_errors,
                          fit.statistics, g, m, regions, dataset.coefficient_names(),
                          diagnostics, provenance)


def _matrix_csv(matrix, names=None):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if names is not None:
        writer.writerow(["", *names])
    for k, row in enumerate(np.asarray(matrix)):
        lead = [names[k]] if names is not None else []
        writer.writerow([*lead, *(format_float(v) for v in row)])
    return buf.getvalue()


def _coefficients_csv(report):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["region", "coefficient", "estimate", "std_error", "statistic", "rejected"])
    n_tested = report.statistics.shape[1]
    rejected = report.multiple_test.rejection_mask(report.statistics.shape)
    for r, region in enumerate(report.region_names):
        for j, name in enumerate(report.coefficient_names):
            tested = j < n_tested
            writer.writerow([
                region, name, format_float(report.coefficients[r, j]),
                format_float(report.standard_errors[r, j]),
                format_float(report.statistics[r, j]) if tested else "",
                str(bool(rejected[r, j])).lower() if tested else "",
            ])
    return buf.getvalue()


def _summary_text(report):
    g, m = report.global_test, report.multiple_test
    c = report.components
    lines = [
        f"regions: {len(report.region_names)}   tested coefficients per region: "
        f"{report.statistics.shape[1]}   p_tilde: {g.p_tilde}",
        f"subjects: {report.provenance['n_subjects']}   visits: {report.provenance['n_times']}",
        "",
        f"kappa: {c.kappa:.6g}",
        "sigma_zeta:",
        *("  " + "  ".join(f"{v: .6g}" for v in row) for row in c.sigma_zeta),
        "",
        f"global test (alpha={g.alpha}): J={g.statistic:.6g} threshold={g.threshold:.6g} "
        f"-> {'reject' if g.reject else 'fail to reject'} (approx p={g.approx_p_value:.3g})",
        f"multiple test (alpha={m.alpha}): tau={m.tau_hat:.6g} rejections={m.n_rejections}"
        + (" [fallback threshold]" if m.fallback_used else ""),
    ]
    for region, coef in report.rejected:
        lines.append(f"  {region}  {coef}")
    if report.provenance.get("standardize"):
        cols = ", ".join(report.provenance["standardized_columns"]) or "none"
        lines.append(f"standardized covariates: {cols}")
    return "\n".join(lines) + "\n"


def write_report(report, out_dir):
    """Write all report files into ``out_dir``.

    Files are first written to a staging directory next to ``out_dir`` and
    then moved in, so a failure leaves no partial set of outputs.
    """
    out_dir = Path(out_dir)
    files = {
        "report.json": json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True) + "\n",
        "coefficients.csv": _coefficients_csv(report),
        "sigma_R.csv": _matrix_csv(report.components.sigma_R, report.region_names),
        "sigma_T.csv": _matrix_csv(report.components.sigma_T),
        "sigma_zeta.csv": _matrix_csv(report.components.sigma_zeta),
        "fdp_curve.csv": "tau,fdp_hat\n" + "".join(
            f"{format_float(a)},{format_float(b)}\n" for a, b in report.multiple_test.fdp_curve),
        "summary.txt": _summary_text(report),
    }
    return write_files_atomically(files, out_dir)


def write_files_atomically(files, out_dir):
    """Write ``{name: text}`` into ``out_dir`` with all-or-nothing semantics."""
    out_dir = Path(out_dir)
    parent = out_dir.parent if str(out_dir.parent) else Path(".")
    parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=parent))
    try:
        for name, text in files.items():
            (staging / name).write_text(text, encoding="utf-8")
        out_dir.mkdir(exist_ok=True)
        for name in files:
            os.replace(staging / name, out_dir / name)
    finally:
        for leftover in staging.iterdir():
            leftover.unlink()
        staging.rmdir()
    return [out_dir / name for name in files]

