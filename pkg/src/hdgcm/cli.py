"""Command-line interface: ``fit``, ``simulate`` and ``study`` subcommands.

Exit codes follow ``sysexits``: 65 for invalid data, 64 for invalid
settings, 74 for unreadable inputs or unwritable outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import GCMError
from .io import (
    AnalysisConfig,
    dataset_to_csv,
    format_float,
    load_config_file,
    run_analysis,
    write_files_atomically,
    write_report,
)
from .simulation import SimulationConfig, make_truth, replication_rng, sample_dataset
from .studies import PRESETS, preset_cells, run_replication_study

logger = logging.getLogger("hdgcm.cli")

EX_USAGE = getattr(os, "EX_USAGE", 64)
EX_DATAERR = getattr(os, "EX_DATAERR", 65)
EX_IOERR = getattr(os, "EX_IOERR", 74)

SIM_KEYS = ("N", "T", "R", "p", "q", "temporal_kind", "spatial_kind", "omega",
            "signal_value", "xi_sparsity", "xi_value", "error_family", "seed")


def _config_values(path):
    return load_config_file(path) if path else {}


def _hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# ---------------------------------------------------------------- fit

def _cmd_fit(args):
    values = _config_values(args.config)
    if "input" in values and not os.path.isabs(str(values["input"])):
        # a relative input in a config file is relative to that file
        values["input"] = os.path.join(os.path.dirname(args.config), str(values["input"]))
    overrides = {
        "input": args.input,
        "alpha_global": args.alpha_global,
        "alpha_fdr": args.alpha_fdr,
        "out": args.out,
        "seed": args.seed,
        "K": args.K,
        "id_column": args.id_column,
        "time_column": args.time_column,
        "static_columns": args.static,
        "dynamic_columns": args.dynamic,
        "responses": args.responses,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_standardize:
        values["standardize"] = False
    config = AnalysisConfig.from_mapping(values)
    report = run_analysis(config)
    paths = write_report(report, config.out)
    g, m = report.global_test, report.multiple_test
    print(f"global test: {'reject' if g.reject else 'fail to reject'} "
          f"(J={g.statistic:.4g}, threshold={g.threshold:.4g}); "
          f"multiple test: {m.n_rejections} rejection(s) at tau={m.tau_hat:.4g}")
    print(f"wrote {len(paths)} files to {config.out}")
    return 0


# ---------------------------------------------------------------- simulate

def _sim_config(args, values):
    cli = {"N": args.N, "T": args.T, "R": args.R, "p": args.p, "q": args.q,
           "temporal_kind": args.temporal, "spatial_kind": args.spatial,
           "omega": args.omega, "signal_value": args.signal,
           "error_family": args.error_family, "seed": args.seed}
    values = {k: v for k, v in values.items() if k in SIM_KEYS}
    values.update({k: v for k, v in cli.items() if v is not None})
    return SimulationConfig(**values)


def _cmd_simulate(args):
    values = _config_values(args.config)
    unknown = sorted(set(values) - set(SIM_KEYS))
    if unknown:
        raise ValueError(f"unknown simulation keys: {unknown}")
    config = _sim_config(args, values)
    rng = replication_rng(config.seed, 0, 0)
    truth = make_truth(config, rng)
    data = sample_dataset(config, truth, rng)
    text, mapping = dataset_to_csv(data)
    c = truth.components
    truth_doc = {
        "config": config.to_dict(),
        "column_mapping": {"id_column": mapping.id_column, "time_column": mapping.time_column,
                           "static_columns": list(mapping.static_columns),
                           "dynamic_columns": list(mapping.dynamic_columns),
                           "responses": list(mapping.responses)},
        "sigma_R": c.sigma_R.tolist(),
        "sigma_T": c.sigma_T.tolist(),
        "sigma_zeta": c.sigma_zeta.tolist(),
        "kappa": c.kappa,
        "coefficients": truth.coefficients.values.tolist(),
        "nonnull": np.argwhere(truth.nonnull_mask).tolist(),
        "package_version": __version__,
    }
    fit_cfg = {"input": "data.csv", "id_column": mapping.id_column,
               "time_column": mapping.time_column,
               "static_columns": ",".join(mapping.static_columns),
               "dynamic_columns": ",".join(mapping.dynamic_columns),
               "standardize": False}
    files = {
        "data.csv": text,
        "truth.json": json.dumps(truth_doc, indent=2) + "\n",
        "fit_config.yaml": "".join(f"{k}: {json.dumps(v)}\n" for k, v in fit_cfg.items()),
    }
    write_files_atomically(files, args.out)
    print(f"wrote simulated dataset (N={config.N}, T={config.T}, R={config.R}) to {args.out}")
    return 0


# ---------------------------------------------------------------- study

_METRIC_ROWS = {"bias": (("cov_bias", "Bias (covariance)"), ("cov_se", "SE (covariance)"),
                         ("coef_bias", "Bias (coefficient)"), ("coef_se", "SE (coefficient)")),
                "global": (("size", "Empirical size (%)"), ("power", "Empirical power (%)")),
                "fdr": (("fdr", "Empirical FDR (%)"), ("power", "Empirical power (%)"))}


def _display(kind, key, value):
    return 100.0 * value if kind in ("global", "fdr") else value


def _study_tables(preset, cells, results):
    columns = list(dict.fromkeys(c["column"] for c in cells))
    long_rows, wide = [], {}
    for cell, rep in zip(cells, results):
        for key, label in _METRIC_ROWS[cell["kind"]]:
            value = rep.metrics.get(key, float("nan"))
            long_rows.append([preset, cell["kind"], cell["R"], cell["N"], cell["column"],
                              key, format_float(value), rep.n_reps, rep.n_failures])
            wide.setdefault((cell["R"], cell["N"], cell["kind"], label), {})[cell["column"]] = \
                _display(cell["kind"], key, value)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["R", "N", "study", "metric", *columns])
    for (R, N, kind, label), row in wide.items():
        cells_out = (format_float(row[c]) if c in row else "" for c in columns)
        w.writerow([R, N, kind, label, *cells_out])
    wide_text = buf.getvalue()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["preset", "kind", "R", "N", "column", "metric", "value", "n_reps", "n_failures"])
    w.writerows(long_rows)
    return wide_text, buf.getvalue()


def _cmd_study(args):
    if args.preset not in PRESETS:
        raise KeyError(f"unknown preset {args.preset!r}; valid presets: "
                       f"{', '.join(sorted(PRESETS))}")
    values = _config_values(args.config)
    base = _sim_config(args, values)
    cells = preset_cells(args.preset, base.temporal_kind, base)
    started = time.perf_counter()
    results = []
    for k, cell in enumerate(cells):
        logger.info("cell %d/%d: %s R=%d N=%d %s", k + 1, len(cells), cell["kind"],
                    cell["R"], cell["N"], cell["column"])
        results.append(run_replication_study(cell["config"], cell["kind"], args.reps,
                                             workers=args.threads, keep_reps=False))
    wide, long = _study_tables(args.preset, cells, results)
    provenance = {
        "preset": args.preset,
        "n_reps": args.reps,
        "seed": base.seed,
        "temporal_kind": base.temporal_kind,
        "package_version": __version__,
        "config_sha256": _hash({"preset": args.preset, "reps": args.reps,
                                "base": base.to_dict()}),
        "cells": [{"R": c["R"], "N": c["N"], "column": c["column"], "kind": c["kind"],
                   "config": c["config"].to_dict(), "n_failures": r.n_failures}
                  for c, r in zip(cells, results)],
    }
    header = "".join(f"# {k}: {provenance[k]}\n" for k in
                     ("preset", "n_reps", "seed", "temporal_kind", "package_version",
                      "config_sha256"))
    files = {"study_wide.csv": header + wide, "study_long.csv": header + long,
             "provenance.json": json.dumps(provenance, indent=2) + "\n"}
    write_files_atomically(files, args.out)
    print(f"{len(cells)} cell(s), {args.reps} replication(s) each, "
          f"{time.perf_counter() - started:.1f}s; wrote {args.out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="hdgcm", description="High-dimensional growth curve model estimation and testing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="analyse a long-format CSV dataset")
    fit.add_argument("--input", help="long-format CSV, one row per subject and visit")
    fit.add_argument("--config", help="flat YAML file with analysis settings")
    fit.add_argument("--out", help="output directory (default: results)")
    fit.add_argument("--alpha-global", type=float, dest="alpha_global")
    fit.add_argument("--alpha-fdr", type=float, dest="alpha_fdr")
    fit.add_argument("--K", type=int, help="number of region pairs for the temporal estimate")
    fit.add_argument("--seed", type=int, help="reserved; the analysis is deterministic")
    fit.add_argument("--threads", type=int, default=1, help="accepted for symmetry; unused")
    fit.add_argument("--id-column", dest="id_column")
    fit.add_argument("--time-column", dest="time_column")
    fit.add_argument("--static", help="comma-separated time-invariant covariate columns")
    fit.add_argument("--dynamic", help="comma-separated time-varying covariate columns")
    fit.add_argument("--responses", help="comma-separated response columns (default: the rest)")
    fit.add_argument("--no-standardize", action="store_true", dest="no_standardize",
                     help="keep continuous covariates on their original scale")
    fit.set_defaults(func=_cmd_fit)

    def _sim_args(p):
        p.add_argument("--config", help="flat YAML file with simulation settings")
        p.add_argument("--seed", type=int)
        p.add_argument("--N", type=int)
        p.add_argument("--T", type=int)
        p.add_argument("--R", type=int)
        p.add_argument("--p", type=int)
        p.add_argument("--q", type=int)
        p.add_argument("--temporal", choices=("autoregressive", "moving_average", "ar", "ma"))
        p.add_argument("--spatial", choices=("hub", "small_world"))
        p.add_argument("--omega", type=float)
        p.add_argument("--signal", type=float)
        p.add_argument("--error-family", dest="error_family",
                       choices=("gaussian", "sub_gaussian"))

    sim = sub.add_parser("simulate", help="write one simulated dataset and its ground truth")
    _sim_args(sim)
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=_cmd_simulate)

    study = sub.add_parser("study", help="run a replication preset")
    _sim_args(study)
    study.add_argument("--preset", required=True, help=f"one of: {', '.join(sorted(PRESETS))}")
    study.add_argument("--reps", type=int, default=200)
    study.add_argument("--threads", type=int, default=1, help="worker processes")
    study.add_argument("--out", required=True, help="output directory")
    study.set_defaults(func=_cmd_study)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "reps", 1) < 1:
        parser.error("--reps must be at least 1")
    try:
        return args.func(args)
    except GCMError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EX_DATAERR
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EX_IOERR
    except (ValueError, KeyError, TypeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: settings: {msg}", file=sys.stderr)
        return EX_USAGE


if __name__ == "__main__":
    sys.exit(main())
