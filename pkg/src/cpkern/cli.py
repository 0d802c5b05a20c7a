"""Command-line front end: fit, simulate, evaluate, bandwidth-scan.

Every command reads an optional plain-text key=value config file, writes
its artifacts plus a manifest.json with content digests of inputs and
outputs, and exits 0 on success, 2 on input/validation problems, 3 on
numerical failures.
"""

import argparse
import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cp import model_from_json, model_to_json
from .data import load_dataset_dir
from .errors import CpkernError, DataError, NumericalError
from .metrics import (PairedLassoConfig, component_table, evaluate_estimate,
                      paired_lasso)
from .selection import SelectionConfig, run_full
from .simulate import SimConfig, generate_replicate, write_truth
from .solver import SolverConfig

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- config

def parse_config(path):
    """key = value lines; blank lines and # comments ignored."""
    raw = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError("cannot read config file %s: %s" % (path, exc))
    with fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise DataError("%s:%d: expected 'key = value'"
                                % (path, lineno))
            key, _, value = text.partition("=")
            key = key.strip()
            if not key:
                raise DataError("%s:%d: empty key" % (path, lineno))
            if key in raw:
                raise DataError("%s:%d: duplicate key %r" % (path, lineno,
                                                             key))
            raw[key] = value.strip()
    return raw


def _conv_bool(value):
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError("not a boolean: %r" % value)


def _conv_int_list(value):
    return tuple(int(v.strip()) for v in value.split(",") if v.strip())


def _conv_float_list(value):
    return tuple(float(v.strip()) for v in value.split(",") if v.strip())


class ConfigMap:
    """Raw key-value view with typed access and unknown-key detection."""

    def __init__(self, raw):
        self.raw = dict(raw)
        self.used = set()

    def get(self, key, conv, default=None):
        self.used.add(key)
        if key not in self.raw:
            return default
        try:
            return conv(self.raw[key])
        except (ValueError, TypeError) as exc:
            raise DataError("config key %s: %s" % (key, exc))

    def apply(self, obj, mapping):
        """Set dataclass fields from config keys when present."""
        for key, (field, conv) in mapping.items():
            val = self.get(key, conv)
            if val is not None:
                setattr(obj, field, val)

    def reject_unknown(self):
        unknown = sorted(set(self.raw) - self.used)
        if unknown:
            raise DataError("unknown config key(s): %s" % ", ".join(unknown))


SOLVER_MAP = {
    "solver.lam": ("lam", float),
    "solver.max_rank": ("max_rank", int),
    "solver.max_outer_iters": ("max_outer_iters", int),
    "solver.rank_drop_window": ("rank_drop_window", int),
    "solver.tol_beta": ("tol_beta", float),
    "solver.tol_factor": ("tol_factor", float),
    "solver.rel_weight": ("rel_weight", float),
    "solver.q1_inf": ("q1_inf", float),
    "solver.refresh_period": ("refresh_period", int),
    "solver.seed": ("seed", int),
}

SELECTION_MAP = {
    "selection.lambda_max": ("lambda_max", float),
    "selection.decay": ("decay", float),
    "selection.max_steps": ("max_steps", int),
    "selection.steps_past_best": ("steps_past_best", int),
    "selection.L_grid": ("L_grid", _conv_int_list),
    "selection.R_max": ("R_max", int),
}

SIM_MAP = {
    "sim.n_spots_mean": ("n_spots_mean", float),
    "sim.section_um": ("section_um", float),
    "sim.n_groups": ("n_groups", int),
    "sim.n_times": ("n_times", int),
    "sim.p": ("p", int),
    "sim.n_active": ("n_active", int),
    "sim.true_rank": ("true_rank", int),
    "sim.n_plaques": ("n_plaques", int),
    "sim.sigma2_e": ("sigma2_e", float),
    "sim.phi": ("phi", float),
    "sim.seed": ("seed", int),
    "sim.frac_group_genes": ("frac_group_genes", float),
    "sim.base_log_sd": ("base_log_sd", float),
    "sim.group_shift_sd": ("group_shift_sd", float),
    "sim.iid_log_sd": ("iid_log_sd", float),
    "sim.spatial_corr_sd": ("spatial_corr_sd", float),
    "sim.spatial_corr_length_um": ("spatial_corr_length_um", float),
    "sim.n_cos_features": ("n_cos_features", int),
    "sim.jitter_frac": ("jitter_frac", float),
}

LASSO_MAP = {
    "lasso.folds": ("folds", int),
    "lasso.stratified": ("stratified", _conv_bool),
    "lasso.n_alphas": ("n_alphas", int),
    "lasso.max_iter": ("max_iter", int),
}


def build_selection_config(cfg):
    preset = cfg.get("selection.preset", str, "real")
    if preset == "real":
        sel = SelectionConfig()
    elif preset == "simulation":
        sel = SelectionConfig.simulation_default()
    else:
        raise DataError("selection.preset must be 'real' or 'simulation'")
    cfg.apply(sel, SELECTION_MAP)
    sel.solver = SolverConfig()
    cfg.apply(sel.solver, SOLVER_MAP)
    sel.validate()
    return sel


def build_sim_config(cfg):
    sim = SimConfig()
    cfg.apply(sim, SIM_MAP)
    sim.validate()
    replicates = cfg.get("sim.replicates", int, 1)
    m_grid = cfg.get("sim.M_grid", _conv_int_list, (sim.n_plaques,))
    s_grid = cfg.get("sim.sigma2_grid", _conv_float_list, (sim.sigma2_e,))
    if replicates < 1:
        raise DataError("sim.replicates must be >= 1")
    return sim, replicates, m_grid, s_grid


def build_lasso_config(cfg):
    lc = PairedLassoConfig()
    cfg.apply(lc, LASSO_MAP)
    lc.validate()
    return lc


def _dataset_kwargs(cfg):
    return {
        "zscore": cfg.get("data.zscore", _conv_bool, False),
        "expression_format": cfg.get("data.expression_format", str, "wide"),
    }


# ------------------------------------------------------------- artifacts

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_map(root, paths):
    return {str(Path(p).relative_to(root)) if Path(p).is_relative_to(root)
            else str(p): _sha256(p) for p in sorted(str(x) for x in paths)}


def write_manifest(out_dir, command, args_dict, config_raw, inputs,
                   outputs, wall_seconds):
    manifest = {
        "command": command,
        "args": args_dict,
        "config": config_raw,
        "version": __version__,
        "inputs": _digest_map(Path(out_dir), inputs),
        "outputs": _digest_map(Path(out_dir), outputs),
        "wall_seconds": wall_seconds,
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _input_files(data_dir):
    return [Path(data_dir) / name for name in
            ("cells.csv", "expression.csv", "plaques.csv", "samples.csv")
            if (Path(data_dir) / name).exists()]


# -------------------------------------------------------------- commands

def cmd_fit(args):
    t0 = time.monotonic()
    raw = parse_config(args.config) if args.config else {}
    cfg = ConfigMap(raw)
    ds_kwargs = _dataset_kwargs(cfg)
    sel = build_selection_config(cfg)
    cfg.reject_unknown()
    dataset = load_dataset_dir(args.data_dir, **ds_kwargs)
    result = run_full(dataset, sel, jobs=args.jobs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []

    model_path = out / "model.json"
    text = model_to_json(
        result.model, dataset.gene_ids, dataset.cell_type_labels,
        dataset.time_values, sel.solver.seed,
        extra={"selected_lambda": float(result.selected_lambda),
               "selected_L": int(result.selected_L),
               "weighted_loss": float(result.fit.weighted_loss),
               "n_positive": int(result.fit.n_positive),
               "backend": result.fit.backend})
    model_path.write_text(text + "\n", encoding="utf-8")
    outputs.append(model_path)

    report_path = out / "path_report.csv"
    rows = []
    for rec in result.records:
        flag = 2 if rec.selected else (1 if rec.selected_lambda else 0)
        rows.append((rec.L, rec.lam, rec.fit.rank, rec.nu, rec.n_star,
                     rec.bic, rec.normalized_loss, flag))
    _write_csv(report_path,
               ("L", "lambda", "rank", "nu", "Nstar", "bic",
                "normalized_loss", "selected_flag"), rows)
    outputs.append(report_path)

    summary = component_table(result.model, top_k=5,
                              gene_ids=dataset.gene_ids,
                              cell_type_labels=dataset.cell_type_labels,
                              time_values=dataset.time_values)
    comp_path = out / "component_summary.csv"
    crows = []
    for comp in summary.components:
        for mode, key in (("gene", "top_genes"),
                          ("cell_type", "top_cell_types"),
                          ("time", "top_times")):
            for order, entry in enumerate(comp[key]):
                crows.append((comp["component"], comp["weight"],
                              comp["net_direction"], mode, order,
                              entry["index"], entry["label"],
                              entry["loading"]))
    _write_csv(comp_path,
               ("component", "weight", "net_direction", "mode", "order",
                "index", "label", "loading"), crows)
    outputs.append(comp_path)

    strength_path = out / "slice_strength.csv"
    srows = []
    for c, label in enumerate(dataset.cell_type_labels):
        for t, tv in enumerate(dataset.time_values):
            srows.append((label, tv, float(summary.strength[c, t]),
                          float(summary.mean_effect[c, t])))
    _write_csv(strength_path,
               ("cell_type", "time", "strength_A", "mean_effect"), srows)
    outputs.append(strength_path)

    trace_path = out / "objective_trace.csv"
    _write_csv(trace_path,
               ("outer_iter", "rank", "objective", "max_beta_change",
                "max_factor_change"), result.fit.trace)
    outputs.append(trace_path)

    manifest = write_manifest(
        out, "fit",
        {"data_dir": str(args.data_dir), "out": str(out),
         "jobs": args.jobs},
        raw, _input_files(args.data_dir) + (
            [Path(args.config)] if args.config else []),
        outputs, time.monotonic() - t0)
    logger.info("fit complete: L=%d lambda=%g rank=%d -> %s",
                result.selected_L, result.selected_lambda,
                result.model.rank, manifest.parent)
    return 0


def _simulate_job(payload):
    sim_cfg_dict, rel_dir, out_dir = payload
    cfg = SimConfig(**sim_cfg_dict)
    truth = generate_replicate(cfg)
    target = Path(out_dir) / rel_dir
    target.mkdir(parents=True, exist_ok=True)
    from .data import write_dataset
    written = write_dataset(truth.dataset, target)
    tpath = target / "truth.json"
    write_truth(truth, tpath)
    return [str(p) for p in written] + [str(tpath)]


def cmd_simulate(args):
    t0 = time.monotonic()
    raw = parse_config(args.config) if args.config else {}
    cfg = ConfigMap(raw)
    sim, replicates, m_grid, s_grid = build_sim_config(cfg)
    cfg.reject_unknown()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs_list = []
    for M in m_grid:
        for s2 in s_grid:
            for rep in range(replicates):
                cfg_r = dataclasses.replace(sim, n_plaques=M, sigma2_e=s2,
                                            seed=sim.seed + rep)
                rel = Path("M%d_s%g" % (M, s2)) / ("rep%02d" % rep)
                jobs_list.append((dataclasses.asdict(cfg_r), str(rel),
                                  str(out)))

    outputs = []
    if args.jobs and args.jobs > 1 and len(jobs_list) > 1:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=min(args.jobs, len(jobs_list))) as pool:
            for written in pool.map(_simulate_job, jobs_list):
                outputs.extend(written)
    else:
        for payload in jobs_list:
            outputs.extend(_simulate_job(payload))

    write_manifest(
        out, "simulate",
        {"out": str(out), "jobs": args.jobs,
         "replicates": replicates, "M_grid": list(m_grid),
         "sigma2_grid": list(s_grid)},
        raw, [Path(args.config)] if args.config else [],
        outputs, time.monotonic() - t0)
    logger.info("simulate complete: %d dataset directories under %s",
                len(jobs_list), out)
    return 0


def _load_truth_beta(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise DataError("cannot read truth file %s: %s" % (path, exc))
    except json.JSONDecodeError as exc:
        raise DataError("truth file %s is not valid JSON: %s" % (path, exc))
    if "true_beta" not in payload:
        raise DataError("truth file %s lacks a true_beta entry" % path)
    return np.asarray(payload["true_beta"], dtype=np.float64)


def _estimate_for(model_arg, truth_path, data_dir, lasso_cfg, ds_kwargs):
    if model_arg == "paired-lasso":
        directory = data_dir if data_dir else Path(truth_path).parent
        dataset = load_dataset_dir(directory, **ds_kwargs)
        return paired_lasso(dataset, lasso_cfg), "paired-lasso"
    try:
        text = Path(model_arg).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError("cannot read model file %s: %s" % (model_arg, exc))
    model, _ = model_from_json(text)
    return model.to_dense(), "proposed"


def cmd_evaluate(args):
    t0 = time.monotonic()
    raw = parse_config(args.config) if args.config else {}
    cfg = ConfigMap(raw)
    lasso_cfg = build_lasso_config(cfg)
    ds_kwargs = _dataset_kwargs(cfg)
    cfg.reject_unknown()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    inputs = []

    if args.batch:
        if args.model not in (None, "both", "proposed", "paired-lasso"):
            raise DataError("in batch mode the model argument must be "
                            "'proposed', 'paired-lasso', or 'both'")
        rows = _evaluate_batch(Path(args.batch), args.model, lasso_cfg,
                               ds_kwargs)
        table_path = out / "table1.csv"
        _write_csv(table_path,
                   ("M", "sigma2", "method", "mse_mean", "auc_mean"), rows)
        outputs.append(table_path)
    else:
        if args.model is None:
            raise DataError("a model.json path or 'paired-lasso' is "
                            "required outside batch mode")
        if not args.truth:
            raise DataError("--truth is required outside batch mode")
        truth = _load_truth_beta(args.truth)
        inputs.append(Path(args.truth))
        estimate, method = _estimate_for(args.model, args.truth, args.data,
                                         lasso_cfg, ds_kwargs)
        if args.model != "paired-lasso":
            inputs.append(Path(args.model))
        report = evaluate_estimate(estimate, truth, method)
        metrics_path = out / "metrics.json"
        with open(metrics_path, "w", encoding="utf-8") as fh:
            json.dump({"method": report.method, "mse": report.mse,
                       "auc": report.auc,
                       "n_roc_points": len(report.roc_points)},
                      fh, indent=1, sort_keys=True)
            fh.write("\n")
        outputs.append(metrics_path)
        roc_path = out / "roc_points.csv"
        _write_csv(roc_path, ("fpr", "tpr"),
                   [(x, y) for x, y in report.roc_points])
        outputs.append(roc_path)

    write_manifest(
        out, "evaluate",
        {"model": args.model, "truth": args.truth, "data": args.data,
         "batch": args.batch, "out": str(out)},
        raw, inputs, outputs, time.monotonic() - t0)
    return 0


def _evaluate_batch(root, model_arg, lasso_cfg, ds_kwargs):
    """Aggregate replicate grids under root into Table-1-shaped rows."""
    methods = ("proposed", "paired-lasso") if model_arg in (None, "both") \
        else (("paired-lasso",) if model_arg == "paired-lasso"
              else ("proposed",))
    cells = {}
    rep_dirs = sorted(p for p in root.glob("M*_s*/rep*") if p.is_dir())
    if not rep_dirs:
        raise DataError("no replicate directories (M*_s*/rep*) under %s"
                        % root)
    for rep_dir in rep_dirs:
        name = rep_dir.parent.name
        try:
            m_txt, s_txt = name[1:].split("_s")
            M, s2 = int(m_txt), float(s_txt)
        except ValueError:
            raise DataError("cannot parse grid cell name %r" % name)
        truth = _load_truth_beta(rep_dir / "truth.json")
        for method in methods:
            if method == "proposed":
                model_path = rep_dir / "model.json"
                if not model_path.exists():
                    raise DataError(
                        "no model.json in %s: run the fit command into "
                        "each replicate directory first" % rep_dir)
                model, _ = model_from_json(
                    model_path.read_text(encoding="utf-8"))
                estimate = model.to_dense()
            else:
                dataset = load_dataset_dir(rep_dir, **ds_kwargs)
                estimate = paired_lasso(dataset, lasso_cfg)
            report = evaluate_estimate(estimate, truth, method)
            cells.setdefault((M, s2, method), []).append(
                (report.mse, report.auc))
    rows = []
    for (M, s2, method) in sorted(cells):
        vals = np.asarray(cells[(M, s2, method)])
        rows.append((M, s2, method, float(vals[:, 0].mean()),
                     float(vals[:, 1].mean())))
    return rows


def cmd_bandwidth_scan(args):
    t0 = time.monotonic()
    raw = parse_config(args.config) if args.config else {}
    cfg = ConfigMap(raw)
    ds_kwargs = _dataset_kwargs(cfg)
    sel = build_selection_config(cfg)
    cfg.reject_unknown()
    dataset = load_dataset_dir(args.data_dir, **ds_kwargs)
    result = run_full(dataset, sel, jobs=args.jobs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curve_path = out / "elbow_curve.csv"
    header = ["L"] + ["H_%s" % s.sample_id for s in dataset.samples] \
        + ["normalized_loss", "selected_flag"]
    rows = []
    for L, loss in result.elbow_points:
        hs = result.bandwidths.column(L)
        rows.append([L] + ["%.2f" % h for h in hs]
                    + [loss, 1 if L == result.selected_L else 0])
    _write_csv(curve_path, header, rows)

    write_manifest(
        out, "bandwidth-scan",
        {"data_dir": str(args.data_dir), "out": str(out),
         "jobs": args.jobs},
        raw, _input_files(args.data_dir) + (
            [Path(args.config)] if args.config else []),
        [curve_path], time.monotonic() - t0)
    logger.info("bandwidth scan complete: selected L=%d", result.selected_L)
    return 0


# ------------------------------------------------------------------ main

def build_parser():
    parser = argparse.ArgumentParser(
        prog="cpkern",
        description="Sparse CP tensor regression for spatially "
                    "misaligned data.")
    parser.add_argument("--version", action="version",
                        version="cpkern %s" % __version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="full pipeline: weights, penalty "
                                   "paths, selection, final model")
    p.add_argument("data_dir", help="directory with cells.csv, "
                                    "expression.csv, plaques.csv, "
                                    "samples.csv")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=os.cpu_count(),
                   help="parallel (lambda, L) jobs")

    p = sub.add_parser("simulate", help="generate synthetic replicate "
                                        "datasets")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=os.cpu_count())

    p = sub.add_parser("evaluate", help="score an estimate against a "
                                        "stored truth")
    p.add_argument("model", nargs="?", default=None,
                   help="model.json path, 'paired-lasso', or (with "
                        "--batch) 'proposed'/'paired-lasso'/'both'")
    p.add_argument("--truth", help="truth.json path")
    p.add_argument("--data", help="dataset directory for paired-lasso "
                                  "(default: the truth file's directory)")
    p.add_argument("--batch", help="replicate grid root; aggregates into "
                                   "table1.csv")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bandwidth-scan", help="emit the elbow curve over "
                                              "the L grid")
    p.add_argument("data_dir")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=os.cpu_count())
    return parser


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"fit": cmd_fit, "simulate": cmd_simulate,
                "evaluate": cmd_evaluate,
                "bandwidth-scan": cmd_bandwidth_scan}
    try:
        return handlers[args.command](args)
    except DataError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except NumericalError as exc:
        print("numerical error: %s" % exc, file=sys.stderr)
        return 3
    except CpkernError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
