"""Data model for spatially misaligned outcome/expression studies.

A dataset holds n tissue samples. Sample i carries M_i outcome locations
("plaques": 2-D coordinates plus a scalar outcome) and N_i reference cells
(coordinates, a categorical cell type, and a p-vector of expression values).
Cell types are coded 0..C-1 in lexicographic label order and sample time
values are coded 0..T-1 in ascending order; every estimator in this package
works on those integer codes.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .errors import DataError

logger = logging.getLogger(__name__)

SAMPLES_FILE = "samples.csv"
PLAQUES_FILE = "plaques.csv"
CELLS_FILE = "cells.csv"
EXPRESSION_FILE = "expression.csv"


@dataclass
class Sample:
    """One tissue sample with aligned plaque and cell arrays."""

    sample_id: str
    time_index: int
    time_value: float
    plaque_ids: list
    plaque_xy: np.ndarray       # (M, 2) float64, micrometres
    plaque_size: np.ndarray     # (M,) float64, the regression outcome
    cell_ids: list
    cell_xy: np.ndarray         # (N, 2) float64
    cell_type: np.ndarray       # (N,) int64 codes into Dataset.cell_type_labels
    expression: np.ndarray      # (N, p) float64

    @property
    def n_plaques(self):
        return len(self.plaque_ids)

    @property
    def n_cells(self):
        return len(self.cell_ids)


@dataclass
class Dataset:
    """Validated collection of samples with shared gene and type codebooks."""

    samples: list
    gene_ids: list
    cell_type_labels: list
    time_values: list           # ascending distinct raw time values

    @property
    def n_samples(self):
        return len(self.samples)

    @property
    def n_genes(self):
        return len(self.gene_ids)

    @property
    def n_cell_types(self):
        return len(self.cell_type_labels)

    @property
    def n_times(self):
        return len(self.time_values)

    def validate(self):
        """Check internal consistency; raises DataError on violation."""
        if not self.samples:
            raise DataError("dataset has no samples")
        if list(self.time_values) != sorted(set(self.time_values)):
            raise DataError("time_values must be distinct and ascending")
        p = self.n_genes
        for s in self.samples:
            if s.n_plaques < 1 or s.n_cells < 1:
                raise DataError(
                    f"sample {s.sample_id!r} needs at least one plaque and one cell")
            if s.plaque_xy.shape != (s.n_plaques, 2):
                raise DataError(f"sample {s.sample_id!r}: plaque_xy shape mismatch")
            if s.expression.shape != (s.n_cells, p):
                raise DataError(
                    f"sample {s.sample_id!r}: expression has {s.expression.shape[1]} "
                    f"columns, expected {p}")
            if not (0 <= s.time_index < self.n_times):
                raise DataError(f"sample {s.sample_id!r}: time_index out of range")
            if s.time_value != self.time_values[s.time_index]:
                raise DataError(f"sample {s.sample_id!r}: time_value/index mismatch")
            for name, arr in (("plaque_xy", s.plaque_xy),
                              ("plaque_size", s.plaque_size),
                              ("cell_xy", s.cell_xy),
                              ("expression", s.expression)):
                if not np.all(np.isfinite(arr)):
                    raise DataError(f"sample {s.sample_id!r}: non-finite {name}")
            if s.cell_type.min() < 0 or s.cell_type.max() >= self.n_cell_types:
                raise DataError(f"sample {s.sample_id!r}: cell type code out of range")
        return self


@dataclass
class GenePanel:
    """Ordered subset of genes with per-gene provenance."""

    indices: np.ndarray         # positions into the source Dataset.gene_ids
    gene_ids: list
    provenance: list = field(default_factory=list)  # "detection" | "forced"


def _require_columns(df, required, path):
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")


def _numeric_column(df, col, path):
    vals = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        # +2: header line plus 1-based numbering
        raise DataError(f"{path}: column {col!r} row {bad[0] + 2}: "
                        f"value {df[col].iloc[bad[0]]!r} is not a finite number")
    # reparse with numpy: pandas' fast parser is not correctly rounded,
    # numpy's is, and writers emit repr-exact floats
    return df[col].to_numpy(dtype=np.float64)


def _read_csv(path):
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise DataError(f"{path}: file not found")
    except Exception as exc:
        raise DataError(f"{path}: cannot parse CSV ({exc})")


def load_dataset(cells_path, expression_path, plaques_path, samples_path,
                 expression_format="wide", zscore=False):
    """Load and validate a dataset from four CSV files.

    Parameters
    ----------
    cells_path, expression_path, plaques_path, samples_path : str or Path
        samples: (sample_id, time_value); plaques: (sample_id, plaque_id,
        x_um, y_um, size); cells: (sample_id, cell_id, x_um, y_um,
        cell_type); expression: see expression_format.
    expression_format : {"wide", "long"}
        "wide": expression has a cell_id column plus one column per gene,
        in panel order. "long": columns (cell_id, gene, value) with every
        pair present exactly once; genes are ordered lexicographically.
    zscore : bool
        If True, z-score each gene across all cells pooled over samples
        (zero-variance genes become all-zero columns). Off by default:
        expression is assumed pre-normalized.

    Returns
    -------
    Dataset
        Cell types coded lexicographically, times coded ascending.

    Raises
    ------
    DataError
        Naming the offending file, column, and row where possible.
    """
    spath, ppath, cpath, epath = (str(samples_path), str(plaques_path),
                                  str(cells_path), str(expression_path))

    sdf = _read_csv(spath)
    _require_columns(sdf, ["sample_id", "time_value"], spath)
    if sdf.empty:
        raise DataError(f"{spath}: no samples")
    if sdf["sample_id"].duplicated().any():
        dup = sdf["sample_id"][sdf["sample_id"].duplicated()].iloc[0]
        raise DataError(f"{spath}: duplicate sample_id {dup!r}")
    if (sdf["sample_id"] == "").any():
        raise DataError(f"{spath}: empty sample_id")
    tvals = _numeric_column(sdf, "time_value", spath)
    sample_ids = list(sdf["sample_id"])
    time_values = sorted(set(float(v) for v in tvals))
    time_index = {sid: time_values.index(float(v))
                  for sid, v in zip(sample_ids, tvals)}
    time_value = {sid: float(v) for sid, v in zip(sample_ids, tvals)}

    pdf = _read_csv(ppath)
    _require_columns(pdf, ["sample_id", "plaque_id", "x_um", "y_um", "size"], ppath)
    for col in ("x_um", "y_um", "size"):
        pdf[col + "__num"] = _numeric_column(pdf, col, ppath)
    unknown = ~pdf["sample_id"].isin(sample_ids)
    if unknown.any():
        row = int(np.flatnonzero(unknown.to_numpy())[0])
        raise DataError(f"{ppath}: row {row + 2}: unknown sample_id "
                        f"{pdf['sample_id'].iloc[row]!r}")
    if pdf.duplicated(subset=["sample_id", "plaque_id"]).any():
        row = int(np.flatnonzero(
            pdf.duplicated(subset=["sample_id", "plaque_id"]).to_numpy())[0])
        raise DataError(f"{ppath}: row {row + 2}: duplicate plaque_id "
                        f"{pdf['plaque_id'].iloc[row]!r} within sample")

    cdf = _read_csv(cpath)
    _require_columns(cdf, ["sample_id", "cell_id", "x_um", "y_um", "cell_type"], cpath)
    for col in ("x_um", "y_um"):
        cdf[col + "__num"] = _numeric_column(cdf, col, cpath)
    unknown = ~cdf["sample_id"].isin(sample_ids)
    if unknown.any():
        row = int(np.flatnonzero(unknown.to_numpy())[0])
        raise DataError(f"{cpath}: row {row + 2}: unknown sample_id "
                        f"{cdf['sample_id'].iloc[row]!r}")
    if cdf["cell_id"].duplicated().any():
        row = int(np.flatnonzero(cdf["cell_id"].duplicated().to_numpy())[0])
        raise DataError(f"{cpath}: row {row + 2}: duplicate cell_id "
                        f"{cdf['cell_id'].iloc[row]!r} (cell ids must be unique "
                        f"across samples)")
    if (cdf["cell_type"] == "").any():
        row = int(np.flatnonzero((cdf["cell_type"] == "").to_numpy())[0])
        raise DataError(f"{cpath}: row {row + 2}: empty cell_type")
    cell_type_labels = sorted(set(cdf["cell_type"]))
    type_code = {lab: i for i, lab in enumerate(cell_type_labels)}

    gene_ids, expr_by_cell = _load_expression(epath, expression_format)

    known = set(cdf["cell_id"])
    extra = [cid for cid in expr_by_cell.index if cid not in known]
    if extra:
        raise DataError(f"{epath}: cell_id {extra[0]!r} not present in {cpath}")

    samples = []
    for sid in sample_ids:
        crows = cdf[cdf["sample_id"] == sid]
        prows = pdf[pdf["sample_id"] == sid]
        if len(prows) == 0:
            raise DataError(f"{ppath}: sample {sid!r} has no plaques")
        if len(crows) == 0:
            raise DataError(f"{cpath}: sample {sid!r} has no cells")
        cell_ids = list(crows["cell_id"])
        missing = [cid for cid in cell_ids if cid not in expr_by_cell.index]
        if missing:
            raise DataError(f"{epath}: no expression row for cell {missing[0]!r}")
        expr = expr_by_cell.loc[cell_ids].to_numpy(dtype=np.float64)
        samples.append(Sample(
            sample_id=sid,
            time_index=time_index[sid],
            time_value=time_value[sid],
            plaque_ids=list(prows["plaque_id"]),
            plaque_xy=np.column_stack([prows["x_um__num"], prows["y_um__num"]]),
            plaque_size=prows["size__num"].to_numpy(),
            cell_ids=cell_ids,
            cell_xy=np.column_stack([crows["x_um__num"], crows["y_um__num"]]),
            cell_type=crows["cell_type"].map(type_code).to_numpy(dtype=np.int64),
            expression=expr,
        ))

    ds = Dataset(samples=samples, gene_ids=gene_ids,
                 cell_type_labels=cell_type_labels, time_values=time_values)
    if zscore:
        pooled = np.vstack([s.expression for s in ds.samples])
        mean = pooled.mean(axis=0)
        sd = pooled.std(axis=0)
        flat = sd == 0
        if flat.any():
            logger.warning("z-scoring: %d zero-variance gene(s) set to 0",
                           int(flat.sum()))
        sd = np.where(flat, 1.0, sd)
        for s in ds.samples:
            s.expression = np.where(flat, 0.0, (s.expression - mean) / sd)
    return ds.validate()


def load_dataset_dir(directory, expression_format="wide", zscore=False):
    """load_dataset over a directory using the standard file names."""
    d = str(directory)
    return load_dataset(f"{d}/{CELLS_FILE}", f"{d}/{EXPRESSION_FILE}",
                        f"{d}/{PLAQUES_FILE}", f"{d}/{SAMPLES_FILE}",
                        expression_format=expression_format, zscore=zscore)


def _load_expression(epath, expression_format):
    """Return (gene_ids, DataFrame indexed by cell_id with float columns)."""
    if expression_format not in ("wide", "long"):
        raise DataError(f"unknown expression_format {expression_format!r}")
    try:
        edf = pd.read_csv(epath, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise DataError(f"{epath}: file not found")
    except Exception as exc:
        raise DataError(f"{epath}: cannot parse CSV ({exc})")

    if expression_format == "wide":
        if "cell_id" not in edf.columns:
            raise DataError(f"{epath}: missing column(s) cell_id")
        gene_ids = [c for c in edf.columns if c != "cell_id"]
        if not gene_ids:
            raise DataError(f"{epath}: no gene columns")
        if len(set(gene_ids)) != len(gene_ids):
            raise DataError(f"{epath}: duplicate gene column names")
        edf["cell_id"] = edf["cell_id"].astype(str)
        if edf["cell_id"].duplicated().any():
            dup = edf["cell_id"][edf["cell_id"].duplicated()].iloc[0]
            raise DataError(f"{epath}: duplicate expression row for cell {dup!r}")
        coerced = edf[gene_ids].apply(pd.to_numeric, errors="coerce")
        flat = coerced.to_numpy(dtype=np.float64)
        if not np.all(np.isfinite(flat)):
            r, c = np.argwhere(~np.isfinite(flat))[0]
            raise DataError(f"{epath}: column {gene_ids[c]!r} row {r + 2}: "
                            f"value is not a finite number")
        # numpy reparses the validated strings exactly (see _numeric_column)
        mat = pd.DataFrame(edf[gene_ids].to_numpy(dtype=np.float64),
                           columns=gene_ids, index=edf["cell_id"])
        return gene_ids, mat

    _require_columns(edf, ["cell_id", "gene", "value"], epath)
    edf["cell_id"] = edf["cell_id"].astype(str)
    edf["gene"] = edf["gene"].astype(str)
    vals = pd.to_numeric(edf["value"], errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise DataError(f"{epath}: column 'value' row {bad[0] + 2}: "
                        f"value {edf['value'].iloc[bad[0]]!r} is not a finite number")
    if edf.duplicated(subset=["cell_id", "gene"]).any():
        row = int(np.flatnonzero(
            edf.duplicated(subset=["cell_id", "gene"]).to_numpy())[0])
        raise DataError(f"{epath}: row {row + 2}: duplicate (cell_id, gene) pair")
    gene_ids = sorted(set(edf["gene"]))
    mat = edf.pivot(index="cell_id", columns="gene", values="value")[gene_ids]
    if mat.isna().any().any():
        cid = mat.index[mat.isna().any(axis=1)][0]
        gid = mat.columns[mat.loc[cid].isna()][0]
        raise DataError(f"{epath}: missing value for cell {cid!r}, gene {gid!r}")
    mat = mat.astype(np.float64)
    return gene_ids, mat


def nearest_plaque_distance(sample):
    """Distance from each cell to its nearest plaque centre (micrometres)."""
    tree = cKDTree(sample.plaque_xy)
    dist, _ = tree.query(sample.cell_xy, k=1)
    return np.asarray(dist, dtype=np.float64)


def filter_genes(dataset, min_detect_frac=0.2, near_radius_um=150.0,
                 forced_includes=(), mode="all"):
    """Select genes detected near plaques, plus forced inclusions.

    A gene qualifies when its detection fraction (share of cells with a
    nonzero value) exceeds min_detect_frac among cells within
    near_radius_um of the closest plaque, within every non-empty
    (cell type, sample) stratum (mode="all") or within at least one
    stratum (mode="any"). Forced gene ids are appended regardless and
    tagged with provenance "forced". Output order follows the original
    panel order.
    """
    if mode not in ("all", "any"):
        raise DataError(f"unknown filter mode {mode!r}")
    if not 0.0 <= min_detect_frac <= 1.0:
        raise DataError("min_detect_frac must lie in [0, 1]")
    if not near_radius_um > 0:
        raise DataError("near_radius_um must be positive")
    p = dataset.n_genes
    fracs = []  # one row per non-empty stratum
    for s in dataset.samples:
        near = nearest_plaque_distance(s) <= near_radius_um
        for c in range(dataset.n_cell_types):
            sel = near & (s.cell_type == c)
            if not sel.any():
                continue
            fracs.append((s.expression[sel] != 0).mean(axis=0))
    if not fracs:
        raise DataError("no cells within near_radius_um of any plaque")
    fr = np.asarray(fracs)
    if mode == "all":
        keep = np.all(fr > min_detect_frac, axis=0)
    else:
        keep = np.any(fr > min_detect_frac, axis=0)

    index_of = {g: i for i, g in enumerate(dataset.gene_ids)}
    forced_idx = set()
    for g in forced_includes:
        if g not in index_of:
            raise DataError(f"forced include {g!r} is not in the gene panel")
        forced_idx.add(index_of[g])

    indices, provenance = [], []
    for i in range(p):
        if keep[i]:
            indices.append(i)
            provenance.append("forced" if i in forced_idx else "detection")
        elif i in forced_idx:
            indices.append(i)
            provenance.append("forced")
    panel = GenePanel(indices=np.asarray(indices, dtype=np.int64),
                      gene_ids=[dataset.gene_ids[i] for i in indices],
                      provenance=provenance)
    logger.info("gene filter kept %d of %d genes (%d forced)",
                len(indices), p, sum(pr == "forced" for pr in provenance))
    return panel


def subset_to_panel(dataset, panel):
    """New Dataset restricted to the panel's genes (order preserved)."""
    if len(panel.indices) == 0:
        raise DataError("gene panel is empty")
    samples = [Sample(
        sample_id=s.sample_id, time_index=s.time_index, time_value=s.time_value,
        plaque_ids=list(s.plaque_ids), plaque_xy=s.plaque_xy,
        plaque_size=s.plaque_size, cell_ids=list(s.cell_ids), cell_xy=s.cell_xy,
        cell_type=s.cell_type, expression=s.expression[:, panel.indices],
    ) for s in dataset.samples]
    return Dataset(samples=samples, gene_ids=list(panel.gene_ids),
                   cell_type_labels=list(dataset.cell_type_labels),
                   time_values=list(dataset.time_values)).validate()


def write_dataset(dataset, directory, expression_format="wide"):
    """Write the four CSV files; float formatting is repr-exact."""
    import os
    os.makedirs(directory, exist_ok=True)
    directory = str(directory)

    with open(f"{directory}/{SAMPLES_FILE}", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "time_value"])
        for s in dataset.samples:
            w.writerow([s.sample_id, repr(float(s.time_value))])

    with open(f"{directory}/{PLAQUES_FILE}", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "plaque_id", "x_um", "y_um", "size"])
        for s in dataset.samples:
            for j in range(s.n_plaques):
                w.writerow([s.sample_id, s.plaque_ids[j],
                            repr(float(s.plaque_xy[j, 0])),
                            repr(float(s.plaque_xy[j, 1])),
                            repr(float(s.plaque_size[j]))])

    with open(f"{directory}/{CELLS_FILE}", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "cell_id", "x_um", "y_um", "cell_type"])
        for s in dataset.samples:
            for k in range(s.n_cells):
                w.writerow([s.sample_id, s.cell_ids[k],
                            repr(float(s.cell_xy[k, 0])),
                            repr(float(s.cell_xy[k, 1])),
                            dataset.cell_type_labels[s.cell_type[k]]])

    with open(f"{directory}/{EXPRESSION_FILE}", "w", newline="") as fh:
        w = csv.writer(fh)
        if expression_format == "wide":
            w.writerow(["cell_id"] + list(dataset.gene_ids))
            for s in dataset.samples:
                for k in range(s.n_cells):
                    w.writerow([s.cell_ids[k]] +
                               [repr(float(v)) for v in s.expression[k]])
        elif expression_format == "long":
            w.writerow(["cell_id", "gene", "value"])
            for s in dataset.samples:
                for k in range(s.n_cells):
                    for g, v in zip(dataset.gene_ids, s.expression[k]):
                        w.writerow([s.cell_ids[k], g, repr(float(v))])
        else:
            raise DataError(f"unknown expression_format {expression_format!r}")

    return [f"{directory}/{name}" for name in
            (SAMPLES_FILE, PLAQUES_FILE, CELLS_FILE, EXPRESSION_FILE)]
