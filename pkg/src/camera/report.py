"""Tidy CSV / JSON artifacts for runs, aggregates, histograms and contour grids."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from camera.runner import Aggregate, RunConfig, RunRecord

TAIL_COLUMNS = ("s", "y", "cost", "cum_cost", "acq", "p_hat", "err")
AGGREGATE_COLUMNS = ("cost", "mean_err", "median_err", "std_err", "n")
HISTOGRAM_COLUMNS = ("label", "rep", "bin_lo", "bin_hi", "count")
CONTOUR_COLUMNS = ("x1", "x2", "mu", "sigma")


def record_columns(dim):
    return ["iter", *[f"x{i}" for i in range(dim)], *TAIL_COLUMNS]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


def artifact_stem(record: RunRecord, rep: int):
    return f"{record.problem}_{record.config.mode}_rep{rep}"


def write_record(record: RunRecord, out_dir, rep: int):
    """Write ``{problem}_{mode}_rep{r}.csv`` and ``.json``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = artifact_stem(record, rep)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(record_columns(record.dim))
        for row in record.rows:
            w.writerow([row["iter"], *(_fmt(v) for v in row["x"]), *(_fmt(row[c]) for c in TAIL_COLUMNS)])
    json_path.write_text(json.dumps(record.summary(), indent=2, default=_json_default))
    return csv_path, json_path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def read_record_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def config_from_artifact(json_path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(json_path).read_text())["config"])


def write_aggregate(agg: Aggregate, path, key=None):
    """Error-vs-cost curve; with ``key=(name, value)`` a leading key column is added."""
    rows = [(key, agg)] if key is not None else [(None, agg)]
    return write_aggregates(rows, path, None if key is None else key[0])


def write_aggregates(keyed, path, key_name=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(([key_name] if key_name else []) + list(AGGREGATE_COLUMNS))
        for key, agg in keyed:
            for r in agg.rows():
                lead = [_fmt(key[1])] if key_name else []
                w.writerow(lead + [_fmt(r[c]) for c in AGGREGATE_COLUMNS])
    return path


def write_histograms(labelled_records, path):
    """Fidelity histograms of acquired points, one block per (label, rep)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTOGRAM_COLUMNS)
        for label, rep, rec in labelled_records:
            h = rec.histogram
            if "edges" in h:
                bins = zip(h["edges"][:-1], h["edges"][1:], h["counts"])
            else:
                bins = ((f, f, c) for f, c in zip(h["fidelities"], h["counts"]))
            for lo, hi, c in bins:
                w.writerow([label, rep, _fmt(float(lo)), _fmt(float(hi)), c])
    return path


def contour_grid(model, n=200):
    """Posterior mean and sd at s = 1 on an ``n x n`` lattice over a 2-d domain."""
    dom = model.domain
    if dom.dim != 2:
        raise ValueError("contour export needs a 2-d design space")
    g1 = np.linspace(dom.lower[0], dom.upper[0], n)
    g2 = np.linspace(dom.lower[1], dom.upper[1], n)
    A, B = np.meshgrid(g1, g2, indexing="xy")
    X = np.column_stack([A.ravel(), B.ravel()])
    mu, var = model.predict(X, 1.0)
    return X, mu, np.sqrt(var)


def write_contour(model, path, n=200):
    X, mu, sd = contour_grid(model, n)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONTOUR_COLUMNS)
        for (a, b), m, s in zip(X, mu, sd):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(m)), repr(float(s))])
    return path
