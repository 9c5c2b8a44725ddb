"""Readers for the two metrics CSV schemas.

Run metrics files carry the exact header
`round,client_id,split,loss,accuracy,method,seed`; compare summaries
carry `method,L,W,n_seeds,final_accuracy_mean,final_accuracy_std`.
Lines starting with `#` are metadata and are skipped. Files are opened
read-only and never touched otherwise.
"""

import csv

from .errors import DataError, SchemaError

RUN_HEADER = ["round", "client_id", "split", "loss", "accuracy", "method", "seed"]


def _data_lines(path: str) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh)
                if row and not row[0].lstrip().startswith("#")]
    if not rows:
        raise DataError(f"{path}: no rows")
    return rows


def read_run_csv(path: str) -> list[dict]:
    """Rows of one experiment run; refuses files with a different header."""
    rows = _data_lines(path)
    if rows[0] != RUN_HEADER:
        raise SchemaError(f"{path}: header {rows[0]} != {RUN_HEADER}")
    if len(rows) == 1:
        raise DataError(f"{path}: header only, no data rows")
    out = []
    for row in rows[1:]:
        out.append({
            "round": int(row[0]),
            "client_id": int(row[1]),
            "split": row[2],
            "loss": float(row[3]),
            "accuracy": float(row[4]),
            "method": row[5],
            "seed": int(row[6]),
        })
    return out


def read_compare_csv(path: str, x_field: str) -> list[dict]:
    """Rows of a compare summary; `x_field` names the sweep column (L or W)."""
    rows = _data_lines(path)
    header = rows[0]
    required = {"method", "final_accuracy_mean", "final_accuracy_std", x_field}
    missing = required - set(header)
    if missing:
        raise SchemaError(f"{path}: missing columns {sorted(missing)} in {header}")
    if len(rows) == 1:
        raise DataError(f"{path}: header only, no data rows")
    idx = {name: header.index(name) for name in header}
    out = []
    for row in rows[1:]:
        out.append({
            "method": row[idx["method"]],
            "x": float(row[idx[x_field]]),
            "mean": float(row[idx["final_accuracy_mean"]]),
            "std": float(row[idx["final_accuracy_std"]]),
        })
    return out
