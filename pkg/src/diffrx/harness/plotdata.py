"""Normalize sweep CSVs into plot-ready long format: series,x,y,err,y_db.

Recognizes the NMSE-vs-steps sweep, the BER-vs-SNR sweep, the baseline
table, and its own output (making the transform idempotent). NMSE-valued
rows get a dB-converted y_db column; BER rows leave it empty.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

from ..errors import DataFormatError

LONG_HEADER = ["series", "x", "y", "err", "y_db"]

_SCHEMAS = {
    ("density", "steps", "pipeline", "nmse_mean", "nmse_std", "n_grids", "seed"):
        ("nmse", "pipeline+density", "steps", "nmse_mean", "nmse_std"),
    ("estimator", "snr_db", "density", "ber", "nmse_mean", "n_bits", "seed"):
        ("ber", "estimator+density", "snr_db", "ber", None),
    ("estimator", "density", "snr_db", "nmse_mean", "nmse_std", "n_grids", "seed"):
        ("nmse", "estimator+density", "snr_db", "nmse_mean", "nmse_std"),
}


def _to_float(value: str, line_no: int, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataFormatError(
            f"line {line_no}: column '{column}' is not numeric: {value!r}") from None


def transform_rows(header: list[str], rows: list[list[str]],
                   start_line: int = 2) -> list[list[str]]:
    if header == LONG_HEADER:
        return rows
    schema = _SCHEMAS.get(tuple(header))
    if schema is None:
        raise DataFormatError(
            f"line 1: unrecognized sweep header {header!r}")
    kind, series_rule, x_col, y_col, err_col = schema
    idx = {name: header.index(name) for name in header}
    out = []
    for offset, row in enumerate(rows):
        line_no = start_line + offset
        if len(row) != len(header):
            raise DataFormatError(
                f"line {line_no}: expected {len(header)} fields, got {len(row)}")
        first, second = series_rule.split("+")
        series = f"{row[idx[first]]}@{row[idx[second]]}"
        x = row[idx[x_col]]
        y = row[idx[y_col]]
        err = row[idx[err_col]] if err_col is not None else ""
        if y == "":
            out.append([series, x, "", err, ""])  # absent sweep cell
            continue
        y_val = _to_float(y, line_no, y_col)
        _to_float(x, line_no, x_col)
        y_db = ""
        if kind == "nmse" and y_val > 0:
            y_db = repr(10.0 * math.log10(y_val))
        out.append([series, x, y, err, y_db])
    return out


def run_plotdata(in_path, out_path) -> Path:
    in_path, out_path = Path(in_path), Path(out_path)
    try:
        with open(in_path, newline="") as fh:
            reader = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataFormatError(f"input CSV not found: {in_path}") from None
    rows = transform_rows(reader[0], reader[1:]) if reader else []
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LONG_HEADER)
        writer.writerows(rows)
    return out_path
