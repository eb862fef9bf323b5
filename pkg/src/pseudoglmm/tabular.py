"""CSV ingestion and the flat-file outputs of the generator."""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from pseudoglmm.errors import InvalidInputError
from pseudoglmm.moments import BINARY, DUMMY, NUMERIC, RESPONSE, ClusterData, VariableMeta, encode_dummies

log = logging.getLogger(__name__)


class MissingColumnError(InvalidInputError):
    pass


def fmt(x: float) -> str:
    """Machine-file float format: 17 significant digits."""
    return format(float(x), ".17g")


def parse_categorical(specs: Sequence[str]) -> dict[str, list[str]]:
    """Parse ``column=level1,level2,...``; the first level is the reference."""
    out = {}
    for spec in specs or ():
        if "=" not in spec:
            raise InvalidInputError(f"categorical spec {spec!r} must look like column=level1,level2")
        col, levels = spec.split("=", 1)
        levels = [lev.strip() for lev in levels.split(",") if lev.strip()]
        if len(levels) < 2:
            raise InvalidInputError(f"categorical {col!r} needs at least two levels")
        out[col.strip()] = levels
    return out


def load_clusters(path, cluster_col: str, response_col: str, predictors: Sequence[str] | None = None,
                  categorical: Mapping[str, Sequence[str]] | None = None,
                  drop_incomplete: bool = False) -> list[ClusterData]:
    """Read a CSV into clusters, in order of first appearance.

    Categorical columns become dummies named ``column_level``.  Numeric
    columns holding only 0 and 1 are typed binary.
    """
    categorical = dict(categorical or {})
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InvalidInputError(f"{path}: empty file, a header row is required") from None
        for col in (cluster_col, response_col):
            if col not in header:
                raise MissingColumnError(f"{path}: column {col!r} not found in header {header}")
        if predictors is None:
            predictors = [h for h in header if h not in (cluster_col, response_col)]
        for col in list(predictors) + list(categorical):
            if col not in header:
                raise MissingColumnError(f"{path}: column {col!r} not found in header {header}")
        if not predictors:
            raise InvalidInputError(f"{path}: no predictor columns")
        pos = {h: i for i, h in enumerate(header)}
        groups: OrderedDict[str, list] = OrderedDict()
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise InvalidInputError(f"{path}:{line_no}: expected {len(header)} fields, found {len(row)}")
            cells = [c.strip() for c in row]
            needed = [cluster_col, response_col] + list(predictors)
            if any(cells[pos[c]] == "" for c in needed):
                if drop_incomplete:
                    continue
                raise InvalidInputError(f"{path}:{line_no}: missing value (only complete cases are supported)")
            y = cells[pos[response_col]]
            if y not in ("0", "1", "0.0", "1.0"):
                raise InvalidInputError(f"{path}:{line_no}: response {y!r} is not 0/1")
            record = [float(y)]
            for col in predictors:
                value = cells[pos[col]]
                if col in categorical:
                    if value not in categorical[col]:
                        raise InvalidInputError(f"{path}:{line_no}: {col}={value!r} is not among {categorical[col]}")
                    record.append(value)
                else:
                    try:
                        record.append(float(value))
                    except ValueError:
                        raise InvalidInputError(f"{path}:{line_no}: {col}={value!r} is not numeric") from None
                    if not np.isfinite(record[-1]):
                        raise InvalidInputError(f"{path}:{line_no}: {col}={value!r} is not finite")
            groups.setdefault(cells[pos[cluster_col]], []).append(record)

    if not groups:
        raise InvalidInputError(f"{path}: no data rows")
    # variable typing is decided on the pooled data so every cluster shares one signature
    variables = [VariableMeta(response_col, RESPONSE)]
    numeric_kind = {}
    for k, col in enumerate(predictors, start=1):
        if col in categorical:
            continue
        values = np.array([rec[k] for recs in groups.values() for rec in recs])
        numeric_kind[col] = BINARY if np.all((values == 0) | (values == 1)) else NUMERIC
    for col in predictors:
        if col in categorical:
            for level in categorical[col][1:]:
                variables.append(VariableMeta(f"{col}_{level}", DUMMY, level=level, parent=col))
        else:
            variables.append(VariableMeta(col, numeric_kind[col]))

    clusters = []
    for cid, recs in groups.items():
        y = np.array([r[0] for r in recs])
        cols = []
        for k, col in enumerate(predictors, start=1):
            values = [r[k] for r in recs]
            if col in categorical:
                cols.append(encode_dummies(values, categorical[col]))
            else:
                cols.append(np.array(values, dtype=float)[:, None])
        clusters.append(ClusterData(cid, y, np.hstack(cols), tuple(variables)))
    return clusters


def write_pseudo_csv(path, datasets, original_scale: bool = True) -> None:
    """One CSV for all clusters: ``cluster_id``, response, predictors."""
    datasets = list(datasets)
    names = [v.name for v in datasets[0].variables]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id"] + names)
        for d in datasets:
            X = d.original_scale() if original_scale else d.X_pi
            for i in range(d.n):
                w.writerow([d.cluster_id, str(int(d.y_pi[i]))] + [fmt(v) for v in X[i]])


def write_diagnostics_csv(path, diagnostics) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id", "multi_index", "order", "target", "achieved", "abs_difference"])
        for diag in diagnostics:
            for row in diag.rows:
                w.writerow([diag.cluster_id, "-".join(str(e) for e in row.multi_index), row.order,
                            fmt(row.target_value), fmt(row.achieved_value), fmt(row.abs_difference)])


def write_records_csv(path, records: Sequence[Mapping], columns: Sequence[str]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            w.writerow([fmt(rec[c]) if isinstance(rec[c], float) else rec[c] for c in columns])
