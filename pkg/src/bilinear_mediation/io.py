"""Dataset files, run configuration and report serialisation.

Datasets are wide CSV: ``id``, optional ``x`` and, for each process ``u``,
columns ``u_t1..u_tJ`` (occasions) followed by ``u_v1..u_vJ`` (values).
Floats are written with 17 significant digits so a write/read round trip is
exact.
"""
from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .model_core import Dataset

PROCESS_ORDER = ("x", "m", "y")
_COLUMN = re.compile(r"^([xmy])_([tv])(\d+)$")


class DataValidationError(ValueError):
    """Raised for malformed input files or configurations."""


def format_float(value) -> str:
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return "%.17g" % value


# --------------------------------------------------------------------------
# datasets


def _process_columns(header):
    found = {}
    for col in header:
        match = _COLUMN.match(col)
        if match:
            label, kind, idx = match.groups()
            found.setdefault(label, {"t": [], "v": []})[kind].append(int(idx))
    out = {}
    for label, cols in found.items():
        j = len(cols["t"])
        if sorted(cols["t"]) != list(range(1, j + 1)) or sorted(cols["v"]) != list(range(1, j + 1)):
            raise DataValidationError(
                f"process {label}: need columns {label}_t1..{label}_tJ and {label}_v1..{label}_vJ")
        out[label] = j
    return out


def _parse_cell(text, row, column):
    if text is None or text.strip() == "":
        raise DataValidationError(f"row {row}: missing value in column {column}")
    try:
        value = float(text)
    except ValueError:
        raise DataValidationError(f"row {row}: column {column} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DataValidationError(f"row {row}: column {column} is not finite")
    return value


def read_dataset(path) -> Dataset:
    """Read a wide CSV panel; errors name the offending row and process."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if "id" not in header:
            raise DataValidationError("missing required column 'id'")
        procs = _process_columns(header)
        if not procs:
            raise DataValidationError("no process columns (u_t1.., u_v1..) found")
        js = set(procs.values())
        if len(js) != 1:
            raise DataValidationError(f"processes have different numbers of occasions: {procs}")
        n_occ = js.pop()
        labels = tuple(p for p in PROCESS_ORDER if p in procs)
        has_x = "x" in header
        ids, xs, times, values = [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if None in row:
                raise DataValidationError(f"row {row_no}: more cells than header columns")
            ids.append(row["id"])
            if has_x:
                xs.append(_parse_cell(row["x"], row_no, "x"))
            t_row, v_row = [], []
            for p in labels:
                t = [_parse_cell(row[f"{p}_t{j}"], row_no, f"{p}_t{j}") for j in range(1, n_occ + 1)]
                v = [_parse_cell(row[f"{p}_v{j}"], row_no, f"{p}_v{j}") for j in range(1, n_occ + 1)]
                if np.any(np.diff(t) <= 0):
                    raise DataValidationError(
                        f"row {row_no} (id {row['id']}), process {p}: occasions are not strictly increasing")
                t_row.append(t)
                v_row.append(v)
            times.append(t_row)
            values.append(v_row)
    if not ids:
        raise DataValidationError("dataset has no rows")
    return Dataset(labels, np.array(times), np.array(values),
                   x=np.array(xs) if has_x else None, ids=tuple(ids))


def write_dataset(dataset: Dataset, path) -> None:
    n_occ = dataset.n_occasions
    header = ["id"] + (["x"] if dataset.x is not None else [])
    for p in dataset.processes:
        header += [f"{p}_t{j}" for j in range(1, n_occ + 1)]
        header += [f"{p}_v{j}" for j in range(1, n_occ + 1)]
    ids = dataset.ids if dataset.ids is not None else [str(i + 1) for i in range(dataset.n)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [ids[i]]
            if dataset.x is not None:
                row.append(format_float(dataset.x[i]))
            for k in range(len(dataset.processes)):
                row += [format_float(v) for v in dataset.times[i, k]]
                row += [format_float(v) for v in dataset.values[i, k]]
            writer.writerow(row)


# --------------------------------------------------------------------------
# configuration


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class OptimizerConfig(_Strict):
    max_starts: int = Field(10, ge=1)
    gtol: float = Field(1e-6, gt=0)
    max_iter: int = Field(3000, ge=1)


class ConditionConfig(_Strict):
    n: int = Field(500, ge=1)
    J: int = Field(10, ge=2)
    knots: list[float] = [4.5, 4.5]
    theta: float = Field(1.0, ge=0)
    residual_corr: float = 0.3
    scenario: Union[Literal["zero", "medium", "substantial"], float] = "medium"
    r2_xy: float = Field(0.13, ge=0, lt=1)
    immediate: float = 0.3
    delayed: float = 0.1
    xm_immediate: float = 0.3
    xm_delayed: float = 0.1
    xy_immediate: float = 0.3
    xy_delayed: float = 0.1
    shape: Literal["deceleration", "acceleration", "plateau"] = "deceleration"
    temporal_order: bool = False
    jitter: float = Field(0.25, ge=0, lt=0.5)
    gf_scale: float = Field(1.0, ge=0)
    max_attempts: Optional[int] = Field(None, ge=1)


class RunConfig(_Strict):
    model: Literal[1, 2] = 1
    seed: int = Field(0, ge=0, lt=2 ** 64)
    data: Optional[str] = None
    out: Optional[str] = None
    univariate: bool = False
    reps: int = Field(200, ge=1)
    optimizer: OptimizerConfig = OptimizerConfig()
    condition: ConditionConfig = ConditionConfig()
    grid: list[ConditionConfig] = []


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a YAML run configuration; unknown keys are errors."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise DataValidationError(f"{path}: top level must be a mapping")
    raw = {**raw, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise DataValidationError(f"invalid configuration: {exc}") from None


# --------------------------------------------------------------------------
# reports


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        # JSON has no non-finite literals
        return format_float(value) if math.isfinite(value) else "null"
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist(), indent, level)
    return json.dumps(str(obj))


def dumps_report(report) -> str:
    """JSON text with every float at 17 significant digits."""
    return _encode(report, 2, 0) + "\n"


def write_report(report, path) -> None:
    Path(path).write_text(dumps_report(report))


def write_table(rows: list, path) -> None:
    """Flat CSV export of a list of homogeneous dicts."""
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([format_float(row[c]) if isinstance(row[c], (float, np.floating))
                             else row[c] for c in cols])
