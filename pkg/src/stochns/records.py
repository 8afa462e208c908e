"""Line-delimited result records and comma-separated plot tables.

One JSON object per line, UTF-8, append-only.  A reader skips malformed
lines with a warning so a run killed mid-write leaves the earlier records
usable.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Iterable

from pydantic import BaseModel, ConfigDict, Field, ValidationError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# observable -> name of the value column in exported tables
VALUE_COLUMN = {"tail_probability": "p_hat", "ball_probability": "p_hat"}
# observable -> parameter columns that always appear, in order
PARAM_COLUMNS = {"tail_probability": ("R",), "ball_probability": ("delta",)}


class ResultLine(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    config_hash: str
    observable: str
    estimate: float
    std_error: float = Field(ge=0)
    n_samples: int = Field(ge=0)
    wall_ms: float = Field(ge=0)
    params: dict[str, float] = {}

    def to_line(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, ensure_ascii=False) + "\n"


def append_records(path: str | Path, records: Iterable[ResultLine]) -> int:
    """Append records and flush; returns how many were written."""
    n = 0
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_line())
            n += 1
        fh.flush()
    return n


def read_records(path: str | Path) -> list[ResultLine]:
    """Parse every well-formed line; malformed lines are skipped with a warning."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    out = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(ResultLine.model_validate_json(line))
        except ValidationError as exc:
            where = "truncated final line" if i == len(lines) - 1 else f"malformed line {i + 1}"
            log.warning("%s: skipping %s (%s)", path, where, exc.errors()[0]["msg"])
    return out


def merge_records(inputs: Iterable[str | Path], out: str | Path) -> int:
    """Concatenate shard files into ``out`` (created or appended), dropping bad lines."""
    total = 0
    for p in inputs:
        total += append_records(out, read_records(p))
    return total


def _columns(observable: str, records: list[ResultLine]) -> list[str]:
    fixed = PARAM_COLUMNS.get(observable, ())
    extra = sorted({k for r in records for k in r.params} - {"epsilon"} - set(fixed))
    return ["epsilon", *fixed, *extra, VALUE_COLUMN.get(observable, "estimate"), "err"]


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def export_plot_data(records_path: str | Path, observable: str, out: str | Path) -> int:
    """Write a CSV table of one observable; returns the number of rows.

    Columns are ``epsilon``, the observable's parameter columns, the value
    column (``p_hat`` for probabilities, ``estimate`` otherwise) and ``err``
    (the standard error).  Floats are written with ``repr`` so that
    :func:`import_plot_data` recovers them exactly.  An empty records file
    gives a header-only table; a non-empty file without the observable
    raises ``KeyError`` naming the observables that are present.
    """
    records = read_records(records_path) if Path(records_path).exists() else []
    rows = [r for r in records if r.observable == observable]
    if records and not rows:
        available = sorted({r.observable for r in records})
        raise KeyError(f"observable {observable!r} not found; available: {', '.join(available)}")
    cols = _columns(observable, rows)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            vals = {**r.params, cols[-2]: r.estimate, "err": r.std_error}
            w.writerow([_fmt(vals.get(c, float("nan"))) for c in cols])
    return len(rows)


def import_plot_data(path: str | Path) -> list[dict[str, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (float(v) if v != "" else math.nan) for k, v in row.items()} for row in reader]
