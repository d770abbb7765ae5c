"""Per-image report rows and their CSV / JSON emitters."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, fields

from . import errors
from .metrics import MetricReport

__all__ = ["ReportRow", "COLUMNS", "status_for", "emit_report", "format_value"]

# Most specific first: the first matching class names the status.
_STATUS = [
    (errors.FormatError, "error_format"),
    (errors.EmptyInputError, "error_empty_input"),
    (errors.DegenerateInputError, "error_degenerate"),
    (errors.ObjectiveUndefinedError, "error_objective_undefined"),
    (errors.RecoveryFailedError, "error_recovery_failed"),
    (errors.DomainError, "error_domain"),
    (FileNotFoundError, "error_missing_file"),
    (OSError, "error_io"),
]


def status_for(exc: BaseException) -> str:
    """Distinct status string for each failure mode."""
    for kind, status in _STATUS:
        if isinstance(exc, kind):
            return status
    return "error_internal"


@dataclass
class ReportRow:
    image_id: str
    status: str = "ok"
    absrel: float | None = None
    delta1: float | None = None
    whdr: float | None = None
    lsiv: float | None = None
    dbe_acc: float | None = None
    dbe_comp: float | None = None
    pe_plan: float | None = None
    pe_orie: float | None = None
    delta_d_hat: float | None = None
    alpha_f_hat: float | None = None
    timing_s: float | None = None
    message: str = ""

    @classmethod
    def from_metrics(cls, image_id: str, report: MetricReport, **extra) -> "ReportRow":
        return cls(image_id=image_id, **report.to_record(), **extra)

    @classmethod
    def failure(cls, image_id: str, exc: BaseException) -> "ReportRow":
        return cls(image_id=image_id, status=status_for(exc), message=str(exc))


COLUMNS = tuple(f.name for f in fields(ReportRow))


def format_value(v) -> str:
    """6 significant digits for floats; empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _json_value(v):
    if isinstance(v, float):
        return float(f"{v:.6g}")
    return v


def emit_report(rows: list[ReportRow], format: str = "csv") -> str:
    """Serialise rows with a fixed column order (``COLUMNS``)."""
    if not rows:
        raise errors.EmptyInputError("no report rows")
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow([format_value(getattr(row, c)) for c in COLUMNS])
        return buf.getvalue()
    if format == "json":
        records = [{c: _json_value(getattr(row, c)) for c in COLUMNS} for row in rows]
        return json.dumps(records, indent=2) + "\n"
    raise errors.DomainError(f"unknown report format {format!r}; expected 'csv' or 'json'")
