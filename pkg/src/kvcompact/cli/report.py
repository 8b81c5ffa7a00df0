"""Report model with JSON and CSV rendering.

JSON keys always appear in the same order, and empty sections are written
as empty arrays or objects rather than omitted. ``schema_version`` is
checked on parse.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import InvalidInputError, SchemaVersionError

SCHEMA_VERSION = 1
KINDS = ("run", "simulate", "calibrate")
CALIBRATION_COLUMNS = ("alpha_h", "alpha_l", "memory_fraction", "quality_error")


@dataclass
class Report:
    kind: str
    config: dict = field(default_factory=dict)
    memory_fraction: dict = field(default_factory=dict)  # payload, payload_exact, full
    breakdown: dict = field(default_factory=dict)  # pruned, low, high
    batch_size: list = field(default_factory=list)
    bytes_touched: list = field(default_factory=list)
    quality_error: float | None = None
    points: list = field(default_factory=list)
    frontier: list = field(default_factory=list)
    simulation: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown report kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "config": dict(self.config),
            "memory_fraction": dict(self.memory_fraction),
            "breakdown": dict(self.breakdown),
            "batch_size": list(self.batch_size),
            "bytes_touched": list(self.bytes_touched),
            "quality_error": self.quality_error,
            "points": [dict(p) for p in self.points],
            "frontier": [dict(p) for p in self.frontier],
            "simulation": dict(self.simulation),
        }


def render_json(report: Report) -> str:
    return json.dumps(report.to_dict(), indent=2, allow_nan=False) + "\n"


def parse_report(text: str) -> Report:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"report is not valid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise InvalidInputError("report must be a JSON object")
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"report schema version {version!r}, this reader handles {SCHEMA_VERSION}")
    expected = list(Report("run").to_dict())
    missing = [k for k in expected if k not in obj]
    if missing:
        raise InvalidInputError(f"report is missing {missing}")
    extra = [k for k in obj if k not in expected]
    if extra:
        raise InvalidInputError(f"report has unknown keys {extra}")
    return Report(**{k: obj[k] for k in expected if k != "schema_version"})


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render_csv(report: Report) -> dict[str, str]:
    """CSV documents keyed by file suffix."""
    if report.kind == "calibrate":
        return {
            "points": _csv(CALIBRATION_COLUMNS, [[p[c] for c in CALIBRATION_COLUMNS] for p in report.points]),
            "frontier": _csv(CALIBRATION_COLUMNS, [[p[c] for c in CALIBRATION_COLUMNS] for p in report.frontier]),
        }
    if report.kind == "simulate":
        comp = report.simulation.get("compressed", {}).get("batch_size", [])
        base = report.simulation.get("baseline", {}).get("batch_size", [])
        n = max(len(comp), len(base))
        rows = [[t, comp[t] if t < len(comp) else "", base[t] if t < len(base) else ""] for t in range(n)]
        return {"batch": _csv(("tick", "compressed_batch", "baseline_batch"), rows)}
    rows = [[t, b, report.bytes_touched[t] if t < len(report.bytes_touched) else ""]
            for t, b in enumerate(report.batch_size)]
    return {"steps": _csv(("tick", "batch_size", "bytes_touched"), rows)}


def write_report(report: Report, out_dir, stem: str | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or report.kind
    paths = [out / f"{stem}.json"]
    paths[0].write_text(render_json(report), encoding="utf-8")
    for suffix, text in render_csv(report).items():
        p = out / f"{stem}_{suffix}.csv"
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths
