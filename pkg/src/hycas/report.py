"""CSV reports with a fixed column order and '#' summary lines."""

from __future__ import annotations

import csv
import io

COLUMNS = ("sample_index", "true_label", "predicted_label", "method", "radius_l2", "radius_linf",
           "abstain", "clean_correct", "attacked_correct", "epsilon")
BRANCH_COLUMNS = ("sample_index", "rs_label", "rs_radius_l2", "rs_abstain", "rs_p_lb",
                  "lip_label", "lip_radius_l2", "lip_abstain", "lcb_radius_l2", "lcb_abstain")
RADIUS_GRID = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0)


def fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(rows: list[dict], summary: list[str] = (), columns: tuple = COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in sorted(rows, key=lambda r: r["sample_index"]):
        unknown = set(row) - set(columns)
        if unknown:
            raise ValueError(f"unknown report columns {sorted(unknown)}")
        w.writerow([fmt(row.get(c)) for c in columns])
    for line in summary:
        buf.write(f"# {line}\n")
    return buf.getvalue()


def write_report(path, rows: list[dict], summary: list[str] = (), columns: tuple = COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        f.write(render(rows, summary, columns))


def read_report(path) -> tuple[list[dict], list[str]]:
    rows, summary = [], []
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    summary = [ln[1:].strip() for ln in lines if ln.startswith("#")]
    reader = csv.DictReader(body)
    rows = list(reader)
    return rows, summary
