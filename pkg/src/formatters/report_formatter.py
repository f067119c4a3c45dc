import csv
import io
import json
import logging
import os
import re
from typing import Iterable, Optional

from pydantic import ValidationError

from models import CurvePoint, ResultRecord
from services.errors import ScenarioError
from utils.plot_utils import PlotFrame, finite_points, render_curve_png

logger = logging.getLogger("perpetua.report_formatter")

CSV_HEADER = ("t", "estimate", "lo", "hi")
EMPTY_REPORT = "results"
REPORT_FORMATS = ("csv", "svg", "png")


# --- Parsing ---


def parse_records(lines: Iterable[str]) -> list[ResultRecord]:
    records = []
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(ResultRecord.model_validate(json.loads(line)))
        except (json.JSONDecodeError, ValidationError) as exc:
            raise ScenarioError(f"Malformed result record on line {number}: {exc}") from exc
    return records


def load_records(path: str) -> list[ResultRecord]:
    try:
        with open(path) as f:
            return parse_records(f)
    except OSError as exc:
        raise ScenarioError(f"Cannot read results {path}: {exc}") from exc


def file_stem(tag: str) -> str:
    stem = re.sub(r"[^A-Za-z0-9._=-]+", "_", tag).strip("_")
    return stem or EMPTY_REPORT


def group_by_tag(records: list[ResultRecord]) -> dict[str, list[ResultRecord]]:
    groups: dict[str, list[ResultRecord]] = {}
    for record in records:
        groups.setdefault(record.tag or record.experiment, []).append(record)
    return groups


# --- CSV ---


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def curve_rows(record: ResultRecord) -> list[tuple[str, str, str, str]]:
    """Curve points, or one row with an empty t for a scalar estimate."""
    if record.curve:
        return [(_fmt(p.t), _fmt(p.estimate), _fmt(p.lo), _fmt(p.hi)) for p in record.curve]
    if record.estimate is None:
        return []
    lo, hi = record.ci if record.ci else (None, None)
    return [("", _fmt(record.estimate), _fmt(lo), _fmt(hi))]


def render_csv(records: list[ResultRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for record in records:
        writer.writerows(curve_rows(record))
    return buffer.getvalue()


# --- SVG ---


def _svg_points(points: list[tuple[float, float]]) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in points)


def render_svg(points: list[CurvePoint], title: str = "") -> str:
    points = finite_points(points)
    frame = PlotFrame.fit(points)
    bottom = frame.height - frame.margin
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{frame.width}" height="{frame.height}" '
        f'viewBox="0 0 {frame.width} {frame.height}">',
        f'<rect width="{frame.width}" height="{frame.height}" fill="#ffffff"/>',
        f'<polyline class="axes" fill="none" stroke="#3c3c3c" points="'
        f'{frame.margin},{frame.margin} {frame.margin},{bottom} {frame.width - frame.margin},{bottom}"/>',
    ]
    if points:
        parts.append(f'<polygon class="band" fill="#aec7e8" stroke="none" points="{_svg_points(frame.band(points))}"/>')
        parts.append(
            f'<polyline class="curve" fill="none" stroke="#1f77b4" stroke-width="2" '
            f'points="{_svg_points(frame.line(points))}"/>'
        )
    parts.append(f'<text x="{frame.margin}" y="20" font-size="14">{_escape(title)}</text>')
    parts.append(
        f'<text x="{frame.margin}" y="{frame.height - 12}" font-size="12">'
        f"t: {frame.t_lo:.4g} .. {frame.t_hi:.4g}{' (log)' if frame.log_t else ''}</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# --- Output ---


def write_report(records: list[ResultRecord], out_dir: str, formats: Iterable[str] = ("csv", "svg")) -> list[str]:
    """Writes one CSV per tag and one plot per curve-bearing record; returns the paths in write order."""
    formats = tuple(formats)
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise ScenarioError(f"Unknown report formats {sorted(unknown)}; choose from {', '.join(REPORT_FORMATS)}.")
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    groups = group_by_tag(records)
    if "csv" in formats:
        if not groups:
            written.append(_write_text(os.path.join(out_dir, f"{EMPTY_REPORT}.csv"), render_csv([])))
        for tag, group in groups.items():
            written.append(_write_text(os.path.join(out_dir, f"{file_stem(tag)}.csv"), render_csv(group)))
    for tag, group in groups.items():
        curves = [r for r in group if r.curve]
        for index, record in enumerate(curves):
            stem = file_stem(tag) if len(curves) == 1 else f"{file_stem(tag)}-{index}"
            title = f"{record.experiment} {record.law} {tag}"
            if "svg" in formats:
                written.append(_write_text(os.path.join(out_dir, f"{stem}.svg"), render_svg(record.curve, title)))
            if "png" in formats:
                path = os.path.join(out_dir, f"{stem}.png")
                with open(path, "wb") as f:
                    f.write(render_curve_png(record.curve, title).getvalue())
                written.append(path)
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written


def _write_text(path: str, text: str) -> str:
    with open(path, "w", newline="") as f:
        f.write(text)
    return path
