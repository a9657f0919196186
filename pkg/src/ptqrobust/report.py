"""Render bench records as baseline / latency / relative-drop tables (markdown or csv)."""

from __future__ import annotations

import csv
import io
import json
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import degrade
from .bench import PRECISION_LABELS, SCALE_ORDER, BenchRecord
from .errors import ReportError
from .evaldet import relative_drop

SCHEMAS = ("baseline", "latency", "drops")
FORMATS = ("markdown", "csv")

SUITE_LABELS = {
    "GaussBlurLow": "Blurry Low",
    "GaussBlurMed": "Blurry Medium",
    "GaussNoiseLow": "Noisy Low",
    "GaussNoiseMed": "Noisy Medium",
    "LowContrast": "Low Contrast",
    "JpegHeavy": "Heavy JPEG",
    "MixedVal": "Mixed Degradation",
}
DROP_COLUMN_ORDER = tuple(SUITE_LABELS)
_PREC_ORDER = {("FP32", "N/A"): 0, ("FP16", "N/A"): 1, ("DynamicU8", "N/A"): 2,
               ("StaticI8", "Clean"): 3, ("StaticI8", "Mixed"): 4}
MISSING = "n/a"


def row_sort_key(key: tuple[str, str, str]):
    scale, prec, calib = key
    s = SCALE_ORDER.index(scale) if scale in SCALE_ORDER else len(SCALE_ORDER)
    return (s, scale, _PREC_ORDER.get((prec, calib), 9), prec, calib)


def _fmt(v, spec: str) -> str:
    return MISSING if v is None else format(v, spec)


def build_table(records: Sequence[BenchRecord], schema: str) -> tuple[list[str], list[list[str]]]:
    if schema not in SCHEMAS:
        raise ReportError(f"unknown schema {schema!r}")
    keys = sorted({r.config_key for r in records}, key=row_sort_key)
    clean = {r.config_key: r for r in records if r.degradation == degrade.CLEAN_SUITE}
    lead = ["Scale", "Precision", "Calibration"]

    def lead_cells(key):
        return [key[0].upper(), PRECISION_LABELS.get(key[1], key[1]), key[2]]

    if schema == "baseline":
        header = lead + ["mAP50-95", "mAP50"]
        rows = [lead_cells(k) + [_fmt(clean[k].map50_95, ".4f"), _fmt(clean[k].map50, ".4f")]
                for k in keys if k in clean]
    elif schema == "latency":
        header = lead + ["Latency ms (simulated)", "FPS"]
        rows = [lead_cells(k) + [_fmt(clean[k].latency_ms, ".2f"), _fmt(clean[k].fps, ".1f")]
                for k in keys if k in clean]
    else:
        present = {r.degradation for r in records}
        cols = [s for s in DROP_COLUMN_ORDER if s in present]
        header = lead + [SUITE_LABELS[s] for s in cols]
        by_cell = {(r.config_key, r.degradation): r for r in records}
        rows = []
        for k in keys:
            if k not in clean or clean[k].map50_95 is None:
                raise ReportError(f"no Clean baseline for configuration {k}")
            cells = []
            for s in cols:
                rec = by_cell.get((k, s))
                if rec is None or rec.map50_95 is None:
                    cells.append(MISSING)
                    continue
                pct = relative_drop(clean[k].map50_95, rec.map50_95).relative_drop_pct
                cells.append(MISSING if pct is None else f"{pct:.1f}%")
            rows.append(lead_cells(k) + cells)
    if not rows:
        raise ReportError(f"no records usable for the {schema} table")
    return header, rows


def render(header: list[str], rows: list[list[str]], fmt: str) -> str:
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    raise ReportError(f"unknown format {fmt!r}")


def emit_report(records: Sequence[BenchRecord], schema: str, fmt: str = "markdown",
                path: str | Path | None = None) -> str:
    text = render(*build_table(records, schema), fmt)
    if path is not None:
        Path(path).write_text(text)
    return text


def emit_all(records: Sequence[BenchRecord], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for schema in SCHEMAS:
        for fmt, ext in (("markdown", "md"), ("csv", "csv")):
            p = out_dir / f"report_{schema}.{ext}"
            emit_report(records, schema, fmt, p)
            written.append(p)
    return written


# ----------------------------------------------------------- reference fixture


def load_fixture(path: str | Path | None = None) -> dict:
    if path is None:
        return json.loads(resources.files("ptqrobust").joinpath("data/reference_tables.json").read_text())
    return json.loads(Path(path).read_text())


def records_from_fixture(doc: dict) -> list[BenchRecord]:
    """Fixture rows as records; degraded mAPs are implied by the listed relative drops."""
    records = []
    for row in doc["rows"]:
        scale, prec, calib = row["scale"], row["precision"], row["calibration"]
        clean_map = row.get("map50_95")
        records.append(BenchRecord(scale, prec, calib, degrade.CLEAN_SUITE, clean_map, row.get("map50"),
                                   row.get("latency_ms")))
        for suite, pct in row.get("relative_drop_pct", {}).items():
            degraded = None if clean_map is None else clean_map * (1.0 - pct / 100.0)
            records.append(BenchRecord(scale, prec, calib, suite, degraded, None, None))
    return records
