import csv
import io
from pathlib import Path

import pytest

from ptqrobust import report
from ptqrobust.bench import BenchRecord
from ptqrobust.errors import ReportError

GOLDEN = Path(__file__).parent / "golden" / "fixture_drops.md"


def fixture_records():
    return report.records_from_fixture(report.load_fixture())


def test_fixture_drop_table_matches_golden():
    text = report.emit_report(fixture_records(), "drops", "markdown")
    assert text == GOLDEN.read_text()


def _cell(text, scale, precision, calib, column):
    header, _sep, *rows = text.splitlines()
    cols = [c.strip() for c in header.strip("|").split("|")]
    for r in rows:
        cells = [c.strip() for c in r.strip("|").split("|")]
        if cells[:3] == [scale, precision, calib]:
            return cells[cols.index(column)]
    raise KeyError((scale, precision, calib))


def test_anchor_cells():
    text = GOLDEN.read_text()
    assert _cell(text, "X", "Static INT8", "Clean", "Noisy Medium") == "34.7%"
    assert _cell(text, "X", "Static INT8", "Mixed", "Noisy Medium") == "28.1%"
    assert _cell(text, "N", "Static INT8", "Mixed", "Mixed Degradation") == "7.6%"


def test_fixture_baseline_values():
    text = report.emit_report(fixture_records(), "baseline")
    assert _cell(text, "X", "Static INT8", "Clean", "mAP50-95") == "0.5202"
    assert _cell(text, "X", "Static INT8", "Mixed", "mAP50-95") == "0.5032"
    assert _cell(text, "N", "FP32", "N/A", "mAP50") == "n/a"


def test_latency_fps_consistent():
    for r in fixture_records():
        if r.latency_ms is not None:
            assert r.fps * r.latency_ms == pytest.approx(1000.0)
    text = report.emit_report(fixture_records(), "latency")
    assert _cell(text, "N", "FP32", "N/A", "Latency ms (simulated)") == "3.80"


def test_row_order():
    text = report.emit_report(fixture_records(), "baseline")
    keys = [tuple(c.strip() for c in r.strip("|").split("|")[:3]) for r in text.splitlines()[2:]]
    order = [("FP32", "N/A"), ("FP16", "N/A"), ("Dynamic UINT8", "N/A"), ("Static INT8", "Clean"),
             ("Static INT8", "Mixed")]
    assert keys == [(s, p, c) for s in "NSMLX" for p, c in order]


def test_csv_and_markdown_agree():
    recs = fixture_records()
    for schema in report.SCHEMAS:
        md = report.emit_report(recs, schema, "markdown")
        md_rows = [[c.strip() for c in r.strip("|").split("|")] for r in md.splitlines() if not r.startswith("|---")]
        csv_rows = list(csv.reader(io.StringIO(report.emit_report(recs, schema, "csv"))))
        assert md_rows == csv_rows


def test_drop_table_uses_own_baseline():
    recs = [
        BenchRecord("n", "FP32", "N/A", "Clean", 0.5, None, 1.0),
        BenchRecord("n", "FP32", "N/A", "GaussNoiseMed", 0.25, None, 1.0),
        BenchRecord("n", "FP16", "N/A", "Clean", 0.8, None, 1.0),
        BenchRecord("n", "FP16", "N/A", "GaussNoiseMed", 0.6, None, 1.0),
    ]
    text = report.emit_report(recs, "drops")
    assert _cell(text, "N", "FP32", "N/A", "Noisy Medium") == "50.0%"
    assert _cell(text, "N", "FP16", "N/A", "Noisy Medium") == "25.0%"


def test_missing_baseline_and_bad_args():
    with pytest.raises(ReportError):
        report.emit_report([BenchRecord("n", "FP32", "N/A", "GaussNoiseMed", 0.2, None, 1.0)], "drops")
    recs = [BenchRecord("n", "FP32", "N/A", "Clean", 0.5, 0.7, 2.0)]
    assert len(report.emit_report(recs, "baseline").splitlines()) == 3
    with pytest.raises(ReportError):
        report.emit_report(recs, "nope")
    with pytest.raises(ReportError):
        report.emit_report(recs, "baseline", "html")


def test_emit_all_writes_six_files(tmp_path):
    written = report.emit_all(fixture_records(), tmp_path)
    assert sorted(p.name for p in written) == sorted(
        f"report_{s}.{e}" for s in ("baseline", "latency", "drops") for e in ("md", "csv"))
    assert (tmp_path / "report_drops.md").read_text() == GOLDEN.read_text()
