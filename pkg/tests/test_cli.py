import hashlib
import json
from pathlib import Path

import pytest

from ptqrobust import bench
from ptqrobust.cli import main


def tree_digest(root: Path, skip=()) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def pipeline(root: Path, workers: int) -> None:
    w = ["--workers", str(workers)]
    assert main(["synth", "--out", str(root / "ds"), "--num-images", "8", "--seed", "4", *w]) == 0
    assert main(["degrade", "--dataset", str(root / "ds"), "--out", str(root / "deg"), "--seed", "9",
                 "--suites", "Clean", "JpegHeavy", "MixedVal", *w]) == 0
    assert main(["calibrate", "--dataset", str(root / "ds"), "--out", str(root / "calib.json"), "--scale", "n",
                 "--mix-ratio", "0.5", "--pool", "GaussNoiseMed,GaussBlurLow", "--size", "12", "--seed", "2", *w]) == 0


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("one"), tmp_path_factory.mktemp("four")
    pipeline(a, 1)
    pipeline(b, 4)
    return a, b


def test_outputs_identical_across_thread_counts(runs):
    a, b = runs
    da, db = tree_digest(a), tree_digest(b)
    assert da == db
    assert "ds/manifest.json" in da and "deg/MixedVal/degradations.json" in da and "calib.json" in da


def test_outputs_identical_across_invocations(runs, tmp_path):
    pipeline(tmp_path, 1)
    assert tree_digest(tmp_path) == tree_digest(runs[0])


def test_eval_and_report(runs, tmp_path, capsys):
    root = runs[0]
    assert main(["eval", "--dataset", str(root / "deg" / "Clean"), "--out", str(tmp_path / "ev"), "--scale", "n",
                 "--precision", "StaticI8", "--calibration", str(root / "calib.json"), "--calibration-name",
                 "Mixed", "--warmup", "0", "--runs", "3"]) == 0
    rec, = bench.read_records(tmp_path / "ev" / "records.jsonl")
    assert (rec.precision, rec.calibration, rec.degradation) == ("StaticI8", "Mixed", "Clean")
    samples = json.loads((tmp_path / "ev" / "samples.log").read_text())["samples_ms"]
    assert len(samples) == 3 and sorted(samples)[1] == rec.latency_ms
    assert (tmp_path / "ev" / "detections.jsonl").is_file()
    capsys.readouterr()
    assert main(["report", "--records", str(tmp_path / "ev" / "records.jsonl"), "--schema", "baseline"]) == 0
    assert "| N | Static INT8 | Mixed |" in capsys.readouterr().out


def test_quantize_writes_int8_view(tmp_path, runs):
    out = tmp_path / "q.json"
    assert main(["quantize", "--out", str(out), "--dataset", str(runs[0] / "ds"), "--scale", "n",
                 "--calibration", str(runs[0] / "calib.json"), "--save-model", str(tmp_path / "m.bin")]) == 0
    view = json.loads(out.read_text())
    for layer in view["weights"].values():
        assert layer["dtype"] == "I8Symmetric" and layer["zero_point"] == 0
        assert all(-127 <= v <= 127 for v in layer["values"])
    assert view["activations"]
    assert (tmp_path / "m.bin").stat().st_size > 0


def bench_config(path: Path) -> Path:
    cfg = {"scales": ["n"], "precisions": ["FP32", "DynamicU8", "StaticI8"], "suites": ["Clean", "GaussBlurMed"],
           "synth": {"num_images": 6, "seed": 5}, "calib_pool_images": 6, "calib_size": 10,
           "warmup_runs": 0, "timed_runs": 2}
    path.write_text(json.dumps(cfg))
    return path


def test_bench_maps_identical_across_thread_counts(tmp_path):
    cfg = bench_config(tmp_path / "cfg.json")
    maps = []
    for w in (1, 4):
        out = tmp_path / f"w{w}"
        assert main(["bench", "--config", str(cfg), "--out", str(out), "--workers", str(w)]) == 0
        recs = bench.read_records(out / "records.jsonl")
        maps.append([(r.config_key, r.degradation, r.map50_95, r.map50) for r in recs])
        for schema in ("baseline", "latency", "drops"):
            for ext in ("md", "csv"):
                assert (out / f"report_{schema}.{ext}").is_file()
        assert tree_digest(out / "raw") and (out / "samples.log").is_file()
    assert maps[0] == maps[1]
    assert len(maps[0]) == 8
    assert tree_digest(tmp_path / "w1" / "raw") == tree_digest(tmp_path / "w4" / "raw")


def test_fixture_report_to_directory(tmp_path):
    assert main(["report", "--fixture", "--out", str(tmp_path)]) == 0
    golden = Path(__file__).parent / "golden" / "fixture_drops.md"
    assert (tmp_path / "report_drops.md").read_text() == golden.read_text()


def test_errors_exit_with_code_two(tmp_path, capsys):
    assert main(["degrade", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err.startswith("error:")
    with pytest.raises(SystemExit):
        main(["calibrate", "--dataset", "x", "--out", "y", "--method", "percentile"])
