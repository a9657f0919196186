"""Acceptance criteria, one test each.  Every test prints a PASS/FAIL line (see conftest)."""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from ptqrobust import bench, degrade, evaldet, imaging, quantcore, report, tensornet
from ptqrobust import dataset as dsmod
from ptqrobust.cli import main
from ptqrobust.quantcore import QuantDtype
from ptqrobust.tensornet import Conv2d, PrecisionMode

from conftest import textured
from oracles import entropy_oracle, kl_oracle, map_oracle, naive_conv, random_histogram, random_instance

GOLDEN = Path(__file__).parent / "golden" / "fixture_drops.md"

# Clean-data StaticI8 mAP50-95 of Clean-calibrated minus Mixed-calibrated, m scale, seeds below.
LOCKED_STRATEGY_GAP = 0.009187883074021741


def test_quant_numerics(verdict):
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    for dtype in QuantDtype:
        lo, hi = sorted(rng.uniform(-8, 8, size=2))
        qp = quantcore.qparams_from_range(lo, hi, dtype)
        a, b = qp.span
        x = rng.uniform(a, b, size=100_000)
        err = np.abs(quantcore.fake_quant(x, qp) - x)
        assert err.max() <= qp.scale / 2 + 1e-6
        outside = np.concatenate([rng.uniform(b, b + 50, 1000), rng.uniform(a - 50, a, 1000)])
        snapped = quantcore.fake_quant(outside, qp)
        assert np.all(snapped[:1000] == b) and np.all(snapped[1000:] == a)
        assert quantcore.fake_quant(b, qp) == b and quantcore.fake_quant(a, qp) == a
        s32 = np.float32(qp.scale)
        edges32 = quantcore.fake_quant(outside.astype(np.float32), qp)
        assert np.all(edges32[:1000] == np.float32(dtype.qmax - qp.zero_point) * s32)
        assert np.all(edges32[1000:] == np.float32(dtype.qmin - qp.zero_point) * s32)
        if dtype is QuantDtype.U8Asymmetric:
            for lo2, hi2 in rng.uniform(-5, 5, size=(1000, 2)):
                p = quantcore.qparams_from_range(min(lo2, hi2), max(lo2, hi2), dtype)
                assert abs(quantcore.dequantize(p.zero_point, p)) <= 1e-7 * p.scale
    elapsed = time.perf_counter() - t0
    verdict["detail"] = f"{elapsed:.2f}s"
    assert elapsed < 1.0


def test_minmax_exact_and_monotone(verdict):
    ds = dsmod.generate_synth_shapes(dsmod.SynthShapesConfig(num_images=16, seed=31, image_size=64))
    model = tensornet.build_template_detector(dsmod.SynthShapesConfig(), "n")
    images = [im.pixels for im in ds.images]
    floats = [imaging.to_f32(im) for im in images]

    whole = quantcore.run_calibration(model, floats, "minmax")
    seen: dict[str, list[float]] = {}
    for im in images:
        for name, act in tensornet.edge_activations(model, im):
            seen.setdefault(name, []).extend([float(act.min()), float(act.max())])
    for name, vals in seen.items():
        assert whole[name].range_min == min(vals) and whole[name].range_max == max(vals)

    rng = np.random.default_rng(7)
    for _ in range(50):
        small = rng.choice(len(floats), size=int(rng.integers(1, 5)), replace=False)
        extra = rng.choice(len(floats), size=int(rng.integers(1, 5)), replace=False)
        a = quantcore.run_calibration(model, [floats[i] for i in small], "minmax")
        b = quantcore.run_calibration(model, [floats[i] for i in (*small, *extra)], "minmax")
        for name in a:
            assert b[name].range_min <= a[name].range_min and b[name].range_max >= a[name].range_max


def test_entropy_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        counts = random_histogram(rng)
        hist = quantcore.CalibHistogram(range_min=0.0, range_max=float(len(counts)), counts=counts,
                                        observed_count=int(counts.sum()), ranged=True)
        i, _ = quantcore.entropy_search(hist)
        _, best = entropy_oracle(counts)
        worst = max(worst, abs(kl_oracle(counts, i) - best))
    elapsed = time.perf_counter() - t0
    verdict["detail"] = f"max |dKL|={worst:.2e}, {elapsed:.1f}s"
    assert worst <= 1e-12
    assert elapsed < 30.0


def test_map_oracle_equivalence(verdict):
    assert evaldet.average_precision([(0.4, True)], 1) == 1.0
    assert evaldet.average_precision([(0.9, True), (0.8, False)], 1) == 1.0
    assert evaldet.average_precision([(0.9, True), (0.8, False), (0.7, True)], 2) == (51 + 50 * (2 / 3)) / 101

    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(200):
        dets, gts, classes = random_instance(rng)
        want = map_oracle(dets, gts, classes)
        got = evaldet.map_metrics(
            [evaldet.Detection(i, c, s, tuple(float(v) for v in b)) for i, c, s, b in dets],
            [dsmod.GtBox(i, c, tuple(float(v) for v in b)) for i, c, b in gts], classes)
        worst = max(worst, abs(got.map50_95 - want[0]), abs(got.map50 - want[1]))
    verdict["detail"] = f"max error {worst:.1e}"
    assert worst <= 1e-9


def test_degradation_statistics(verdict):
    rng = np.random.default_rng(3)
    sigma = 25 / 255
    flat = np.full((200, 200, 3), 0.5, np.float32)  # 1.2e5 samples
    noisy, s = degrade.gaussian_noise(flat, (sigma, sigma), rng)
    measured = float(np.std(noisy.astype(np.float64) - 0.5))
    assert s == sigma and abs(measured - sigma) / sigma < 0.05

    for k in (3, 5, 7, 9, 11):
        assert abs(float(degrade.gaussian_kernel1d(k).sum()) - 1.0) <= 1e-6

    for seed in range(20):
        img = textured(seed)
        psnrs = [imaging.psnr(img, imaging.jpeg_decode(imaging.jpeg_encode(img, q))) for q in (20, 45, 80)]
        assert psnrs[0] < psnrs[1] < psnrs[2], (seed, psnrs)

    img = imaging.to_f32(textured(99))
    same, _ = degrade.gaussian_noise(img, (0.0, 0.0), rng)
    assert np.array_equal(same, img)
    assert np.array_equal(degrade.contrast_with_factor(img, 1.0), img)
    const = np.full((20, 20, 3), 0.3, np.float32)
    assert all(np.array_equal(degrade.blur_with_kernel(const, k), const) for k in (3, 7, 11))
    verdict["detail"] = f"noise sigma error {abs(measured - sigma) / sigma:.2%}"


def _digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _cli_run(root: Path, workers: int) -> tuple[dict, list]:
    w = ["--workers", str(workers)]
    assert main(["synth", "--out", str(root / "ds"), "--num-images", "10", "--seed", "8", *w]) == 0
    assert main(["degrade", "--dataset", str(root / "ds"), "--out", str(root / "deg"), "--seed", "5", *w]) == 0
    assert main(["calibrate", "--dataset", str(root / "ds"), "--out", str(root / "cal.json"), "--scale", "s",
                 "--mix-ratio", "0.5", "--size", "16", "--seed", "6", *w]) == 0
    cfg = root / "bench.json"
    cfg.write_text(json.dumps({"scales": ["s"], "suites": ["Clean", "GaussNoiseMed", "MixedVal"],
                               "synth": {"num_images": 8, "seed": 3}, "calib_pool_images": 8, "calib_size": 12,
                               "warmup_runs": 0, "timed_runs": 1}))
    assert main(["bench", "--config", str(cfg), "--out", str(root / "bench"), *w]) == 0
    maps = [(r.config_key, r.degradation, r.map50_95, r.map50)
            for r in bench.read_records(root / "bench" / "records.jsonl")]
    files = {k: v for k, v in _digest(root).items() if not k.startswith("bench/") or "/raw/" in f"/{k}"}
    return files, maps


def test_determinism_across_runs_and_threads(verdict, tmp_path):
    first = _cli_run(tmp_path / "a", 1)
    again = _cli_run(tmp_path / "b", 1)
    threaded = _cli_run(tmp_path / "c", 4)
    assert first == again == threaded
    verdict["detail"] = f"{len(first[0])} files, {len(first[1])} bench cells"


def test_directional_desk_scale(verdict):
    t0 = time.perf_counter()
    kinds = [k.value for k in degrade.DegradationKind]
    cfg = bench.BenchConfig(scales=("m",), suites=("Clean", *kinds), synth=dsmod.SynthShapesConfig(num_images=200),
                            calib_pool_images=200, calib_size=200, warmup_runs=1, timed_runs=3, workers=4)
    records = bench.run_matrix(cfg)
    elapsed = time.perf_counter() - t0
    rows: dict[tuple, dict[str, float]] = {}
    for r in records:
        rows.setdefault(r.config_key, {})[r.degradation] = r.map50_95
    bad = []
    for key, maps in rows.items():
        drop = {k: evaldet.relative_drop(maps["Clean"], maps[k]).relative_drop_pct for k in kinds}
        if not (drop["GaussNoiseMed"] > drop["GaussNoiseLow"] and drop["GaussBlurMed"] > drop["GaussBlurLow"]
                and max(drop, key=drop.get) == "GaussNoiseMed"):
            bad.append((key, drop))
    verdict["detail"] = f"{len(rows)} rows, {elapsed:.0f}s"
    assert not bad, bad
    assert elapsed < 300


def test_calibration_range_widening(verdict):
    synth = dsmod.SynthShapesConfig()
    model = tensornet.build_template_detector(synth, "m")
    pool = dsmod.generate_synth_shapes(dsmod.SynthShapesConfig(seed=2, num_images=60))
    val = dsmod.generate_synth_shapes(dsmod.SynthShapesConfig(seed=1, num_images=60))
    clean, _ = bench.build_calibration(model, pool, bench.CalibStrategy.clean(), 60, "minmax", 7)
    mixed, _ = bench.build_calibration(model, pool, bench.CalibStrategy.mixed(0.5, ["GaussNoiseMed"]), 60, "minmax", 7)
    c, m = clean["layer0"], mixed["layer0"]
    assert m.range_min < c.range_min and m.range_max > c.range_max

    items = val.pixel_items()
    maps = [bench.evaluate(model, PrecisionMode.static_i8(t), items, val.annotations, val.num_classes)[0].map50_95
            for t in (clean, mixed)]
    gap = maps[0] - maps[1]
    verdict["detail"] = f"layer0 [{c.range_min:.2f}, {c.range_max:.2f}] -> [{m.range_min:.2f}, {m.range_max:.2f}]," \
                        f" clean-data mAP gap {gap:+.4f}"
    assert gap == pytest.approx(LOCKED_STRATEGY_GAP, abs=1e-12)


def test_report_fidelity(verdict):
    text = report.emit_report(report.records_from_fixture(report.load_fixture()), "drops", "markdown")
    assert text == GOLDEN.read_text()
    lines = text.splitlines()
    assert "| X | Static INT8 | Clean | 15.1% | 12.5% | 34.7% |" in "\n".join(lines)
    assert "| X | Static INT8 | Mixed | 12.2% | 9.6% | 28.1% |" in "\n".join(lines)
    n_mixed = next(x for x in lines if x.startswith("| N | Static INT8 | Mixed |"))
    assert n_mixed.rstrip(" |").endswith("7.6%")


def test_engine_correctness(verdict, tmp_path):
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        layer = Conv2d(rng.normal(size=(c_out, c_in, *(2 * [int(rng.choice([1, 3, 5]))]))),
                       rng.normal(size=c_out), stride=int(rng.choice([1, 2])))
        x = rng.normal(size=(c_in, h, w)).astype(np.float32)
        worst = max(worst, float(np.abs(tensornet.conv2d(x, layer) - naive_conv(x, layer.weight, layer.bias,
                                                                                 layer.stride)).max()))
    assert worst <= 1e-5

    halves = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16).view(np.float16)
    wide = halves[np.isfinite(halves)].astype(np.float32)
    once = tensornet.fp16_round(wide)
    assert np.array_equal(once.view(np.uint32), wide.view(np.uint32))
    assert np.array_equal(tensornet.fp16_round(once).view(np.uint32), once.view(np.uint32))

    model = tensornet.build_template_detector(dsmod.SynthShapesConfig(), "l")
    tensornet.save_model(model, tmp_path / "m.bin")
    back = tensornet.load_model(tmp_path / "m.bin")
    img = textured(4, 128)
    for mode in (PrecisionMode.fp32(), PrecisionMode.fp16(), PrecisionMode.dynamic_u8()):
        a, b = tensornet.forward(model, img, mode)[0], tensornet.forward(back, img, mode)[0]
        assert np.array_equal(a.view(np.uint32), b.view(np.uint32))
    verdict["detail"] = f"conv max error {worst:.1e}"
