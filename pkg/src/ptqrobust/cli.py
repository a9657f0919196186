"""Command-line entry point: ``ptqrobust <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, degrade, evaldet, quantcore, report, tensornet
from . import dataset as dsmod
from .errors import PtqRobustError

log = logging.getLogger("ptqrobust")


def _synth_config(ds: dsmod.DetectionDataset | None) -> dsmod.SynthShapesConfig:
    if ds is not None and "config" in ds.manifest:
        return dsmod.SynthShapesConfig.from_json(ds.manifest["config"])
    return dsmod.SynthShapesConfig()


def _model(args, ds: dsmod.DetectionDataset | None) -> tensornet.Model:
    if getattr(args, "model", None):
        return tensornet.load_model(args.model)
    return tensornet.build_template_detector(_synth_config(ds), args.scale)


def _pool(names: str | None) -> tuple[str, ...]:
    if not names:
        return tuple(k.value for k in degrade.DegradationKind)
    return tuple(n.strip() for n in names.split(",") if n.strip())


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    base = dsmod.SynthShapesConfig.from_json(json.loads(Path(args.config).read_text())) if args.config \
        else dsmod.SynthShapesConfig()
    doc = base.to_json()
    doc["seed"] = args.seed
    if args.num_images is not None:
        doc["num_images"] = args.num_images
    if args.image_size is not None:
        doc["image_size"] = args.image_size
    ds = dsmod.generate_synth_shapes(dsmod.SynthShapesConfig.from_json(doc), workers=args.workers)
    dsmod.save_dataset_dir(ds, args.out)
    print(f"wrote {len(ds.images)} images, {len(ds.annotations)} boxes to {args.out}")
    return 0


def cmd_degrade(args) -> int:
    ds = dsmod.load_dataset_dir(args.dataset)
    items = ds.pixel_items()
    pool = degrade.pool_from_names(_pool(args.pool))
    out = Path(args.out)
    for suite in args.suites or degrade.SUITES:
        built = degrade.build_suite(items, suite, args.seed, pool=pool, mixed_fraction=args.mixed_fraction,
                                    workers=args.workers)
        suite_ds = ds.with_pixels([(i, img) for (i, _), (img, _) in zip(items, built)])
        dsmod.save_dataset_dir(suite_ds, out / suite, {"suite": suite, "degrade_seed": args.seed})
        degrade.write_manifest([rec for _, rec in built], out / suite / "degradations.json")
        print(f"{suite}: {len(built)} images")
    return 0


def cmd_calibrate(args) -> int:
    ds = dsmod.load_dataset_dir(args.dataset)
    model = _model(args, ds)
    strategy = bench.CalibStrategy("Mixed" if args.mix_ratio > 0 else "Clean", args.mix_ratio, _pool(args.pool))
    out = Path(args.out)
    if out.exists():
        out.unlink()
    table, manifest = bench.build_calibration(model, ds, strategy, args.size, args.method, args.seed,
                                              args.workers, out)
    for name, e in table.items():
        print(f"{name}: [{e.range_min:.6g}, {e.range_max:.6g}] scale={e.params.scale:.6g} zp={e.params.zero_point}")
    print(f"wrote {out} ({sum(m['kind'] != 'clean' for m in manifest)} of {len(manifest)} images degraded)")
    return 0


def cmd_quantize(args) -> int:
    ds = dsmod.load_dataset_dir(args.dataset) if args.dataset else None
    model = _model(args, ds)
    view = {"weights": {}, "activations": None}
    for idx, (qp, q) in quantcore.quantize_weights(model).items():
        view["weights"][f"layer{idx}"] = {"scale": qp.scale, "zero_point": qp.zero_point, "dtype": qp.dtype.value,
                                          "shape": list(q.shape), "values": q.ravel().tolist()}
    if args.calibration:
        table = quantcore.load_calibration(args.calibration)
        view["activations"] = {k: v.to_json() for k, v in table.items()}
    _write_json(Path(args.out), view)
    if args.save_model:
        tensornet.save_model(model, args.save_model)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    ds = dsmod.load_dataset_dir(args.dataset)
    model = _model(args, ds)
    table = quantcore.load_calibration(args.calibration) if args.calibration else None
    mode = bench._mode_for(args.precision, args.dynamic_activations, table)
    items = ds.pixel_items()
    result, dets, counters = bench.evaluate(model, mode, items, ds.annotations, ds.num_classes, args.workers)
    latency, samples = bench.time_inference(model, mode, [img for _, img in items], args.warmup, args.runs)
    calib = "N/A" if args.precision != "StaticI8" else args.calibration_name
    rec = bench.BenchRecord(args.scale, args.precision, calib, ds.manifest.get("suite", degrade.CLEAN_SUITE),
                            result.map50_95, result.map50, latency, counters.as_dict())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.write_records([rec], out / "records.jsonl")
    evaldet.write_detections_jsonl(dets, out / "detections.jsonl")
    (out / "samples.log").write_text(json.dumps({"samples_ms": samples}) + "\n")
    print(f"mAP50-95={result.map50_95:.4f} mAP50={result.map50:.4f} latency={latency:.3f}ms")
    return 0


def cmd_bench(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    if args.out:
        doc["output_dir"] = args.out
    if args.workers is not None:
        doc["workers"] = args.workers
    doc.setdefault("output_dir", "bench_out")
    cfg = bench.BenchConfig.from_json(doc)
    records = bench.run_matrix(cfg)
    written = report.emit_all(records, cfg.output_dir)
    print(f"{len(records)} records; reports: {', '.join(p.name for p in written)}")
    return 0


def cmd_report(args) -> int:
    if args.records:
        records = bench.read_records(args.records)
    else:
        records = report.records_from_fixture(report.load_fixture(args.fixture_path))
    if args.out:
        for p in report.emit_all(records, args.out):
            print(p)
    else:
        sys.stdout.write(report.emit_report(records, args.schema, args.format))
    return 0


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptqrobust", description="Quantization robustness benchmark on synthetic shapes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1)

    def model_args(sp):
        sp.add_argument("--model", help="model container file; overrides --scale")
        sp.add_argument("--scale", choices=bench.SCALE_ORDER, default="m")

    sp = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON generator config")
    sp.add_argument("--num-images", type=int)
    sp.add_argument("--image-size", type=int)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("degrade", help="build degraded validation suites")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--suites", nargs="*", choices=degrade.SUITES)
    sp.add_argument("--pool", help="comma-separated kinds for the mixed suite")
    sp.add_argument("--mixed-fraction", type=float, default=0.5)
    common(sp)
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("calibrate", help="build a calibration cache")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", choices=("minmax", "entropy"), default="minmax")
    sp.add_argument("--mix-ratio", type=float, default=0.0)
    sp.add_argument("--pool", help="comma-separated degradation kinds")
    sp.add_argument("--size", type=int, default=1000)
    model_args(sp)
    common(sp)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("quantize", help="emit the int8 weight view (and activation parameters)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dataset", help="dataset whose generator config shapes the detector")
    sp.add_argument("--calibration")
    sp.add_argument("--save-model", help="also write the float model container here")
    model_args(sp)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("eval", help="evaluate one precision mode on one dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--precision", choices=tuple(bench.PRECISION_LABELS), default="FP32")
    sp.add_argument("--calibration", help="calibration cache (required for StaticI8)")
    sp.add_argument("--calibration-name", default="Clean")
    sp.add_argument("--dynamic-activations", action="store_true")
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--runs", type=int, default=100)
    model_args(sp)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="run the full matrix from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("report", help="render tables from records or the reference fixture")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--records")
    src.add_argument("--fixture", action="store_true")
    sp.add_argument("--fixture-path")
    sp.add_argument("--out", help="directory for all report_* files; stdout otherwise")
    sp.add_argument("--schema", choices=report.SCHEMAS, default="drops")
    sp.add_argument("--format", choices=report.FORMATS, default="markdown")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (PtqRobustError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
