"""Experiment matrix: scales x precision modes x calibration strategies x degradation suites."""

from __future__ import annotations

import json
import logging
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset as dsmod
from . import degrade, evaldet, quantcore, tensornet
from ._parallel import pmap
from .errors import CalibrationError, DatasetError
from .tensornet import Model, OpCounters, PrecisionMode

log = logging.getLogger(__name__)

# Table-facing labels
PRECISION_LABELS = {"FP32": "FP32", "FP16": "FP16", "DynamicU8": "Dynamic UINT8", "StaticI8": "Static INT8"}
SCALE_ORDER = ("n", "s", "m", "l", "x")

_timing_token = threading.Lock()


@dataclass(frozen=True)
class CalibStrategy:
    name: str                       # "Clean" or "Mixed"
    mix_ratio: float = 0.0
    pool: tuple[str, ...] = tuple(k.value for k in degrade.DegradationKind)

    @classmethod
    def clean(cls):
        return cls("Clean", 0.0)

    @classmethod
    def mixed(cls, ratio: float = 0.5, pool: Sequence[str] | None = None):
        return cls("Mixed", ratio, tuple(pool) if pool else tuple(k.value for k in degrade.DegradationKind))

    def pool_specs(self) -> list[degrade.DegradationSpec]:
        return degrade.pool_from_names(self.pool)


@dataclass
class BenchConfig:
    scales: tuple[str, ...] = SCALE_ORDER
    precisions: tuple[str, ...] = ("FP32", "FP16", "DynamicU8", "StaticI8")
    calibrations: tuple[CalibStrategy, ...] = (CalibStrategy.clean(), CalibStrategy.mixed())
    suites: tuple[str, ...] = degrade.SUITES
    val_dataset: str | None = None
    calib_dataset: str | None = None
    synth: dsmod.SynthShapesConfig = field(default_factory=dsmod.SynthShapesConfig)
    calib_pool_images: int = 200
    calib_size: int = 1000
    calib_method: str = "minmax"
    dynamic_activations: bool = False
    val_seed: int = 1
    calib_seed: int = 2
    degrade_seed: int = 3
    warmup_runs: int = 10
    timed_runs: int = 100
    output_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.timed_runs < 1:
            raise ValueError("timed_runs must be >= 1")
        if "StaticI8" in self.precisions and not self.calibrations:
            raise ValueError("static INT8 requires at least one calibration strategy")
        for what, given, allowed in (("scale", self.scales, SCALE_ORDER),
                                     ("precision", self.precisions, tuple(PRECISION_LABELS)),
                                     ("suite", self.suites, degrade.SUITES),
                                     ("calibration method", (self.calib_method,), ("minmax", "entropy"))):
            unknown = [g for g in given if g not in allowed]
            if unknown:
                raise ValueError(f"unknown {what} {unknown[0]!r}")
        names = [c.name for c in self.calibrations]
        if len(set(names)) != len(names):
            raise ValueError("calibration strategy names must be unique")

    @classmethod
    def from_json(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        if "synth" in d:
            d["synth"] = dsmod.SynthShapesConfig.from_json(d["synth"])
        if "calibrations" in d:
            d["calibrations"] = tuple(CalibStrategy(c["name"], c.get("mix_ratio", 0.0),
                                                    tuple(c.get("pool") or CalibStrategy().pool))
                                      for c in d["calibrations"])
        for key in ("scales", "precisions", "suites"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def rows(self) -> list[tuple[str, str, str]]:
        """(scale, precision, calibration) in report order."""
        out = []
        for scale in self.scales:
            for prec in self.precisions:
                if prec == "StaticI8":
                    out.extend((scale, prec, c.name) for c in self.calibrations)
                else:
                    out.append((scale, prec, "N/A"))
        return out


@dataclass
class BenchRecord:
    scale: str
    precision: str
    calibration: str
    degradation: str
    map50_95: float | None
    map50: float | None
    latency_ms: float | None
    counters: dict = field(default_factory=dict)

    @property
    def fps(self) -> float | None:
        return 1000.0 / self.latency_ms if self.latency_ms else None

    @property
    def config_key(self) -> tuple[str, str, str]:
        return (self.scale, self.precision, self.calibration)

    def to_json(self) -> dict:
        d = asdict(self)
        d["fps"] = self.fps
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BenchRecord":
        d = {k: v for k, v in d.items() if k != "fps"}
        return cls(**d)


def time_inference(model: Model, mode: PrecisionMode, images: Sequence[np.ndarray], warmup: int = 10,
                   runs: int = 100) -> tuple[float, list[float]]:
    """Median batch-1 forward latency in ms and the raw samples behind it."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if not images:
        raise ValueError("no images to time")
    with _timing_token:
        for i in range(warmup):
            tensornet.forward(model, images[i % len(images)], mode)
        samples = []
        for i in range(runs):
            img = images[i % len(images)]
            t0 = time.perf_counter_ns()
            tensornet.forward(model, img, mode)
            samples.append((time.perf_counter_ns() - t0) / 1e6)
    return statistics.median(samples), samples


def evaluate(model: Model, mode: PrecisionMode, items: Sequence[tuple[int, np.ndarray]], gts, class_count: int,
             workers: int = 1) -> tuple[evaldet.EvalResult, list[evaldet.Detection], OpCounters]:
    outs = pmap(lambda it: tensornet.detect(model, it[1], mode, image_id=it[0]), items, workers)
    dets = [d for ds, _ in outs for d in ds]
    counters = outs[0][1] if outs else OpCounters()
    return evaldet.map_metrics(dets, gts, class_count), dets, counters


def _load_or_generate(path: str | None, synth: dsmod.SynthShapesConfig, seed: int, n: int | None,
                      workers: int) -> dsmod.DetectionDataset:
    if path:
        ds = dsmod.load_dataset_dir(path)
        ds.pixel_items()
        return ds
    cfg = dsmod.SynthShapesConfig.from_json({**synth.to_json(), "seed": seed,
                                             "num_images": n if n is not None else synth.num_images})
    return dsmod.generate_synth_shapes(cfg, workers=workers)


def build_calibration(model: Model, calib_ds: dsmod.DetectionDataset, strategy: CalibStrategy, size: int,
                      method: str, seed: int, workers: int = 1,
                      cache_path: Path | None = None) -> tuple[quantcore.CalibrationTable, list[dict]]:
    """Calibration table for one strategy; reuses ``cache_path`` when it already exists."""
    if cache_path is not None and cache_path.is_file():
        return quantcore.load_calibration(cache_path), []
    cfg = dsmod.CalibSetConfig(size=size, mix_ratio=strategy.mix_ratio, pool=tuple(strategy.pool_specs()), seed=seed)
    images, manifest = dsmod.build_calibration_set(calib_ds, cfg, workers=workers)
    try:
        table = quantcore.run_calibration(model, images, method, workers=workers)
    except CalibrationError:
        raise
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        quantcore.save_calibration(table, cache_path)
        cache_path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=1))
    return table, manifest


def run_matrix(cfg: BenchConfig) -> list[BenchRecord]:
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir:
        (out_dir / "raw").mkdir(parents=True, exist_ok=True)
    try:
        val = _load_or_generate(cfg.val_dataset, cfg.synth, cfg.val_seed, None, cfg.workers)
    except DatasetError as exc:
        raise DatasetError(f"validation dataset unresolvable: {exc}") from exc
    items = val.pixel_items()
    synth = cfg.synth
    if cfg.val_dataset and "config" in val.manifest:
        synth = dsmod.SynthShapesConfig.from_json(val.manifest["config"])

    suites = {}
    for suite in cfg.suites:
        built = degrade.build_suite(items, suite, cfg.degrade_seed, workers=cfg.workers)
        suites[suite] = [(i, img) for (i, _), (img, _) in zip(items, built)]

    calib_ds = None
    records: list[BenchRecord] = []
    sample_log = []
    for scale in cfg.scales:
        model = tensornet.build_template_detector(synth, scale)
        tables = {}
        for (_, prec, calib) in [r for r in cfg.rows() if r[0] == scale]:
            if prec == "StaticI8":
                if calib_ds is None:
                    calib_ds = _load_or_generate(cfg.calib_dataset, synth, cfg.calib_seed, cfg.calib_pool_images,
                                                 cfg.workers)
                strategy = next(c for c in cfg.calibrations if c.name == calib)
                cache = out_dir / "calib" / f"{scale}_{calib}_{cfg.calib_method}.json" if out_dir else None
                tables[calib], _ = build_calibration(model, calib_ds, strategy, cfg.calib_size, cfg.calib_method,
                                                     cfg.calib_seed, cfg.workers, cache)
        for (_, prec, calib) in [r for r in cfg.rows() if r[0] == scale]:
            mode = _mode_for(prec, cfg.dynamic_activations, tables.get(calib))
            for suite in cfg.suites:
                result, dets, counters = evaluate(model, mode, suites[suite], val.annotations, val.num_classes,
                                                  cfg.workers)
                latency, samples = time_inference(model, mode, [img for _, img in suites[suite]],
                                                  cfg.warmup_runs, cfg.timed_runs)
                rec = BenchRecord(scale, prec, calib, suite, result.map50_95, result.map50, latency,
                                  counters.as_dict())
                records.append(rec)
                sample_log.append({"scale": scale, "precision": prec, "calibration": calib, "degradation": suite,
                                   "samples_ms": samples})
                log.info("%s %s %s %s mAP50-95=%.4f latency=%.3fms", scale, prec, calib, suite,
                         result.map50_95, latency)
                if out_dir:
                    evaldet.write_detections_jsonl(dets, out_dir / "raw" / _raw_name(scale, prec, calib, suite))
    if out_dir:
        write_records(records, out_dir / "records.jsonl")
        with open(out_dir / "samples.log", "w") as fh:
            for entry in sample_log:
                fh.write(json.dumps(entry) + "\n")
    return records


def _raw_name(scale: str, prec: str, calib: str, suite: str) -> str:
    calib = calib.replace("/", "")  # "N/A" -> "NA"
    return f"{scale}_{prec}_{calib}_{suite}.jsonl"


def _mode_for(prec: str, dynamic_activations: bool, table) -> PrecisionMode:
    if prec == "FP32":
        return PrecisionMode.fp32()
    if prec == "FP16":
        return PrecisionMode.fp16()
    if prec == "DynamicU8":
        return PrecisionMode.dynamic_u8(dynamic_activations)
    if prec == "StaticI8":
        if table is None:
            raise CalibrationError("static INT8 cell without a calibration table")
        return PrecisionMode.static_i8(table)
    raise ValueError(f"unknown precision {prec!r}")


def write_records(records: Sequence[BenchRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_records(path: str | Path) -> list[BenchRecord]:
    with open(path) as fh:
        return [BenchRecord.from_json(json.loads(line)) for line in fh if line.strip()]
