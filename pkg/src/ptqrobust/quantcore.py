"""Affine quantization arithmetic and activation-range calibration.

Two calibrators are provided: exact min-max extremes, and the histogram/KL
threshold search used by common INT8 inference engines.  Activations use
``U8Asymmetric`` under min-max and ``I8Symmetric`` under entropy calibration;
weights are always per-tensor ``I8Symmetric``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from ._parallel import pmap
from .errors import CalibrationError, InvalidRangeError

if TYPE_CHECKING:
    from .tensornet import Model

NUM_BINS = 2048
NUM_QUANT_LEVELS = 128


class QuantDtype(str, enum.Enum):
    I8Symmetric = "I8Symmetric"
    U8Asymmetric = "U8Asymmetric"

    @property
    def qmin(self) -> int:
        return -127 if self is QuantDtype.I8Symmetric else 0

    @property
    def qmax(self) -> int:
        return 127 if self is QuantDtype.I8Symmetric else 255


class CalibMethod(str, enum.Enum):
    MinMax = "minmax"
    EntropyKL = "entropy"


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    dtype: QuantDtype

    def __post_init__(self):
        object.__setattr__(self, "dtype", QuantDtype(self.dtype))
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InvalidRangeError(f"scale must be positive and finite, got {self.scale}")
        if self.dtype is QuantDtype.I8Symmetric and self.zero_point != 0:
            raise InvalidRangeError("symmetric int8 requires zero_point == 0")
        if self.dtype is QuantDtype.U8Asymmetric and not 0 <= self.zero_point <= 255:
            raise InvalidRangeError(f"uint8 zero_point out of range: {self.zero_point}")

    @property
    def span(self) -> tuple[float, float]:
        """Smallest and largest representable real values."""
        return ((self.dtype.qmin - self.zero_point) * self.scale,
                (self.dtype.qmax - self.zero_point) * self.scale)


def qparams_from_range(lo: float, hi: float, dtype: QuantDtype | str) -> QuantParams:
    dtype = QuantDtype(dtype)
    lo, hi = float(lo), float(hi)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise InvalidRangeError(f"non-finite range ({lo}, {hi})")
    if lo > hi:
        raise InvalidRangeError(f"range min {lo} exceeds max {hi}")
    if dtype is QuantDtype.I8Symmetric:
        bound = max(abs(lo), abs(hi))
        return QuantParams(bound / 127.0 if bound > 0 else 1.0, 0, dtype)
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / 255.0 if hi > lo else 1.0
    zp = int(np.clip(np.rint(-lo / scale), 0, 255))
    return QuantParams(scale, zp, dtype)


def quantize(x, qp: QuantParams):
    """``clamp(round_half_even(x / scale) + zero_point)``; scalars in, ints out."""
    q = np.clip(np.rint(np.asarray(x) / qp.scale) + qp.zero_point, qp.dtype.qmin, qp.dtype.qmax)
    if np.ndim(q) == 0:
        return int(q)
    return q.astype(np.int32)


def dequantize(q, qp: QuantParams):
    out = (np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale
    return float(out) if np.ndim(out) == 0 else out


def fake_quant(x, qp: QuantParams):
    """Snap ``x`` onto the quantization grid, staying in the input's float dtype."""
    a = np.asarray(x)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    q = np.clip(np.rint(a / a.dtype.type(qp.scale)) + qp.zero_point, qp.dtype.qmin, qp.dtype.qmax)
    out = (q - qp.zero_point) * a.dtype.type(qp.scale)
    return float(out) if np.ndim(out) == 0 else out.astype(a.dtype, copy=False)


def dynamic_range(tensor) -> QuantParams:
    a = np.asarray(tensor)
    if a.size == 0:
        raise InvalidRangeError("dynamic range of an empty tensor")
    return qparams_from_range(float(a.min()), float(a.max()), QuantDtype.U8Asymmetric)


# ------------------------------------------------------------------ histograms


@dataclass
class CalibHistogram:
    """|x| histogram over ``[0, abs_max]`` filled after a separate extremes pass."""

    range_min: float = math.inf
    range_max: float = -math.inf
    counts: np.ndarray = field(default_factory=lambda: np.zeros(NUM_BINS, dtype=np.int64))
    observed_count: int = 0
    ranged: bool = False

    @property
    def num_bins(self) -> int:
        return len(self.counts)

    @property
    def abs_max(self) -> float:
        return max(abs(self.range_min), abs(self.range_max))

    @property
    def bin_width(self) -> float:
        return self.abs_max / self.num_bins

    @classmethod
    def from_extremes(cls, lo: float, hi: float) -> "CalibHistogram":
        return cls(range_min=float(lo), range_max=float(hi), ranged=True)

    def record_extremes(self, values) -> None:
        a = np.asarray(values)
        if a.size:
            self.range_min = min(self.range_min, float(a.min()))
            self.range_max = max(self.range_max, float(a.max()))

    def finish_range_pass(self) -> None:
        if not math.isfinite(self.range_min):
            raise CalibrationError("range pass saw no values")
        self.ranged = True

    def bin_index(self, values) -> np.ndarray:
        a = np.abs(np.asarray(values, dtype=np.float64)).ravel()
        if self.abs_max == 0.0:
            return np.zeros(a.shape, dtype=np.int64)
        idx = np.floor(a * (self.num_bins / self.abs_max)).astype(np.int64)
        return np.clip(idx, 0, self.num_bins - 1)

    def observe(self, values) -> "CalibHistogram":
        if not self.ranged:
            raise CalibrationError("observe() called before the extremes pass established the range")
        idx = self.bin_index(values)
        self.counts += np.bincount(idx, minlength=self.num_bins)
        self.observed_count += idx.size
        return self

    def merge(self, other: "CalibHistogram") -> "CalibHistogram":
        self.counts = self.counts + other.counts
        self.observed_count += other.observed_count
        return self


def kl_for_candidate(counts: np.ndarray, i: int, levels: int = NUM_QUANT_LEVELS) -> float:
    """KL(P || Q) for clipping the histogram after its first ``i`` bins."""
    counts = np.asarray(counts, dtype=np.float64)
    sliced = counts[:i]
    ref = sliced.copy()
    ref[i - 1] += counts[i:].sum()

    # ``levels`` groups of i // levels bins, the last group absorbing the remainder
    step = i // levels
    starts = np.arange(levels) * step
    group_mass = np.add.reduceat(sliced, starts)
    nonzero = sliced > 0
    group_nz = np.add.reduceat(nonzero.astype(np.float64), starts)
    group_of = np.minimum(np.arange(i) // step, levels - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        expanded = np.where(nonzero, group_mass[group_of] / group_nz[group_of], 0.0)

    ref_total, q_total = ref.sum(), expanded.sum()
    if ref_total == 0:
        raise CalibrationError("empty histogram")
    if q_total == 0:
        return math.inf
    p = ref / ref_total
    q = expanded / q_total
    mask = p > 0
    if np.any(q[mask] == 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def entropy_search(hist: CalibHistogram) -> tuple[int, float]:
    """Best clipping bin count and its divergence (ties go to the smaller count)."""
    counts = hist.counts
    if hist.observed_count <= 0 or counts.sum() == 0:
        raise CalibrationError("entropy calibration needs a non-empty histogram")
    n = len(counts)
    best_i, best_kl = None, math.inf
    for i in range(NUM_QUANT_LEVELS, n + 1):
        kl = kl_for_candidate(counts, i)
        if best_i is None or kl < best_kl:
            best_i, best_kl = i, kl
    return best_i, best_kl


def calibrate_entropy(hist: CalibHistogram) -> float:
    """Clipping threshold minimizing KL divergence between the histogram and its 128-level requantization."""
    i, _ = entropy_search(hist)
    return i * hist.bin_width


# ------------------------------------------------------------ calibration runs


@dataclass(frozen=True)
class EdgeCalibration:
    params: QuantParams
    method: CalibMethod
    range_min: float
    range_max: float

    def to_json(self) -> dict:
        return {"scale": self.params.scale, "zero_point": self.params.zero_point,
                "dtype": self.params.dtype.value, "method": self.method.value,
                "range_min": self.range_min, "range_max": self.range_max}

    @classmethod
    def from_json(cls, d: dict) -> "EdgeCalibration":
        return cls(QuantParams(d["scale"], d["zero_point"], QuantDtype(d["dtype"])),
                   CalibMethod(d["method"]), d["range_min"], d["range_max"])


CalibrationTable = dict  # edge name -> EdgeCalibration


def save_calibration(table: CalibrationTable, path: str | Path) -> None:
    Path(path).write_text(json.dumps({k: v.to_json() for k, v in table.items()}, indent=1))


def load_calibration(path: str | Path) -> CalibrationTable:
    doc = json.loads(Path(path).read_text())
    return {k: EdgeCalibration.from_json(v) for k, v in doc.items()}


# Network inputs come from 8-bit rasters, so their natural grid is exact and needs no calibration.
INPUT_PARAMS = QuantParams(1.0 / 255.0, 0, QuantDtype.U8Asymmetric)


def _edge_params(name: str, computed: QuantParams) -> QuantParams:
    from .tensornet import INPUT_EDGE

    return INPUT_PARAMS if name == INPUT_EDGE else computed


def run_calibration(model: "Model", calib_images: Sequence[np.ndarray], method: CalibMethod | str = CalibMethod.MinMax,
                    workers: int = 1) -> CalibrationTable:
    """FP32 passes over ``calib_images`` producing parameters for every activation edge."""
    from .tensornet import edge_activations

    method = CalibMethod(method)
    if len(calib_images) == 0:
        raise CalibrationError("empty calibration set")

    def extremes(img):
        return {name: (float(a.min()), float(a.max())) for name, a in edge_activations(model, img)}

    per_image = pmap(extremes, calib_images, workers)
    names = list(per_image[0])
    lo = {n: min(d[n][0] for d in per_image) for n in names}
    hi = {n: max(d[n][1] for d in per_image) for n in names}

    if method is CalibMethod.MinMax:
        return {n: EdgeCalibration(_edge_params(n, qparams_from_range(lo[n], hi[n], QuantDtype.U8Asymmetric)),
                                   method, lo[n], hi[n])
                for n in names}

    def histograms(img):
        out = {}
        for name, a in edge_activations(model, img):
            out[name] = CalibHistogram.from_extremes(lo[name], hi[name]).observe(a)
        return out

    hists = {n: CalibHistogram.from_extremes(lo[n], hi[n]) for n in names}
    for partial in pmap(histograms, calib_images, workers):
        for n in names:
            hists[n].merge(partial[n])
    table = {}
    for n in names:
        threshold = calibrate_entropy(hists[n]) if hists[n].abs_max > 0 else 0.0
        table[n] = EdgeCalibration(_edge_params(n, qparams_from_range(-threshold, threshold, QuantDtype.I8Symmetric)),
                                   method, lo[n], hi[n])
    return table


def quantize_weights(model: "Model") -> dict[int, tuple[QuantParams, np.ndarray]]:
    """Per-tensor symmetric int8 parameters and integer copies for every conv weight."""
    from .tensornet import Conv2d

    out = {}
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            w = layer.weight
            qp = qparams_from_range(float(w.min()), float(w.max()), QuantDtype.I8Symmetric)
            out[idx] = (qp, quantize(w, qp).astype(np.int8))
    if not out:
        raise CalibrationError("model has no weighted layers")
    return out


def merge_extremes(ranges: Iterable[tuple[float, float]]) -> tuple[float, float]:
    ranges = list(ranges)
    return min(r[0] for r in ranges), max(r[1] for r in ranges)
