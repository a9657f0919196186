"""A tiny CHW inference engine with simulated reduced-precision execution.

Quantized modes never use integer kernels: values are snapped onto their
quantization grids (fake quantization) and the arithmetic stays in float32.
``OpCounters`` tracks how many multiplies a real integer kernel would move off
the float unit.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import ModelFormatError
from .evaldet import Detection
from .quantcore import CalibrationTable, dynamic_range, fake_quant, qparams_from_range, QuantDtype

MAGIC = b"QRIDMDL1"
FP16_MAX = 65504.0
INPUT_EDGE = "input"


# ---------------------------------------------------------------------- layers


@dataclass(frozen=True, eq=False)
class Conv2d:
    weight: np.ndarray  # (out_c, in_c, k, k)
    bias: np.ndarray    # (out_c,)
    stride: int = 1
    pad: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=np.float32))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float32))
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ModelFormatError(f"conv weight must be (out, in, k, k), got {self.weight.shape}")
        k = self.weight.shape[2]
        if k % 2 == 0:
            raise ModelFormatError("conv kernels must be odd")
        if self.pad is None:
            object.__setattr__(self, "pad", (k - 1) // 2)
        if self.pad != (k - 1) // 2:
            raise ModelFormatError("only same-size padding (k - 1) / 2 is supported")
        if self.bias.shape != (self.weight.shape[0],):
            raise ModelFormatError("bias length must equal output channels")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class LeakyReLU:
    slope: float = 0.1


@dataclass(frozen=True)
class MaxPool:
    k: int = 2
    stride: int = 2


@dataclass(frozen=True, eq=False)
class ScoreHead:
    """Clamps class maps into [0, 1] and carries the per-class decode thresholds."""

    thresholds: tuple[float, ...]
    min_area: int = 1

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))


Layer = Union[Conv2d, ReLU, LeakyReLU, MaxPool, ScoreHead]


@dataclass(frozen=True, eq=False)
class Model:
    input_size: int
    layers: tuple[Layer, ...]
    class_count: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate_chain(self)

    @property
    def edge_names(self) -> list[str]:
        return [INPUT_EDGE] + [f"layer{i}" for i in range(len(self.layers))]

    @property
    def head(self) -> ScoreHead | None:
        last = self.layers[-1] if self.layers else None
        return last if isinstance(last, ScoreHead) else None


def validate_chain(model: Model) -> None:
    channels, size = 3, model.input_size
    if size < 1:
        raise ModelFormatError("input size must be positive")
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            if layer.in_channels != channels:
                raise ModelFormatError(f"layer {i}: conv expects {layer.in_channels} channels, chain has {channels}")
            channels = layer.out_channels
            size = (size + 2 * layer.pad - layer.kernel) // layer.stride + 1
        elif isinstance(layer, MaxPool):
            size = (size - layer.k) // layer.stride + 1
        elif isinstance(layer, ScoreHead):
            if i != len(model.layers) - 1:
                raise ModelFormatError("ScoreHead must be the final layer")
            if len(layer.thresholds) != channels:
                raise ModelFormatError(f"ScoreHead has {len(layer.thresholds)} thresholds for {channels} maps")
        if size < 1:
            raise ModelFormatError(f"layer {i}: spatial size collapsed to {size}")
    if model.head is not None and channels != model.class_count:
        raise ModelFormatError(f"head emits {channels} maps but class_count is {model.class_count}")


# ------------------------------------------------------------- precision modes


class Precision(str, enum.Enum):
    FP32 = "FP32"
    FP16Sim = "FP16"
    DynamicU8Sim = "DynamicU8"
    StaticI8QDQ = "StaticI8"


@dataclass(frozen=True, eq=False)
class PrecisionMode:
    kind: Precision = Precision.FP32
    dynamic_activations: bool = False
    table: CalibrationTable | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Precision(self.kind))
        if self.kind is Precision.StaticI8QDQ and self.table is None:
            raise ModelFormatError("static INT8 mode requires a calibration table")

    @classmethod
    def fp32(cls):
        return cls(Precision.FP32)

    @classmethod
    def fp16(cls):
        return cls(Precision.FP16Sim)

    @classmethod
    def dynamic_u8(cls, activations: bool = False):
        return cls(Precision.DynamicU8Sim, dynamic_activations=activations)

    @classmethod
    def static_i8(cls, table: CalibrationTable):
        return cls(Precision.StaticI8QDQ, table=table)

    @property
    def integer(self) -> bool:
        return self.kind in (Precision.DynamicU8Sim, Precision.StaticI8QDQ)


@dataclass
class OpCounters:
    float_mults: int = 0
    int_mults: int = 0
    quantize_calls: int = 0
    dequantize_calls: int = 0

    def add(self, other: "OpCounters") -> "OpCounters":
        self.float_mults += other.float_mults
        self.int_mults += other.int_mults
        self.quantize_calls += other.quantize_calls
        self.dequantize_calls += other.dequantize_calls
        return self

    def as_dict(self) -> dict:
        return {"float_mults": self.float_mults, "int_mults": self.int_mults,
                "quantize_calls": self.quantize_calls, "dequantize_calls": self.dequantize_calls}


def fp16_round(x):
    """Round onto the binary16 grid (nearest-even), saturating at +-65504 instead of overflowing."""
    a = np.asarray(x, dtype=np.float32)
    out = np.clip(a, -FP16_MAX, FP16_MAX).astype(np.float16).astype(np.float32)
    return float(out) if np.ndim(out) == 0 else out


def _weight_fq(weight: np.ndarray) -> np.ndarray:
    qp = qparams_from_range(float(weight.min()), float(weight.max()), QuantDtype.I8Symmetric)
    return fake_quant(weight, qp)


def _static_params(mode: PrecisionMode, edge: str):
    try:
        return mode.table[edge].params
    except KeyError:
        raise ModelFormatError(f"no calibration entry for activation edge {edge!r}") from None


def _conv_fp32(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, pad: int) -> np.ndarray:
    # accumulate in double, round once: keeps the float32 result within an ulp or two of exact
    k = weight.shape[2]
    x, weight = x.astype(np.float64), weight.astype(np.float64)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    if k == 1:
        cols = x[:, ::stride, ::stride]
        out = np.tensordot(weight[:, :, 0, 0], cols, axes=([1], [0]))
    else:
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        out = np.tensordot(weight, win, axes=([1, 2, 3], [0, 3, 4]))
    return (out + bias[:, None, None]).astype(np.float32, copy=False)


def conv2d(x: np.ndarray, layer: Conv2d, mode: PrecisionMode | None = None, counters: OpCounters | None = None,
           in_edge: str = INPUT_EDGE, out_edge: str | None = None) -> np.ndarray:
    """Same-padded 2-D convolution of a (C, H, W) tensor under ``mode``."""
    mode = mode or PrecisionMode.fp32()
    counters = counters if counters is not None else OpCounters()
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != layer.in_channels:
        raise ModelFormatError(f"conv input shape {x.shape} incompatible with weight {layer.weight.shape}")
    w, b = layer.weight, layer.bias

    if mode.kind is Precision.FP16Sim:
        x, w, b = fp16_round(x), fp16_round(w), fp16_round(b)
    elif mode.kind is Precision.DynamicU8Sim:
        w = _weight_fq(w)
        if mode.dynamic_activations:
            x = fake_quant(x, dynamic_range(x))
            counters.quantize_calls += x.size
    elif mode.kind is Precision.StaticI8QDQ:
        x = fake_quant(x, _static_params(mode, in_edge))
        counters.quantize_calls += x.size
        w = _weight_fq(w)

    out = _conv_fp32(x, w, b, layer.stride, layer.pad)
    macs = out.size * layer.in_channels * layer.kernel * layer.kernel
    if mode.integer:
        counters.int_mults += macs
        counters.float_mults += out.size  # one requantization rescale per output
        counters.dequantize_calls += out.size
    else:
        counters.float_mults += macs

    if mode.kind is Precision.FP16Sim:
        out = fp16_round(out)
    elif mode.kind is Precision.StaticI8QDQ and out_edge is not None:
        out = fake_quant(out, _static_params(mode, out_edge))
        counters.quantize_calls += out.size
    return out


def _maxpool(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return win.max(axis=(3, 4))


def _apply_layer(x: np.ndarray, layer: Layer, idx: int, mode: PrecisionMode, counters: OpCounters) -> np.ndarray:
    edge = f"layer{idx}"
    in_edge = INPUT_EDGE if idx == 0 else f"layer{idx - 1}"
    if isinstance(layer, Conv2d):
        return conv2d(x, layer, mode, counters, in_edge=in_edge, out_edge=edge)
    if isinstance(layer, ReLU):
        out = np.maximum(x, np.float32(0))
    elif isinstance(layer, LeakyReLU):
        out = np.where(x > 0, x, x * np.float32(layer.slope)).astype(np.float32)
        counters.float_mults += x.size
    elif isinstance(layer, MaxPool):
        out = _maxpool(x, layer.k, layer.stride)
    elif isinstance(layer, ScoreHead):
        out = np.clip(x, np.float32(0), np.float32(1))
    else:
        raise ModelFormatError(f"unknown layer {layer!r}")
    if mode.kind is Precision.FP16Sim:
        out = fp16_round(out)
    elif mode.kind is Precision.StaticI8QDQ:
        out = fake_quant(out, _static_params(mode, edge))
        counters.quantize_calls += out.size
    return out


def preprocess(image: np.ndarray, input_size: int) -> np.ndarray:
    """(H, W, 3) image -> (3, S, S) float32: centre-crop to square, nearest-neighbour resize."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / np.float32(255)
    h, w = img.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = img[top:top + side, left:left + side]
    if side != input_size:
        idx = (np.arange(input_size) * side) // input_size
        img = img[idx][:, idx]
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def forward(model: Model, image: np.ndarray, mode: PrecisionMode | None = None) -> tuple[np.ndarray, OpCounters]:
    mode = mode or PrecisionMode.fp32()
    counters = OpCounters()
    x = preprocess(image, model.input_size)
    if mode.kind is Precision.FP16Sim:
        x = fp16_round(x)
    elif mode.kind is Precision.StaticI8QDQ:
        x = fake_quant(x, _static_params(mode, INPUT_EDGE))
        counters.quantize_calls += x.size
    for idx, layer in enumerate(model.layers):
        x = _apply_layer(x, layer, idx, mode, counters)
        if not np.all(np.isfinite(x)):
            raise ModelFormatError(f"non-finite activations after layer {idx}")
    return x, counters


def edge_activations(model: Model, image: np.ndarray) -> Iterator[tuple[str, np.ndarray]]:
    """FP32 values at every activation edge: the network input, then each layer output."""
    mode = PrecisionMode.fp32()
    counters = OpCounters()
    x = preprocess(image, model.input_size)
    yield INPUT_EDGE, x
    for idx, layer in enumerate(model.layers):
        x = _apply_layer(x, layer, idx, mode, counters)
        yield f"layer{idx}", x


# ------------------------------------------------------------------- decoding


def decode_regions(head: np.ndarray, thresholds, min_area: int = 1, image_size: tuple[int, int] | None = None,
                   image_id: int = 0) -> list[Detection]:
    """Connected components (4-neighbour) of each thresholded class map become detections."""
    head = np.asarray(head)
    c, h, w = head.shape
    if np.ndim(thresholds) == 0:
        thresholds = [float(thresholds)] * c
    img_h, img_w = image_size or (h, w)
    sy, sx = img_h / h, img_w / w
    dets = []
    structure = ndimage.generate_binary_structure(2, 1)
    for cls in range(c):
        scores = head[cls]
        labels, n = ndimage.label(scores >= thresholds[cls], structure=structure)
        if n == 0:
            continue
        slices = ndimage.find_objects(labels)
        areas = np.bincount(labels.ravel(), minlength=n + 1)
        peaks = ndimage.maximum(scores, labels, index=np.arange(1, n + 1))
        for lab, (ys, xs) in enumerate(slices, start=1):
            if areas[lab] < min_area:
                continue
            bbox = (xs.start * sx, ys.start * sy, (xs.stop - xs.start) * sx, (ys.stop - ys.start) * sy)
            dets.append(Detection(image_id, cls, float(min(1.0, peaks[lab - 1])), bbox))
    return dets


def _det_key(d: Detection):
    return (-d.score, tuple(d.bbox), d.class_id)


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression of boxes overlapping a higher-scored keeper by more than the threshold."""
    from .evaldet import iou

    kept: list[Detection] = []
    for d in sorted(detections, key=_det_key):
        if all(k.class_id != d.class_id or iou(k.bbox, d.bbox) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def detect(model: Model, image: np.ndarray, mode: PrecisionMode | None = None, image_id: int = 0,
           nms_iou: float = 0.5) -> tuple[list[Detection], OpCounters]:
    head, counters = forward(model, image, mode)
    spec = model.head
    thresholds = spec.thresholds if spec else [0.5] * head.shape[0]
    min_area = spec.min_area if spec else 1
    h, w = np.asarray(image).shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    dets = decode_regions(head, thresholds, min_area, (side, side), image_id)
    if top or left:
        dets = [Detection(d.image_id, d.class_id, d.score,
                          (d.bbox[0] + left, d.bbox[1] + top, d.bbox[2], d.bbox[3])) for d in dets]
    return nms(dets, nms_iou), counters


# ---------------------------------------------------------- template detector

SCALE_PRESETS: dict[str, tuple[int, bool]] = {
    # tag -> (box-filter kernel, extra 3x3 pooling stage)
    "n": (3, False),
    "s": (3, True),
    "m": (5, False),
    "l": (5, True),
    "x": (7, True),
}


@dataclass(frozen=True)
class DetectorTuning:
    onset: float = 0.38        # fraction of the way from background to prototype where evidence starts
    saturation: float = 0.45   # fraction where evidence saturates at 1
    competitor_gain: float = 8.0
    competitor_margin: float = 0.0  # angular margin (in colour units) a pixel must keep over every rival
    threshold: float = 0.5
    min_area: int = 4


def _box_conv(channels: int, k: int) -> Conv2d:
    w = np.zeros((channels, channels, k, k), dtype=np.float32)
    for c in range(channels):
        w[c, c] = 1.0 / (k * k)
    return Conv2d(w, np.zeros(channels, dtype=np.float32))


def build_template_detector(shapes_config, scale: str = "m", tuning: DetectorTuning | None = None) -> Model:
    """Training-free colour-template detector for the synthetic shapes data.

    Stage 1 (1x1 conv + ReLU) evaluates, per class, a background-to-prototype
    projection ramp and angular competitor margins against every other
    prototype.  Stage 2 (1x1 conv + ReLU) turns them into a [0, 1] evidence map
    ``clamp(ramp) - sum(competitor penalties)``.  Box-filter convs pool the
    evidence spatially before the score head.
    """
    tuning = tuning or DetectorTuning()
    if scale not in SCALE_PRESETS:
        raise ModelFormatError(f"unknown scale preset {scale!r}")
    box_k, extra = SCALE_PRESETS[scale]
    # the config validates colour separation on construction
    protos = np.array([c.color for c in shapes_config.classes], dtype=np.float64) / 255.0
    bg = np.asarray(shapes_config.background_color, dtype=np.float64) / 255.0
    n = len(protos)
    dirs = protos - bg
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(norms < 1e-6):
        raise ModelFormatError("a class prototype coincides with the background colour")
    units = dirs / norms[:, None]

    per_class = 2 + (n - 1)
    w1 = np.zeros((n * per_class, 3), dtype=np.float64)
    b1 = np.zeros(n * per_class, dtype=np.float64)
    span = tuning.saturation - tuning.onset
    for c in range(n):
        base = c * per_class
        # ramp r = ((x - bg) . d / |d|^2 - onset) / span
        g = dirs[c] / (norms[c] ** 2 * span)
        off = -(bg @ dirs[c]) / (norms[c] ** 2 * span) - tuning.onset / span
        w1[base], b1[base] = g, off
        w1[base + 1], b1[base + 1] = g, off - 1.0
        for slot, j in enumerate(j for j in range(n) if j != c):
            # penalty grows once x - bg points closer to prototype j than to c
            v = -(units[c] - units[j]) * tuning.competitor_gain
            w1[base + 2 + slot] = v
            b1[base + 2 + slot] = -(bg @ v) + tuning.competitor_gain * tuning.competitor_margin
    w2 = np.zeros((n, n * per_class), dtype=np.float64)
    for c in range(n):
        base = c * per_class
        w2[c, base], w2[c, base + 1] = 1.0, -1.0
        w2[c, base + 2: base + per_class] = -1.0
    layers: list[Layer] = [
        Conv2d(w1[:, :, None, None], b1), ReLU(),
        Conv2d(w2[:, :, None, None], np.zeros(n)), ReLU(),
        _box_conv(n, box_k),
    ]
    if extra:
        layers.append(_box_conv(n, 3))
    layers.append(ScoreHead(tuple([tuning.threshold] * n), min_area=tuning.min_area))
    meta = {"name": "template-detector", "scale": scale, "classes": [c.name for c in shapes_config.classes]}
    return Model(shapes_config.image_size, tuple(layers), n, meta)


# ------------------------------------------------------------------ container


def _layer_header(layer: Layer, blobs: list[np.ndarray], offset: int) -> tuple[dict, int]:
    if isinstance(layer, Conv2d):
        entry = {"type": "Conv2d", "stride": layer.stride, "pad": layer.pad}
        for name, arr in (("weight", layer.weight), ("bias", layer.bias)):
            data = np.ascontiguousarray(arr, dtype="<f4")
            entry[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": data.nbytes}
            blobs.append(data)
            offset += data.nbytes
        return entry, offset
    if isinstance(layer, ReLU):
        return {"type": "ReLU"}, offset
    if isinstance(layer, LeakyReLU):
        return {"type": "LeakyReLU", "slope": layer.slope}, offset
    if isinstance(layer, MaxPool):
        return {"type": "MaxPool", "k": layer.k, "stride": layer.stride}, offset
    if isinstance(layer, ScoreHead):
        return {"type": "ScoreHead", "thresholds": list(layer.thresholds), "min_area": layer.min_area}, offset
    raise ModelFormatError(f"cannot serialize {layer!r}")


def serialize_model(model: Model) -> bytes:
    blobs: list[np.ndarray] = []
    offset = 0
    layers = []
    for layer in model.layers:
        entry, offset = _layer_header(layer, blobs, offset)
        layers.append(entry)
    header = {"input_size": model.input_size, "class_count": model.class_count,
              "metadata": model.metadata, "layers": layers, "blob_bytes": offset}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(b.tobytes() for b in blobs)


def deserialize_model(data: bytes) -> Model:
    if data[:8] != MAGIC:
        raise ModelFormatError("bad magic: not a model container")
    if len(data) < 16:
        raise ModelFormatError("truncated container header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise ModelFormatError("truncated container header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable container header: {exc}") from exc
    blob = data[16 + hlen:]
    if len(blob) != header["blob_bytes"]:
        raise ModelFormatError(f"weight blob is {len(blob)} bytes, header declares {header['blob_bytes']}")

    def tensor(desc):
        start, nbytes = desc["offset"], desc["nbytes"]
        shape = tuple(desc["shape"])
        if start + nbytes > len(blob) or nbytes != 4 * int(np.prod(shape)):
            raise ModelFormatError("weight blob offsets inconsistent with header")
        return np.frombuffer(blob[start:start + nbytes], dtype="<f4").reshape(shape).astype(np.float32)

    layers: list[Layer] = []
    for entry in header["layers"]:
        t = entry["type"]
        if t == "Conv2d":
            layers.append(Conv2d(tensor(entry["weight"]), tensor(entry["bias"]), entry["stride"], entry["pad"]))
        elif t == "ReLU":
            layers.append(ReLU())
        elif t == "LeakyReLU":
            layers.append(LeakyReLU(entry["slope"]))
        elif t == "MaxPool":
            layers.append(MaxPool(entry["k"], entry["stride"]))
        elif t == "ScoreHead":
            layers.append(ScoreHead(tuple(entry["thresholds"]), entry.get("min_area", 1)))
        else:
            raise ModelFormatError(f"unknown layer type {t!r}")
    return Model(header["input_size"], tuple(layers), header["class_count"], header.get("metadata", {}))


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(serialize_model(model))


def load_model(path: str | Path) -> Model:
    return deserialize_model(Path(path).read_bytes())
