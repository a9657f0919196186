"""Seeded image degradations: Gaussian noise, Gaussian blur, low contrast and heavy JPEG.

Every operator samples its strength once per image from a range and reports the
sampled value so generated suites can be audited afterwards.  Per-image random
streams are derived from ``(master_seed, image_id)`` which keeps results
independent of thread count.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import imaging
from ._parallel import pmap, round_half_up
from .errors import InvalidRangeError


class DegradationKind(str, enum.Enum):
    GaussNoiseLow = "GaussNoiseLow"
    GaussNoiseMed = "GaussNoiseMed"
    GaussBlurLow = "GaussBlurLow"
    GaussBlurMed = "GaussBlurMed"
    LowContrast = "LowContrast"
    JpegHeavy = "JpegHeavy"


CLEAN = "clean"


# ---------------------------------------------------------------- range checks


def _check_sigma_range(r):
    lo, hi = r
    if not (0.0 <= lo <= hi <= 1.0):
        raise InvalidRangeError(f"noise sigma range must satisfy 0 <= lo <= hi <= 1, got {r}")


def _check_kernel_limit(r):
    lo, hi = r
    if lo > hi or lo < 3 or lo % 2 == 0 or hi % 2 == 0:
        raise InvalidRangeError(f"blur kernel bounds must be odd, >= 3 and ordered, got {r}")


def _check_contrast_limit(r):
    lo, hi = r
    if not (-1.0 < lo <= hi <= 0.0):
        raise InvalidRangeError(f"contrast limits must lie in (-1, 0] and be ordered, got {r}")


def _check_quality_range(r):
    lo, hi = r
    if not (1 <= lo <= hi <= 100):
        raise InvalidRangeError(f"JPEG quality range must satisfy 1 <= lo <= hi <= 100, got {r}")


@dataclass(frozen=True)
class DegradationSpec:
    kind: DegradationKind
    noise_sigma_range: tuple[float, float] = (10 / 255, 30 / 255)
    blur_kernel_limit: tuple[int, int] = (3, 5)
    contrast_limit: tuple[float, float] = (-0.6, -0.3)
    jpeg_quality_range: tuple[int, int] = (20, 45)

    def __post_init__(self):
        object.__setattr__(self, "kind", DegradationKind(self.kind))
        _check_sigma_range(self.noise_sigma_range)
        _check_kernel_limit(self.blur_kernel_limit)
        _check_contrast_limit(self.contrast_limit)
        _check_quality_range(self.jpeg_quality_range)

    @classmethod
    def default(cls, kind: DegradationKind | str) -> "DegradationSpec":
        kind = DegradationKind(kind)
        if kind is DegradationKind.GaussNoiseMed:
            return cls(kind, noise_sigma_range=(35 / 255, 55 / 255))
        if kind is DegradationKind.GaussBlurMed:
            return cls(kind, blur_kernel_limit=(7, 11))
        return cls(kind)

    def to_json(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DegradationSpec":
        return cls(
            kind=DegradationKind(d["kind"]),
            noise_sigma_range=tuple(d["noise_sigma_range"]),
            blur_kernel_limit=tuple(d["blur_kernel_limit"]),
            contrast_limit=tuple(d["contrast_limit"]),
            jpeg_quality_range=tuple(d["jpeg_quality_range"]),
        )


DEFAULT_POOL: tuple[DegradationSpec, ...] = tuple(DegradationSpec.default(k) for k in DegradationKind)


@dataclass
class DegradationRecord:
    image_id: int
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "kind": self.kind, "params": self.params, "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "DegradationRecord":
        return cls(d["image_id"], d["kind"], dict(d.get("params", {})), d.get("seed"))


def image_rng(seed: int, image_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(image_id), int(stream)]))


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


# ------------------------------------------------------------------- operators


def gaussian_noise(img: np.ndarray, sigma_range, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    _check_sigma_range(sigma_range)
    sigma = _uniform(rng, *sigma_range)
    if sigma == 0.0:
        return img.astype(np.float32, copy=True), sigma
    noisy = img.astype(np.float64) + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32), sigma


def blur_sigma(k: int) -> float:
    return 0.3 * ((k - 1) / 2 - 1) + 0.8


def gaussian_kernel1d(k: int, sigma: float | None = None) -> np.ndarray:
    if sigma is None:
        sigma = blur_sigma(k)
    x = np.arange(k, dtype=np.float64) - (k - 1) / 2
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _blur_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    padded = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    # accumulate deviations from the centre so flat regions stay bit-exact
    out = a.copy()
    for i, w in enumerate(kernel):
        if i == r:
            continue
        shifted = np.take(padded, np.arange(i, i + n), axis=axis)
        out += w * (shifted - a)
    return out


def blur_with_kernel(img: np.ndarray, k: int) -> np.ndarray:
    kernel = gaussian_kernel1d(k)
    a = img.astype(np.float64)
    a = _blur_axis(a, kernel, axis=0)
    a = _blur_axis(a, kernel, axis=1)
    return np.clip(a, 0.0, 1.0).astype(np.float32)


def gaussian_blur(img: np.ndarray, kernel_limit, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    _check_kernel_limit(kernel_limit)
    lo, hi = kernel_limit
    choices = np.arange(lo, hi + 1, 2)
    k = int(choices[0]) if len(choices) == 1 else int(rng.choice(choices))
    return blur_with_kernel(img, k), k


def contrast_with_factor(img: np.ndarray, factor: float) -> np.ndarray:
    a = img.astype(np.float64)
    mean = a.mean(axis=(0, 1), keepdims=True)
    # written as x + (f - 1)(x - mean) so that f == 1 is an exact identity
    out = a + (factor - 1.0) * (a - mean)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def low_contrast(img: np.ndarray, contrast_limit, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    _check_contrast_limit(contrast_limit)
    factor = 1.0 + _uniform(rng, *contrast_limit)
    return contrast_with_factor(img, factor), factor


def jpeg_degrade(img: np.ndarray, quality_range, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    _check_quality_range(quality_range)
    lo, hi = quality_range
    q = lo if lo == hi else int(rng.integers(lo, hi + 1))
    out = imaging.jpeg_decode(imaging.jpeg_encode(img, q))
    assert out.shape == img.shape
    return out, q


def apply_degradation(img: np.ndarray, spec: DegradationSpec, rng: np.random.Generator,
                      image_id: int = 0, seed: int | None = None) -> tuple[np.ndarray, DegradationRecord]:
    """Apply one pool member.  Byte images come back as bytes, float images as floats."""
    is_u8 = img.dtype == np.uint8
    kind = spec.kind
    if kind is DegradationKind.JpegHeavy:
        out, q = jpeg_degrade(img if is_u8 else imaging.to_u8(img), spec.jpeg_quality_range, rng)
        params = {"quality": q}
        if not is_u8:
            out = imaging.to_f32(out)
    else:
        f = imaging.to_f32(img) if is_u8 else img
        if kind in (DegradationKind.GaussNoiseLow, DegradationKind.GaussNoiseMed):
            out, v = gaussian_noise(f, spec.noise_sigma_range, rng)
            params = {"sigma": v}
        elif kind in (DegradationKind.GaussBlurLow, DegradationKind.GaussBlurMed):
            out, v = gaussian_blur(f, spec.blur_kernel_limit, rng)
            params = {"kernel_size": v, "blur_sigma": blur_sigma(v)}
        else:
            out, v = low_contrast(f, spec.contrast_limit, rng)
            params = {"factor": v}
        if is_u8:
            out = imaging.to_u8(out)
    return out, DegradationRecord(image_id, kind.value, params, seed)


def record_in_range(rec: DegradationRecord, spec: DegradationSpec) -> bool:
    p = rec.params
    kind = DegradationKind(rec.kind)
    if kind in (DegradationKind.GaussNoiseLow, DegradationKind.GaussNoiseMed):
        lo, hi = spec.noise_sigma_range
        return lo <= p["sigma"] <= hi
    if kind in (DegradationKind.GaussBlurLow, DegradationKind.GaussBlurMed):
        lo, hi = spec.blur_kernel_limit
        return lo <= p["kernel_size"] <= hi and p["kernel_size"] % 2 == 1
    if kind is DegradationKind.LowContrast:
        lo, hi = spec.contrast_limit
        return 1 + lo <= p["factor"] <= 1 + hi
    lo, hi = spec.jpeg_quality_range
    return lo <= p["quality"] <= hi


def mixed_selection(n: int, fraction: float, seed: int) -> np.ndarray:
    """Boolean mask of the ``round(fraction * n)`` positions picked by a seeded Fisher-Yates shuffle."""
    if not 0.0 <= fraction <= 1.0:
        raise InvalidRangeError(f"fraction must lie in [0, 1], got {fraction}")
    count = round_half_up(fraction * n)
    order = np.random.default_rng(np.random.SeedSequence([int(seed), n])).permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[order[:count]] = True
    return mask


def apply_mixed(images: Sequence[tuple[int, np.ndarray]], pool: Sequence[DegradationSpec], fraction: float,
                seed: int, workers: int = 1) -> list[tuple[np.ndarray, DegradationRecord]]:
    """Degrade ``round(fraction * N)`` of ``images`` with one uniformly drawn pool member each."""
    pool = list(pool)
    if fraction > 0 and not pool:
        raise InvalidRangeError("empty degradation pool with a non-zero fraction")
    mask = mixed_selection(len(images), fraction, seed)

    def work(args):
        (image_id, img), selected = args
        if not selected:
            return img.copy(), DegradationRecord(image_id, CLEAN, {}, seed)
        rng = image_rng(seed, image_id, stream=1)
        spec = pool[int(rng.integers(len(pool)))]
        return apply_degradation(img, spec, rng, image_id=image_id, seed=seed)

    return pmap(work, zip(images, mask), workers)


# ----------------------------------------------------------------------- suites

CLEAN_SUITE = "Clean"
MIXED_SUITE = "MixedVal"
SUITES: tuple[str, ...] = (CLEAN_SUITE, *(k.value for k in DegradationKind), MIXED_SUITE)


def build_suite(images: Sequence[tuple[int, np.ndarray]], suite: str, seed: int,
                pool: Sequence[DegradationSpec] = DEFAULT_POOL, mixed_fraction: float = 0.5,
                workers: int = 1) -> list[tuple[np.ndarray, DegradationRecord]]:
    """One validation suite: clean passthrough, a single kind on every image, or the mixed set."""
    if suite == CLEAN_SUITE:
        return [(img.copy(), DegradationRecord(i, CLEAN, {}, seed)) for i, img in images]
    if suite == MIXED_SUITE:
        return apply_mixed(images, pool, mixed_fraction, seed, workers=workers)
    kind = DegradationKind(suite)
    spec = next((s for s in pool if s.kind is kind), None) or DegradationSpec.default(kind)

    def work(item):
        image_id, img = item
        return apply_degradation(img, spec, image_rng(seed, image_id, stream=2), image_id=image_id, seed=seed)

    return pmap(work, images, workers)


def write_manifest(records: Sequence[DegradationRecord], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in records], indent=1))


def read_manifest(path: str | Path) -> list[DegradationRecord]:
    return [DegradationRecord.from_json(d) for d in json.loads(Path(path).read_text())]


def pool_from_names(names: Sequence[str]) -> list[DegradationSpec]:
    return [DegradationSpec.default(n) for n in names]


__all__ = [
    "CLEAN", "CLEAN_SUITE", "DEFAULT_POOL", "DegradationKind", "DegradationRecord", "DegradationSpec",
    "MIXED_SUITE", "SUITES", "apply_degradation", "apply_mixed", "blur_sigma", "build_suite",
    "gaussian_blur", "gaussian_kernel1d", "gaussian_noise", "image_rng", "jpeg_degrade", "low_contrast",
    "mixed_selection", "pool_from_names", "read_manifest", "record_in_range", "write_manifest",
]
