"""COCO-style detection metrics: IoU, greedy matching, 101-point AP, mAP50 and mAP50-95."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = 101
MAX_DETS = 100


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    score: float
    bbox: tuple[float, float, float, float]

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "class_id": self.class_id, "score": self.score, "bbox": list(self.bbox)}

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(d["image_id"], d["class_id"], float(d["score"]), tuple(d["bbox"]))


@dataclass
class EvalResult:
    map50_95: float
    map50: float
    per_class_ap: np.ndarray  # (classes, thresholds); NaN where a class has neither GTs nor detections
    num_images: int
    num_gts: int
    num_dets: int


@dataclass(frozen=True)
class DropReport:
    clean_map: float
    degraded_map: float
    absolute_drop: float
    relative_drop_pct: float | None


def iou(a, b) -> float:
    ax2, ay2 = a[0] + a[2], a[1] + a[3]
    bx2, by2 = b[0] + b[2], b[1] + b[3]
    iw = min(ax2, bx2) - max(a[0], b[0])
    ih = min(ay2, by2) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _score_order(dets: Sequence) -> list[int]:
    # Python's sort is stable, so equal scores keep their input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(dets: Sequence[Detection], gts: Sequence, iou_threshold: float) -> list[bool]:
    """TP/FP label for each detection (aligned with ``dets``); one image, any mix of classes."""
    taken = [False] * len(gts)
    labels = [False] * len(dets)
    for i in _score_order(dets):
        d = dets[i]
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != d.class_id:
                continue
            v = iou(d.bbox, g.bbox)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            labels[i] = True
    return labels


def average_precision(scored_labels: Sequence[tuple[float, bool]], num_gt: int) -> float | None:
    """101-point interpolated AP.  ``None`` marks a class to skip (no GTs, no detections)."""
    if num_gt == 0:
        return None if len(scored_labels) == 0 else 0.0
    if len(scored_labels) == 0:
        return 0.0
    order = sorted(range(len(scored_labels)), key=lambda i: -scored_labels[i][0])
    tp_flags = np.array([scored_labels[i][1] for i in order], dtype=np.int64)
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1 - tp_flags)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= r/100  <=>  100 * tp >= r * num_gt, evaluated in integers
    sampled = []
    for r in range(RECALL_POINTS):
        hit = np.nonzero(100 * tp >= r * num_gt)[0]
        if hit.size:
            sampled.append(float(envelope[hit[0]]))
    return math.fsum(sampled) / RECALL_POINTS


def cap_detections(dets: Sequence[Detection], max_dets: int = MAX_DETS) -> list[Detection]:
    """Keep the ``max_dets`` highest-scoring detections of each image, preserving input order."""
    by_image = defaultdict(list)
    for i, d in enumerate(dets):
        by_image[d.image_id].append(i)
    keep = set()
    for idxs in by_image.values():
        ranked = sorted(idxs, key=lambda i: -dets[i].score)
        keep.update(ranked[:max_dets])
    return [d for i, d in enumerate(dets) if i in keep]


def map_metrics(dets: Sequence[Detection], gts: Sequence, class_count: int, max_dets: int = MAX_DETS) -> EvalResult:
    if class_count <= 0:
        raise ValueError("class_count must be positive")
    dets = cap_detections(dets, max_dets)
    dets_by = defaultdict(list)
    for d in dets:
        dets_by[(d.image_id, d.class_id)].append(d)
    gts_by = defaultdict(list)
    for g in gts:
        gts_by[(g.image_id, g.class_id)].append(g)
    image_ids = sorted({k[0] for k in dets_by} | {k[0] for k in gts_by})

    ap = np.full((class_count, len(IOU_THRESHOLDS)), np.nan)
    for c in range(class_count):
        num_gt = sum(len(gts_by[(i, c)]) for i in image_ids)
        for t, thr in enumerate(IOU_THRESHOLDS):
            scored = []
            for i in image_ids:
                cd = dets_by.get((i, c), [])
                labels = match_detections(cd, gts_by.get((i, c), []), thr)
                scored.extend(zip((d.score for d in cd), labels, (id(d) for d in cd)))
            # restore the global insertion order before the stable score sort
            pos = {id(d): n for n, d in enumerate(dets)}
            scored.sort(key=lambda s: pos[s[2]])
            value = average_precision([(s, l) for s, l, _ in scored], num_gt)
            if value is not None:
                ap[c, t] = value
    per_thr = [float(np.mean(col[~np.isnan(col)])) if np.any(~np.isnan(col)) else 0.0 for col in ap.T]
    return EvalResult(float(np.mean(per_thr)), per_thr[0], ap, len(image_ids), len(gts), len(dets))


def relative_drop(clean: float, degraded: float) -> DropReport:
    absolute = clean - degraded
    rel = 100.0 * absolute / clean if clean > 0 else None
    return DropReport(clean, degraded, absolute, rel)


def write_detections_jsonl(dets: Iterable[Detection], path: str | Path) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_json()) + "\n")


def read_detections_jsonl(path: str | Path) -> list[Detection]:
    with open(path) as fh:
        return [Detection.from_json(json.loads(line)) for line in fh if line.strip()]
