"""Series refinement: generic similarity outlier removal and crop IoU bands.

Each image gets a generic score (mean pairwise similarity to its series
mates: half whole-patch SSIM, half gradient-orientation-histogram cosine);
the bottom fraction across the dataset is flagged as outliers. Cropping
series additionally drop near-identical (IoU > hi) and unrelated
(IoU < lo) frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .difftoken import percentile
from .imaging import Box, ImageBuf, iou, resize_bilinear, ssim_rgb

__all__ = [
    "RefineError",
    "RefineReport",
    "orientation_histogram",
    "descriptor_similarity",
    "generic_scores",
    "iou_filter",
    "t2i_filter",
]

N_ORIENT_BINS = 36
DEFAULT_CUTOFF_FRACTION = 0.30
DEFAULT_WORKING_SIZE = 128
IOU_HI = 0.8
IOU_LO = 0.2


class RefineError(Exception):
    pass


@dataclass
class RefineReport:
    scores: dict[tuple[str, int], float]  # (series_id, image index) -> score
    cutoffs: dict[str, float]  # bucket ("all" or source) -> cutoff value
    removed: list[dict] = field(default_factory=list)  # {series_id, index, reason}

    def removals_for(self, series_id: str) -> list[dict]:
        return [r for r in self.removed if r["series_id"] == series_id]


def orientation_histogram(img: ImageBuf) -> np.ndarray:
    """36-bin gradient-orientation histogram, magnitude weighted, L2 normalized.

    Zero-gradient (constant) images return the zero vector.
    """
    luma = img.pixels @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(luma)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # [-pi, pi)
    bins = np.floor((ang + np.pi) / (2 * np.pi) * N_ORIENT_BINS).astype(int)
    bins = np.clip(bins, 0, N_ORIENT_BINS - 1)
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=N_ORIENT_BINS)
    norm = np.linalg.norm(hist)
    return hist / norm if norm > 0 else hist


def descriptor_similarity(a: ImageBuf, b: ImageBuf) -> float:
    """Cosine similarity of orientation histograms; two featureless images
    count as identical."""
    ha, hb = orientation_histogram(a), orientation_histogram(b)
    na, nb = np.linalg.norm(ha), np.linalg.norm(hb)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(ha @ hb)


def _pair_score(a: ImageBuf, b: ImageBuf) -> float:
    return 0.5 * ssim_rgb(a.pixels, b.pixels) + 0.5 * descriptor_similarity(a, b)


def generic_scores(
    series: list[tuple[str, str, list[ImageBuf]]],
    cutoff_fraction: float = DEFAULT_CUTOFF_FRACTION,
    working_size: int = DEFAULT_WORKING_SIZE,
    per_source: bool = False,
) -> RefineReport:
    """Score every image by mean similarity to its series mates and flag the
    bottom `cutoff_fraction` across the dataset (or per source category).

    `series` holds (series_id, source, images); every series needs >= 2
    images, resized to a common working size before comparison.
    """
    if not 0.0 < cutoff_fraction < 1.0:
        raise RefineError(f"cutoff fraction must be in (0, 1), got {cutoff_fraction}")
    scores: dict[tuple[str, int], float] = {}
    source_of: dict[tuple[str, int], str] = {}
    for sid, source, images in series:
        if len(images) < 2:
            raise RefineError(f"series {sid!r} has fewer than 2 images")
        resized = [resize_bilinear(img, working_size, working_size) for img in images]
        for i in range(len(resized)):
            vals = [_pair_score(resized[i], resized[j])
                    for j in range(len(resized)) if j != i]
            key = (sid, i)
            scores[key] = float(np.mean(vals))
            source_of[key] = source

    report = RefineReport(scores=scores, cutoffs={})
    buckets: dict[str, list[tuple[str, int]]]
    if per_source:
        buckets = {}
        for key, src in source_of.items():
            buckets.setdefault(src, []).append(key)
    else:
        buckets = {"all": list(scores.keys())}
    for bucket_name, keys in buckets.items():
        cutoff = percentile([scores[k] for k in keys], cutoff_fraction)
        report.cutoffs[bucket_name] = cutoff
        for sid, idx in keys:
            if scores[(sid, idx)] < cutoff:
                report.removed.append(
                    {"series_id": sid, "index": idx, "reason": "outlier"}
                )
    report.removed.sort(key=lambda r: (r["series_id"], r["index"]))
    return report


def iou_filter(boxes: list[Box], hi: float = IOU_HI, lo: float = IOU_LO) -> list[int]:
    """Greedy scan in input order: drop frames overlapping an already-kept
    frame above `hi`, then drop frames whose best overlap with the kept
    prefix falls below `lo`."""
    kept: list[int] = []
    for k, box in enumerate(boxes):
        if all(iou(box, boxes[j]) <= hi for j in kept):
            kept.append(k)
    final: list[int] = []
    for k in kept:
        if not final:
            final.append(k)
        elif max(iou(boxes[k], boxes[j]) for j in final) >= lo:
            final.append(k)
    return final


def t2i_filter(scores: list[float], threshold: float) -> list[int]:
    """Pass-through on manifest-supplied alignment scores."""
    return [k for k, s in enumerate(scores) if s >= threshold]
