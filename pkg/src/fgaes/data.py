"""Manifests, stratified splits, and synthetic fine/coarse data generation.

Synthetic series tie aesthetic quality to a single monotone degradation axis
(blur, noise, exposure, desaturation, off-center crop): more degraded means
less aesthetic, so the planted ranking is an oracle rather than an opinion.
All generators are bit-deterministic per seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import erf

from .imaging import Box, ImageBuf, decode_image, encode_image, resize_bilinear

__all__ = [
    "DataError",
    "SeriesRecord",
    "CoarseRecord",
    "VoteRow",
    "GeneratedSeries",
    "DEGRADATIONS",
    "load_manifest",
    "split_811",
    "synth_fine",
    "synth_coarse",
    "synth_votes",
    "write_fine_dataset",
    "write_coarse_dataset",
    "write_votes",
    "load_series_images",
    "base_image",
    "apply_degradation",
    "degrade_series",
    "score_distribution",
    "planted_pair_prob",
    "write_manifest",
]


class DataError(Exception):
    pass


@dataclass
class SeriesRecord:
    series_id: str
    source: str  # natural | aigc | cropping
    images: list[str]
    gt_ranking: list[int]
    pair_probs: list[tuple[int, int, float]]
    texts: list[tuple[int, int, str]] = field(default_factory=list)
    boxes: list[tuple[float, float, float, float]] | None = None
    t2i_scores: list[float] | None = None

    def validate(self, where: str = ""):
        n = len(self.images)
        if not 2 <= n <= 10:
            raise DataError(f"{where}series length {n} outside [2, 10]")
        if sorted(self.gt_ranking) != list(range(n)):
            raise DataError(f"{where}gt_ranking is not a permutation of image indices")
        if self.source not in ("natural", "aigc", "cropping"):
            raise DataError(f"{where}unknown source {self.source!r}")
        pos = {img: k for k, img in enumerate(self.gt_ranking)}
        for i, j, p in self.pair_probs:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise DataError(f"{where}pair ({i},{j}) out of range")
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{where}pair probability {p} outside [0, 1]")
            if p > 0.5 and pos[i] > pos[j]:
                raise DataError(f"{where}pair ({i},{j}) contradicts gt_ranking")
        if self.boxes is not None and len(self.boxes) != n:
            raise DataError(f"{where}boxes length != image count")
        if self.t2i_scores is not None and len(self.t2i_scores) != n:
            raise DataError(f"{where}t2i_scores length != image count")


@dataclass
class CoarseRecord:
    image: str
    dist: list[float]

    def validate(self, where: str = ""):
        if len(self.dist) != 10:
            raise DataError(f"{where}dist must have 10 bins")
        arr = np.asarray(self.dist)
        if np.any(arr < 0) or abs(arr.sum() - 1.0) > 1e-9:
            raise DataError(f"{where}dist is not a probability distribution")

    @property
    def mean_score(self) -> float:
        return float(np.arange(1.0, 11.0) @ np.asarray(self.dist))


@dataclass
class VoteRow:
    series_id: str
    i: int
    j: int
    votes_i: int
    votes_j: int
    votes_tie: int = 0

    def validate(self, where: str = ""):
        if min(self.votes_i, self.votes_j, self.votes_tie) < 0:
            raise DataError(f"{where}negative vote count")
        if self.votes_i + self.votes_j + self.votes_tie < 1:
            raise DataError(f"{where}empty vote record")


# ---------------------------------------------------------------------------
# manifests

def _record_from_json(kind: str, obj: dict):
    if kind == "series":
        return SeriesRecord(
            series_id=obj["series_id"],
            source=obj["source"],
            images=list(obj["images"]),
            gt_ranking=list(obj["gt_ranking"]),
            pair_probs=[tuple(x) for x in obj["pair_probs"]],
            texts=[tuple(x) for x in obj.get("texts", [])],
            boxes=[tuple(x) for x in obj["boxes"]] if obj.get("boxes") is not None else None,
            t2i_scores=list(obj["t2i_scores"]) if obj.get("t2i_scores") is not None else None,
        )
    if kind == "coarse":
        return CoarseRecord(image=obj["image"], dist=list(obj["dist"]))
    if kind == "votes":
        return VoteRow(
            series_id=obj["series_id"], i=obj["i"], j=obj["j"],
            votes_i=obj["votes_i"], votes_j=obj["votes_j"],
            votes_tie=obj.get("votes_tie", 0),
        )
    raise DataError(f"unknown manifest kind {kind!r}")


def load_manifest(path, kind: str, check_images: bool = True):
    """Read a JSONL manifest, validating each record; errors cite the line."""
    records = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{os.path.basename(path)}:{lineno}: "
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}invalid JSON: {exc}") from None
            try:
                rec = _record_from_json(kind, obj)
            except (KeyError, TypeError) as exc:
                raise DataError(f"{where}missing or malformed field: {exc}") from None
            rec.validate(where)
            if check_images:
                paths = rec.images if kind == "series" else (
                    [rec.image] if kind == "coarse" else []
                )
                for rel in paths:
                    if not os.path.exists(os.path.join(base, rel)):
                        raise DataError(f"{where}dangling image path {rel!r}")
            records.append(rec)
    return records


def _dump_record(rec) -> str:
    if isinstance(rec, SeriesRecord):
        obj = {
            "series_id": rec.series_id,
            "source": rec.source,
            "images": rec.images,
            "gt_ranking": rec.gt_ranking,
            "pair_probs": [[i, j, p] for i, j, p in rec.pair_probs],
            "texts": [[i, j, t] for i, j, t in rec.texts],
        }
        if rec.boxes is not None:
            obj["boxes"] = [list(b) for b in rec.boxes]
        if rec.t2i_scores is not None:
            obj["t2i_scores"] = rec.t2i_scores
    elif isinstance(rec, CoarseRecord):
        obj = {"image": rec.image, "dist": rec.dist}
    elif isinstance(rec, VoteRow):
        obj = {
            "series_id": rec.series_id, "i": rec.i, "j": rec.j,
            "votes_i": rec.votes_i, "votes_j": rec.votes_j, "votes_tie": rec.votes_tie,
        }
    else:
        raise DataError(f"cannot serialize {type(rec).__name__}")
    return json.dumps(obj, sort_keys=True)


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(_dump_record(rec) + "\n")


def load_series_images(rec: SeriesRecord, base_dir) -> list[ImageBuf]:
    out = []
    for rel in rec.images:
        with open(os.path.join(base_dir, rel), "rb") as fh:
            out.append(decode_image(fh.read()))
    return out


# ---------------------------------------------------------------------------
# splits

def split_811(records, seed: int):
    """Stratified 8:1:1 split: per-source shuffle, floor remainders to train.
    Whole series stay in one split; deterministic per seed."""
    by_source: dict[str, list] = {}
    for rec in records:
        by_source.setdefault(rec.source, []).append(rec)
    train, val, test = [], [], []
    for src_idx, src in enumerate(sorted(by_source)):
        group = by_source[src]
        rng = np.random.default_rng(np.random.SeedSequence([seed, src_idx]))
        order = rng.permutation(len(group))
        shuffled = [group[k] for k in order]
        n = len(group)
        n_val = n // 10
        n_test = n // 10
        if n < 3:
            train += shuffled  # too small to stratify; warning-level condition
            continue
        test += shuffled[:n_test]
        val += shuffled[n_test:n_test + n_val]
        train += shuffled[n_test + n_val:]
    return train, val, test


# ---------------------------------------------------------------------------
# procedural images and degradations

def base_image(seed: int, w: int = 64, h: int = 64) -> ImageBuf:
    """Seeded geometric/gradient texture with enough high-frequency content
    that every degradation axis is visible in patch statistics."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = xx / w, yy / h
    px = np.zeros((h, w, 3))
    direction = rng.uniform(-1, 1, size=2)
    for c in range(3):
        px[:, :, c] = 0.45 + 0.25 * (direction[0] * u + direction[1] * v)
    for _ in range(4):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.08, 0.3)
        color = rng.uniform(0.1, 0.9, size=3)
        mask = (u - cx) ** 2 + (v - cy) ** 2 < r * r
        if rng.random() < 0.5:
            x0, y0 = rng.uniform(0.0, 0.7, size=2)
            wbox, hbox = rng.uniform(0.15, 0.3, size=2)
            mask = (u >= x0) & (u < x0 + wbox) & (v >= y0) & (v < y0 + hbox)
        px[mask] = color
    fx, fy = rng.uniform(8, 16, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    ripple = 0.12 * np.sin(2 * np.pi * fx * u + phase) * np.sin(2 * np.pi * fy * v)
    px += ripple[:, :, None]
    speckle = 0.06 * rng.standard_normal((h, w, 1))
    px += speckle
    return ImageBuf(np.clip(px, 0.0, 1.0))


DEGRADATIONS = (
    "gaussian_blur",
    "additive_noise",
    "exposure_shift",
    "saturation_loss",
    "crop_off_center",
)

_SOURCE_OF_DEGRADATION = {
    "gaussian_blur": "natural",
    "additive_noise": "natural",
    "exposure_shift": "aigc",
    "saturation_loss": "aigc",
    "crop_off_center": "cropping",
}


def _crop_window(w: int, h: int, severity: float):
    frac = 1.0 - 0.5 * severity
    cw = max(8, int(round(w * frac)))
    ch = max(8, int(round(h * frac)))
    x0 = int(round((w - cw) * 0.9))
    y0 = int(round((h - ch) * 0.9))
    return x0, y0, cw, ch


def apply_degradation(img: ImageBuf, kind: str, severity: float, seed: int = 0) -> ImageBuf:
    """Apply one degradation at the given severity; severity 0 is identity."""
    if not 0.0 <= severity <= 1.0:
        raise DataError(f"severity {severity} outside [0, 1]")
    px = img.pixels
    if severity == 0.0:
        return ImageBuf(px.copy())
    if kind == "gaussian_blur":
        out = gaussian_filter(px, sigma=(2.5 * severity, 2.5 * severity, 0.0), mode="nearest")
    elif kind == "additive_noise":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA01]))
        out = px + 0.3 * severity * rng.standard_normal(px.shape)
    elif kind == "exposure_shift":
        out = px + 0.55 * severity
    elif kind == "saturation_loss":
        luma = px @ np.array([0.299, 0.587, 0.114])
        out = (1.0 - severity) * px + severity * luma[:, :, None]
    elif kind == "crop_off_center":
        x0, y0, cw, ch = _crop_window(img.width, img.height, severity)
        window = ImageBuf(px[y0:y0 + ch, x0:x0 + cw].copy())
        out = resize_bilinear(window, img.width, img.height).pixels
    else:
        raise DataError(f"unknown degradation {kind!r}")
    return ImageBuf(np.clip(out, 0.0, 1.0))


# comparative phrasing bank: (praises the cleaner frame, faults the degraded one)
_PHRASES = {
    "gaussian_blur": [
        ("keeps every edge crisp and the fine texture sharply resolved",
         "looks noticeably softer, smearing away the detail that matters"),
        ("renders the scene with far more clarity and bite",
         "feels hazy and out of focus by comparison"),
    ],
    "additive_noise": [
        ("presents a clean, smooth rendition of the scene",
         "is visibly grainy, with speckle overwhelming the subject"),
        ("holds tonal surfaces steady and noise-free",
         "suffers from distracting static across every region"),
    ],
    "exposure_shift": [
        ("balances its exposure so highlights keep their color",
         "is washed out, with highlights blown toward white"),
        ("retains rich, well-anchored tones",
         "looks overexposed and pale in comparison"),
    ],
    "saturation_loss": [
        ("carries vivid, confident color throughout",
         "appears drab and desaturated, draining the scene of life"),
        ("keeps its palette saturated and lively",
         "fades toward gray, far less striking"),
    ],
    "crop_off_center": [
        ("frames the subject with a balanced, deliberate composition",
         "crops awkwardly off-center and loses the composition's anchor"),
        ("uses the full scene to compose a stronger image",
         "cuts away context and feels cramped by comparison"),
    ],
}


def _comparative_text(kind: str, variant: int) -> str:
    better, worse = _PHRASES[kind][variant % len(_PHRASES[kind])]
    return f"This image {better}.||By contrast, this one {worse}."


def planted_pair_prob(gap: int) -> float:
    """Preference probability for images `gap` ranks apart: 0.9 adjacent,
    1 - 0.1/gap beyond, clipped to [0.75, 1.0]."""
    return float(np.clip(1.0 - 0.1 / gap, 0.75, 1.0))


@dataclass
class GeneratedSeries:
    record: SeriesRecord
    images: list[ImageBuf]
    severities: list[float]  # aligned with record.images order
    degradation: str


def degrade_series(base: ImageBuf, kind: str, severities, seed: int) -> list[ImageBuf]:
    """Render one degradation ladder; severities must strictly increase."""
    sev = [float(s) for s in severities]
    if any(b <= a for a, b in zip(sev, sev[1:])):
        raise DataError(f"severities must be strictly increasing, got {sev}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))
    return [
        apply_degradation(base, kind, s, seed=int(rng.integers(0, 2 ** 31)))
        for s in sev
    ]


def synth_fine(
    seed: int,
    n_series: int,
    length_range: tuple[int, int] = (2, 6),
    menu: tuple[str, ...] = DEGRADATIONS,
    img_size: int = 64,
) -> list[GeneratedSeries]:
    """Planted-order series: one base image, one degradation type, strictly
    increasing severities; ranking = ascending severity."""
    lo, hi = length_range
    if not (2 <= lo <= hi <= 10):
        raise DataError(f"length range {length_range} outside [2, 10]")
    for kind in menu:
        if kind not in DEGRADATIONS:
            raise DataError(f"unknown degradation {kind!r} in menu")
    out = []
    for k in range(n_series):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1, k]))
        n = int(rng.integers(lo, hi + 1))
        kind = menu[int(rng.integers(0, len(menu)))]
        grid = np.linspace(0.0, 0.9, 10)
        severities = np.sort(rng.choice(grid, size=n, replace=False))
        if severities[0] != 0.0 and rng.random() < 0.5:
            severities[0] = 0.0  # often anchor the clean end
        base = base_image(int(rng.integers(0, 2 ** 31)), img_size, img_size)
        by_quality = degrade_series(base, kind, severities, seed=int(rng.integers(0, 2 ** 31)))
        display = rng.permutation(n).tolist()  # display[i] = quality rank of slot i
        images = [None] * n
        sev_by_slot = [0.0] * n
        for slot, quality_pos in enumerate(display):
            images[slot] = by_quality[quality_pos]
            sev_by_slot[slot] = float(severities[quality_pos])
        ranking = sorted(range(n), key=lambda slot: display[slot])
        sid = f"s{k:05d}"
        pair_probs = []
        pos = {slot: p for p, slot in enumerate(ranking)}
        for i in range(n):
            for j in range(i + 1, n):
                gap = abs(pos[i] - pos[j])
                p = planted_pair_prob(gap)
                pair_probs.append((i, j, p) if pos[i] < pos[j] else (i, j, 1.0 - p))
        texts = []
        for a in range(n - 1):
            better, worse = ranking[a], ranking[a + 1]
            texts.append((better, worse, _comparative_text(kind, a)))
        source = _SOURCE_OF_DEGRADATION[kind]
        boxes = None
        t2i = None
        if source == "cropping":
            boxes = []
            for slot in range(n):
                x0, y0, cw, ch = _crop_window(img_size, img_size, sev_by_slot[slot])
                boxes.append((float(x0), float(y0), float(x0 + cw), float(y0 + ch)))
        elif source == "aigc":
            t2i = [float(x) for x in rng.uniform(0.75, 1.0, size=n)]
        record = SeriesRecord(
            series_id=sid,
            source=source,
            images=[f"images/{sid}_{i}.ppm" for i in range(n)],
            gt_ranking=ranking,
            pair_probs=pair_probs,
            texts=texts,
            boxes=boxes,
            t2i_scores=t2i,
        )
        record.validate(f"{sid}: ")
        out.append(GeneratedSeries(record, images, sev_by_slot, kind))
    return out


def score_distribution(severity: float, sigma: float = 1.2) -> list[float]:
    """Ground-truth 10-bin distribution: Gaussian centered at 9 - 8*severity,
    integrated over unit bins with tail mass folded into the end bins."""
    mu = 9.0 - 8.0 * severity
    edges = np.concatenate(([-np.inf], np.arange(1.5, 10.0), [np.inf]))
    cdf = 0.5 * (1.0 + erf((edges - mu) / (sigma * math.sqrt(2.0))))
    w = np.diff(cdf)
    w /= w.sum()
    return [float(x) for x in w]


def synth_coarse(
    seed: int, n: int, img_size: int = 64, menu: tuple[str, ...] = DEGRADATIONS
) -> list[tuple[CoarseRecord, ImageBuf]]:
    """Independent images with one random degradation at uniform severity."""
    if n < 1:
        raise DataError("n must be >= 1")
    out = []
    for k in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0, k]))
        kind = menu[int(rng.integers(0, len(menu)))]
        severity = float(rng.uniform(0.0, 1.0))
        base = base_image(int(rng.integers(0, 2 ** 31)), img_size, img_size)
        img = apply_degradation(base, kind, severity, seed=int(rng.integers(0, 2 ** 31)))
        rec = CoarseRecord(image=f"images/c{k:05d}.ppm", dist=score_distribution(severity))
        rec.validate(f"c{k:05d}: ")
        out.append((rec, img))
    return out


def synth_votes(
    generated: list[GeneratedSeries], seed: int,
    annotators: int = 10, flip_prob: float = 0.1,
) -> list[VoteRow]:
    """Simulated pairwise annotation: each annotator flips the planted
    preference independently with `flip_prob`; no ties."""
    rows = []
    for gidx, gs in enumerate(generated):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0, gidx]))
        pos = {slot: p for p, slot in enumerate(gs.record.gt_ranking)}
        n = len(gs.record.images)
        for i in range(n):
            for j in range(i + 1, n):
                true_i_wins = pos[i] < pos[j]
                flips = rng.random(annotators) < flip_prob
                votes_i = int(np.sum(flips != true_i_wins))
                rows.append(VoteRow(gs.record.series_id, i, j,
                                    votes_i, annotators - votes_i, 0))
    return rows


# ---------------------------------------------------------------------------
# dataset writers

def write_fine_dataset(out_dir, generated: list[GeneratedSeries]) -> str:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    for gs in generated:
        for rel, img in zip(gs.record.images, gs.images):
            with open(os.path.join(out_dir, rel), "wb") as fh:
                fh.write(encode_image(img, fmt="ppm"))
    manifest = os.path.join(out_dir, "series.jsonl")
    write_manifest(manifest, [gs.record for gs in generated])
    return manifest


def write_coarse_dataset(out_dir, items: list[tuple[CoarseRecord, ImageBuf]]) -> str:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    for rec, img in items:
        with open(os.path.join(out_dir, rec.image), "wb") as fh:
            fh.write(encode_image(img, fmt="ppm"))
    manifest = os.path.join(out_dir, "coarse.jsonl")
    write_manifest(manifest, [rec for rec, _ in items])
    return manifest


def write_votes(out_dir, rows: list[VoteRow]) -> str:
    manifest = os.path.join(out_dir, "votes.jsonl")
    write_manifest(manifest, rows)
    return manifest
