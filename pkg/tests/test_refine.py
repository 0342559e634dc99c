import numpy as np
import pytest

from fgaes.imaging import Box, ImageBuf
from fgaes.refine import (
    RefineError,
    descriptor_similarity,
    generic_scores,
    iou_filter,
    orientation_histogram,
    t2i_filter,
)


def textured(seed, w=48, h=48):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    base = 0.5 + 0.25 * np.sin(xx / 4.0 + rng.random()) * np.cos(yy / 6.0)
    return ImageBuf(np.clip(base[:, :, None] + 0.15 * rng.random((h, w, 3)), 0, 1))


def noisy(seed, w=48, h=48):
    rng = np.random.default_rng(seed)
    return ImageBuf(rng.random((h, w, 3)))


def test_identical_images_score_one():
    img = textured(0)
    report = generic_scores([("s0", "natural", [img, img, img])])
    assert all(v == pytest.approx(1.0, abs=1e-9) for v in report.scores.values())
    assert report.removed == []  # cutoff below 1 excludes nothing here


def test_noise_image_has_series_minimum():
    base = textured(1)
    near = ImageBuf(np.clip(base.pixels + 0.02, 0, 1))
    near2 = ImageBuf(np.clip(base.pixels * 0.98, 0, 1))
    outlier = noisy(2)
    report = generic_scores([("s0", "natural", [base, near, outlier, near2])])
    series_scores = {idx: report.scores[("s0", idx)] for idx in range(4)}
    assert min(series_scores, key=series_scores.get) == 2


def test_cutoff_flags_exactly_bottom_30_percent():
    # ten distinct scores -> exactly 3 flagged
    series = []
    rng = np.random.default_rng(3)
    for k in range(2):
        base = textured(20 + k)
        imgs = [base]
        for step in range(1, 5):
            shift = (0.03 + 0.02 * k) * step
            imgs.append(ImageBuf(np.clip(base.pixels + shift * rng.random(base.pixels.shape), 0, 1)))
        series.append((f"s{k}", "natural", imgs))
    report = generic_scores(series, cutoff_fraction=0.30)
    values = sorted(report.scores.values())
    assert len(values) == len(set(values)) == 10
    assert len(report.removed) == 3
    flagged = {report.scores[(r["series_id"], r["index"])] for r in report.removed}
    assert flagged == set(values[:3])
    assert all(r["reason"] == "outlier" for r in report.removed)


def test_singleton_series_rejected():
    with pytest.raises(RefineError):
        generic_scores([("s0", "natural", [textured(4)])])


def test_generic_scores_permutation_invariant():
    imgs = [textured(30), textured(31), textured(32)]
    r1 = generic_scores([("s0", "natural", imgs)], cutoff_fraction=0.3)
    r2 = generic_scores([("s0", "natural", imgs[::-1])], cutoff_fraction=0.3)
    for i in range(3):
        assert r1.scores[("s0", i)] == pytest.approx(r2.scores[("s0", 2 - i)], abs=1e-12)


def test_per_source_cutoffs():
    series = [
        ("a", "natural", [textured(40), textured(41)]),
        ("b", "cropping", [textured(42), textured(43)]),
    ]
    report = generic_scores(series, per_source=True)
    assert set(report.cutoffs) == {"natural", "cropping"}


def test_orientation_histogram_properties():
    img = textured(50)
    h = orientation_histogram(img)
    assert h.shape == (36,)
    assert np.linalg.norm(h) == pytest.approx(1.0)
    flat = ImageBuf(np.full((16, 16, 3), 0.5))
    assert np.array_equal(orientation_histogram(flat), np.zeros(36))
    assert descriptor_similarity(flat, flat) == 1.0
    assert descriptor_similarity(flat, img) == 0.0


def test_iou_filter_duplicate_dropped():
    b = Box(0, 0, 10, 10)
    assert iou_filter([b, b]) == [0]


def test_iou_filter_disjoint_second_dropped():
    assert iou_filter([Box(0, 0, 5, 5), Box(20, 20, 30, 30)]) == [0]


def test_iou_filter_band_all_kept():
    # pairwise IoU 0.5: two 10x10 boxes overlapping two-thirds horizontally
    a = Box(0, 0, 9, 10)
    b = Box(3, 0, 12, 10)
    assert iou_filter([a, b]) == [0, 1]


def test_iou_filter_idempotent():
    rng = np.random.default_rng(5)
    boxes = []
    for _ in range(12):
        x0, y0 = rng.uniform(0, 20, size=2)
        w, h = rng.uniform(2, 15, size=2)
        boxes.append(Box(x0, y0, x0 + w, y0 + h))
    kept = iou_filter(boxes)
    again = iou_filter([boxes[k] for k in kept])
    assert again == list(range(len(kept)))


def test_t2i_passthrough():
    assert t2i_filter([0.9, 0.4, 0.75], threshold=0.7) == [0, 2]
