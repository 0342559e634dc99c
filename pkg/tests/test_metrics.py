import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from fgaes.metrics import (
    MetricsError,
    build_report,
    corr,
    pair_metrics,
    rankdata,
    series_metrics,
    spearman,
)


def test_rankdata_average_ties():
    assert np.array_equal(rankdata([3.0, 1.0, 2.0]), [3, 1, 2])
    assert np.array_equal(rankdata([1.0, 2.0, 2.0, 3.0]), [1, 2.5, 2.5, 4])


def test_perfect_predictions():
    scores = {"a": [3.0, 2.0, 1.0]}
    ranks = {"a": [0, 1, 2]}
    assert pair_metrics(scores, ranks) == (1.0, 1.0)
    s_acc, s_srcc = series_metrics(scores, ranks)
    assert (s_acc, s_srcc) == (1.0, 1.0)


def test_all_ties_score_zero_acc():
    scores = {"a": [1.0, 1.0, 1.0]}
    ranks = {"a": [0, 1, 2]}
    acc, f1 = pair_metrics(scores, ranks)
    assert acc == 0.0
    assert f1 == 0.0
    s_acc, _ = series_metrics(scores, ranks)
    assert s_acc == 0.0


def test_pair_metrics_hand_count():
    # 3 series of length 2: two pairs right, one wrong -> acc 2/3
    scores = {"a": [2.0, 1.0], "b": [5.0, 4.0], "c": [0.0, 1.0]}
    ranks = {"a": [0, 1], "b": [0, 1], "c": [0, 1]}
    acc, _ = pair_metrics(scores, ranks)
    assert acc == pytest.approx(2 / 3, abs=1e-9)


def test_reversed_predictions():
    scores = {"a": [1.0, 2.0, 3.0], "b": [1.0, 2.0]}
    ranks = {"a": [0, 1, 2], "b": [0, 1]}
    s_acc, s_srcc = series_metrics(scores, ranks)
    assert s_acc == 0.0
    assert s_srcc == pytest.approx(-1.0, abs=1e-12)


def test_series_metrics_weighted_arithmetic():
    # n=2 series correct (rho 1); n=4 series wrong-best with rho 0.8
    scores = {"a": [2.0, 1.0], "b": [3.0, 4.0, 2.0, 1.0]}
    ranks = {"a": [0, 1], "b": [0, 1, 2, 3]}
    rho_b = spearman([3.0, 4.0, 2.0, 1.0], [4, 3, 2, 1])
    assert rho_b == pytest.approx(0.8, abs=1e-12)
    s_acc, s_srcc = series_metrics(scores, ranks)
    assert s_acc == pytest.approx(2 / 6, abs=1e-9)
    assert s_srcc == pytest.approx((2 * 1.0 + 4 * 0.8) / 6, abs=1e-9)


def test_series_weight_pairs_flag():
    scores = {"a": [2.0, 1.0], "b": [3.0, 4.0, 2.0, 1.0]}
    ranks = {"a": [0, 1], "b": [0, 1, 2, 3]}
    s_acc, _ = series_metrics(scores, ranks, weight_pairs=True)
    assert s_acc == pytest.approx(1 / 4, abs=1e-9)  # weights 1 and 3


def test_non_unique_argmax_is_miss():
    scores = {"a": [2.0, 2.0, 1.0]}
    ranks = {"a": [0, 1, 2]}
    s_acc, _ = series_metrics(scores, ranks)
    assert s_acc == 0.0


def test_corr_basics():
    gt = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    assert corr(gt, gt) == (1.0, 1.0)
    srcc, plcc = corr(-gt, gt)
    assert srcc == pytest.approx(-1.0)
    assert plcc == pytest.approx(-1.0)
    with pytest.raises(MetricsError):
        corr(np.ones(5), gt)
    with pytest.raises(MetricsError):
        corr(gt[:2], gt[:2])


def test_corr_matches_scipy_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(25):
        a = rng.integers(0, 5, size=12).astype(float)
        b = rng.standard_normal(12)
        if np.all(a == a[0]):
            continue
        srcc, plcc = corr(a, b)
        assert srcc == pytest.approx(scipy.stats.spearmanr(a, b).statistic, abs=1e-12)
        assert plcc == pytest.approx(scipy.stats.pearsonr(a, b).statistic, abs=1e-12)


def test_rank_metrics_invariant_under_monotone_transforms():
    rng = np.random.default_rng(1)
    scores = {f"s{k}": rng.standard_normal(int(rng.integers(2, 6))).tolist() for k in range(8)}
    ranks = {
        sid: list(np.argsort(-np.asarray(v)).tolist()) if rng.random() < 0.5
        else rng.permutation(len(v)).tolist()
        for sid, v in scores.items()
    }
    base_pair = pair_metrics(scores, ranks)
    base_series = series_metrics(scores, ranks)
    for transform in (lambda x: 3.0 * x + 2.0, np.exp, lambda x: x ** 3 + 0.5 * x):
        mapped = {sid: [float(transform(x)) for x in v] for sid, v in scores.items()}
        assert pair_metrics(mapped, ranks) == pytest.approx(base_pair, abs=1e-12)
        assert series_metrics(mapped, ranks) == pytest.approx(base_series, abs=1e-12)


def test_corr_invariances():
    rng = np.random.default_rng(2)
    pred = rng.standard_normal(20)
    gt = rng.standard_normal(20)
    srcc0, plcc0 = corr(pred, gt)
    srcc1, _ = corr(np.exp(pred), gt)  # srcc under any monotone transform
    assert srcc1 == pytest.approx(srcc0, abs=1e-12)
    _, plcc2 = corr(2.5 * pred + 1.0, gt)  # plcc under positive-affine only
    assert plcc2 == pytest.approx(plcc0, abs=1e-12)


def test_pair_acc_one_iff_s_srcc_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n_series = int(rng.integers(2, 5))
        scores, ranks = {}, {}
        for k in range(n_series):
            n = int(rng.integers(2, 6))
            v = rng.standard_normal(n)
            while len(set(v.tolist())) < n:
                v = rng.standard_normal(n)
            scores[f"s{k}"] = v.tolist()
            ranks[f"s{k}"] = (
                np.argsort(-v).tolist() if rng.random() < 0.5 else rng.permutation(n).tolist()
            )
        acc, _ = pair_metrics(scores, ranks)
        _, s_srcc = series_metrics(scores, ranks)
        assert (acc == 1.0) == (s_srcc == pytest.approx(1.0, abs=1e-12))


def test_build_report_structure():
    scores = {"a": [2.0, 1.0], "b": [2.0, 1.0], "c": [1.0, 2.0]}
    ranks = {"a": [0, 1], "b": [0, 1], "c": [0, 1]}
    sources = {"a": "natural", "b": "aigc", "c": "natural"}
    rng = np.random.default_rng(4)
    gt = rng.standard_normal(10)
    report = build_report(scores, ranks, sources, coarse_pred=gt * 2 + 1, coarse_gt=gt)
    assert set(report.per_source) == {"natural", "aigc"}
    assert report.per_source["aigc"]["acc"] == 1.0
    assert report.per_source["natural"]["acc"] == 0.5
    assert report.coarse["srcc"] == pytest.approx(1.0)
    assert report.counts["overall"] == 3
    table = report.to_table()
    assert "overall" in table and "natural" in table
    assert "srcc=1.0000" in table
    import json

    parsed = json.loads(report.to_json())
    assert parsed["overall"]["acc"] == pytest.approx(2 / 3)
    assert parsed["notes"]


def test_missing_scores_rejected():
    with pytest.raises(MetricsError):
        pair_metrics({"a": [1.0]}, {"a": [0, 1]})
    with pytest.raises(MetricsError):
        series_metrics({}, {"a": [0, 1]})


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=12, unique=True))
@settings(max_examples=50, deadline=None)
def test_spearman_matches_scipy_hypothesis(values):
    gt = list(range(len(values)))
    ours = spearman(values, gt)
    ref = scipy.stats.spearmanr(values, gt).statistic
    assert ours == pytest.approx(ref, abs=1e-10)
