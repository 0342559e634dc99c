import itertools
import math

import numpy as np
import pytest

from fgaes.calibrate import (
    CalibrateError,
    PairVoteRecord,
    bt_fit,
    calibrate_series,
    derive_ranking,
    filter_ambiguous,
    pair_pref_prob,
)


def rec(i, j, vi, vj, vt=0, sid="s"):
    return PairVoteRecord(sid, i, j, vi, vj, vt)


def kendall_tau(order_a, order_b):
    """Brute-force rank correlation between two orderings of the same items."""
    pos_a = {x: k for k, x in enumerate(order_a)}
    pos_b = {x: k for k, x in enumerate(order_b)}
    items = list(order_a)
    conc = disc = 0
    for x, y in itertools.combinations(items, 2):
        s = (pos_a[x] - pos_a[y]) * (pos_b[x] - pos_b[y])
        if s > 0:
            conc += 1
        else:
            disc += 1
    return (conc - disc) / (conc + disc)


def test_pair_pref_prob_values():
    assert pair_pref_prob(rec(0, 1, 5, 5)) == 0.5
    assert pair_pref_prob(rec(0, 1, 9, 1)) == pytest.approx(0.9)
    assert pair_pref_prob(rec(0, 1, 4, 2, 4)) == pytest.approx(0.6)


def test_pair_pref_prob_complement_exact():
    r = rec(0, 1, 7, 2, 1)
    swapped = rec(1, 0, 2, 7, 1)
    assert pair_pref_prob(r) + pair_pref_prob(swapped) == 1.0


def test_vote_record_validation():
    with pytest.raises(CalibrateError):
        rec(0, 1, 0, 0, 0)
    with pytest.raises(CalibrateError):
        rec(2, 2, 5, 5)
    with pytest.raises(CalibrateError):
        PairVoteRecord("s", 0, 1, -1, 2, 0)


def test_filter_ambiguous_band_arithmetic():
    pairs = {(0, 1): 0.5, (0, 2): 0.9, (1, 2): 0.6}
    kept, dropped = filter_ambiguous(pairs, band=0.15)
    assert set(kept) == {(0, 2)}
    assert set(dropped) == {(0, 1), (1, 2)}
    kept, dropped = filter_ambiguous(pairs, band=0.05)
    assert set(kept) == {(0, 2), (1, 2)}
    with pytest.raises(CalibrateError):
        filter_ambiguous(pairs, band=0.5)


def test_derive_ranking_transitive_tournament():
    out = derive_ranking("s", {(0, 1): 0.9, (1, 2): 0.8, (0, 2): 0.7}, 3)
    assert out.ranking == [0, 1, 2]
    assert not out.is_conflict


def test_derive_ranking_condorcet_cycle():
    out = derive_ranking("s", {(0, 1): 0.9, (1, 2): 0.9, (2, 0): 0.9}, 3)
    assert out.ranking is None
    assert out.is_conflict
    assert sorted(out.conflict_cycle) == [0, 1, 2]


def test_derive_ranking_two_images():
    out = derive_ranking("s", {(0, 1): 0.8}, 2)
    assert out.ranking == [0, 1]


def test_derive_ranking_untouched_images_dropped():
    out = derive_ranking("s", {(0, 2): 0.8}, 4)
    assert out.ranking == [0, 2]
    assert out.dropped_images == [1, 3]


def test_derive_ranking_single_survivor_drops_series():
    out = derive_ranking("s", {}, 3)
    assert out.ranking is None
    assert out.dropped_reason is not None
    assert not out.is_conflict


def test_derive_ranking_consistent_on_sparse_graphs():
    # a beats b; b beats c, d, e; Copeland alone would rank b first
    pairs = {(0, 1): 0.8, (1, 2): 0.9, (1, 3): 0.9, (1, 4): 0.9}
    out = derive_ranking("s", pairs, 5)
    order = {img: pos for pos, img in enumerate(out.ranking)}
    for (i, j), p in pairs.items():
        if p > 0.5:
            assert order[i] < order[j]


def test_derive_ranking_consistency_randomized():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(3, 7))
        true = rng.permutation(n).tolist()
        pos = {img: k for k, img in enumerate(true)}
        pairs = {}
        for i, j in itertools.combinations(range(n), 2):
            if rng.random() < 0.25:
                continue  # simulate filtered pairs
            p = 0.75 + 0.2 * rng.random()
            pairs[(i, j)] = p if pos[i] < pos[j] else 1.0 - p
        out = derive_ranking("s", pairs, n)
        assert not out.is_conflict
        order = {img: k for k, img in enumerate(out.ranking)}
        for (i, j), p in pairs.items():
            better, worse = (i, j) if p > 0.5 else (j, i)
            assert order[better] < order[worse]


def test_calibrate_series_end_to_end():
    records = [rec(0, 1, 9, 1), rec(1, 2, 8, 2), rec(0, 2, 9, 0, 1)]
    out = calibrate_series(records, 3)
    assert out.ranking == [0, 1, 2]
    records = [rec(0, 1, 5, 5), rec(1, 2, 6, 4), rec(0, 2, 5, 4, 1)]
    out = calibrate_series(records, 3)
    assert out.ranking is None  # everything ambiguous at default band


def test_calibrate_series_rejects_duplicates():
    with pytest.raises(CalibrateError):
        calibrate_series([rec(0, 1, 9, 1), rec(1, 0, 1, 9)], 2)


def test_bt_fit_two_items_closed_form():
    out = bt_fit([rec(0, 1, 8, 2)], 2)
    gap = out.scores[0] - out.scores[1]
    assert gap == pytest.approx(math.log(4.0), abs=1e-4)
    assert out.converged


def test_bt_fit_symmetric_votes_all_zero():
    records = [rec(0, 1, 5, 5), rec(1, 2, 5, 5), rec(0, 2, 5, 5)]
    out = bt_fit(records, 3)
    assert np.allclose(out.scores, 0.0, atol=1e-8)


def test_bt_fit_loglik_nondecreasing():
    rng = np.random.default_rng(1)
    records = []
    for i, j in itertools.combinations(range(5), 2):
        vi = int(rng.integers(1, 10))
        records.append(rec(i, j, vi, 10 - vi))
    out = bt_fit(records, 5)
    diffs = np.diff(out.ll_history)
    assert np.all(diffs >= -1e-9)


def test_bt_fit_disconnected_components_flagged():
    out = bt_fit([rec(0, 1, 8, 2), rec(2, 3, 7, 3)], 4)
    assert out.disconnected
    assert len(out.components) == 2
    assert out.scores[0] > out.scores[1]
    assert out.scores[2] > out.scores[3]


def test_bt_fit_agrees_with_derive_ranking_on_transitive_instances():
    rng = np.random.default_rng(2)
    agreements = 0
    for _ in range(50):
        n = int(rng.integers(3, 6))
        true = rng.permutation(n).tolist()
        pos = {img: k for k, img in enumerate(true)}
        records, pairs = [], {}
        for i, j in itertools.combinations(range(n), 2):
            # strength-consistent majorities: closer ranks -> tighter votes
            gap = abs(pos[i] - pos[j])
            vi = 6 + min(4, gap)
            if pos[i] > pos[j]:
                vi = 10 - vi
            records.append(rec(i, j, vi, 10 - vi))
            pairs[(i, j)] = vi / 10.0
        ranked = derive_ranking("s", pairs, n)
        fit = bt_fit(records, n)
        bt_order = sorted(range(n), key=lambda k: -fit.scores[k])
        assert not ranked.is_conflict
        if bt_order == ranked.ranking:
            agreements += 1
    assert agreements == 50


def test_planted_order_recovery():
    """100 series, lengths 2-6, 10 annotators, flip probability 0.1."""
    rng = np.random.default_rng(3)
    taus = []
    conflicts = 0
    for sidx in range(100):
        n = int(rng.integers(2, 7))
        planted = rng.permutation(n).tolist()
        pos = {img: k for k, img in enumerate(planted)}
        records = []
        for i, j in itertools.combinations(range(n), 2):
            true_i_wins = pos[i] < pos[j]
            flips = rng.random(10) < 0.1
            votes_for_i = int(np.sum(flips != true_i_wins))
            records.append(rec(i, j, votes_for_i, 10 - votes_for_i, sid=f"s{sidx}"))
        out = calibrate_series(records, n)
        if out.is_conflict:
            conflicts += 1
            continue
        if out.ranking is None or len(out.ranking) < 2:
            continue
        surviving = [img for img in planted if img in out.ranking]
        taus.append(kendall_tau(surviving, out.ranking))
    assert np.mean(taus) >= 0.95
    assert conflicts < 20
