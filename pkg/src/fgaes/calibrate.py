"""Rank calibration: annotator votes -> preference probabilities ->
conflict-checked global rankings per series.

Ambiguous pairs (probability near 0.5) are filtered before ranking. The
canonical ranking is a priority topological order of the majority graph:
among currently source nodes, the best (Copeland score, summed preference,
index) wins. On complete acyclic tournaments this reduces to the plain
Copeland order, and on sparse acyclic graphs it stays consistent with every
kept pair. Cycles are reported as conflicts with a witnessing cycle. A
Bradley-Terry fit over vote counts serves as an independent ranking oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CalibrateError",
    "PairVoteRecord",
    "CalibratedSeries",
    "BtFitResult",
    "pair_pref_prob",
    "filter_ambiguous",
    "derive_ranking",
    "bt_fit",
    "calibrate_series",
]

DEFAULT_AMBIGUITY_BAND = 0.15


class CalibrateError(Exception):
    pass


@dataclass(frozen=True)
class PairVoteRecord:
    series_id: str
    i: int
    j: int
    votes_i: int
    votes_j: int
    votes_tie: int = 0

    def __post_init__(self):
        if min(self.votes_i, self.votes_j, self.votes_tie) < 0:
            raise CalibrateError("negative vote count")
        if self.total < 1:
            raise CalibrateError(f"pair ({self.i},{self.j}) has no votes")
        if self.i == self.j:
            raise CalibrateError(f"self-pair ({self.i},{self.j})")

    @property
    def total(self) -> int:
        return self.votes_i + self.votes_j + self.votes_tie


@dataclass
class CalibratedSeries:
    series_id: str
    kept_pairs: dict[tuple[int, int], float]
    ranking: list[int] | None
    conflict_cycle: list[int] | None = None
    dropped_images: list[int] = field(default_factory=list)
    dropped_reason: str | None = None  # set when the whole series is dropped

    @property
    def is_conflict(self) -> bool:
        return self.conflict_cycle is not None


def pair_pref_prob(rec: PairVoteRecord) -> float:
    """P(i beats j): ties split half-half into the probability."""
    return (rec.votes_i + 0.5 * rec.votes_tie) / rec.total


def filter_ambiguous(
    pairs: dict[tuple[int, int], float], band: float = DEFAULT_AMBIGUITY_BAND
) -> tuple[dict[tuple[int, int], float], dict[tuple[int, int], float]]:
    """Drop pairs whose probability sits within `band` of 0.5."""
    if not 0.0 <= band < 0.5:
        raise CalibrateError(f"band must be in [0, 0.5), got {band}")
    kept, dropped = {}, {}
    for key, p in pairs.items():
        (dropped if abs(p - 0.5) < band else kept)[key] = p
    return kept, dropped


def _find_cycle(adj: dict[int, list[int]], nodes: list[int]) -> list[int] | None:
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {u: WHITE for u in nodes}
    stack_path: list[int] = []

    def dfs(u):
        color[u] = GRAY
        stack_path.append(u)
        for v in adj.get(u, ()):
            if color[v] == GRAY:
                return stack_path[stack_path.index(v):]
            if color[v] == WHITE:
                found = dfs(v)
                if found is not None:
                    return found
        color[u] = BLACK
        stack_path.pop()
        return None

    for u in nodes:
        if color[u] == WHITE:
            cycle = dfs(u)
            if cycle is not None:
                return cycle
    return None


def derive_ranking(
    series_id: str, kept_pairs: dict[tuple[int, int], float], n: int
) -> CalibratedSeries:
    """Global ranking from filtered pairwise probabilities, or a conflict.

    Images touching no kept pair are removed as indistinguishable. Edges run
    from the preferred image; an acyclic graph yields the priority
    topological order described in the module docstring.
    """
    probs: dict[tuple[int, int], float] = {}
    for (i, j), p in kept_pairs.items():
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise CalibrateError(f"bad pair ({i},{j}) for series of {n} images")
        probs[(i, j)] = p
        probs.setdefault((j, i), 1.0 - p)

    touched = sorted({i for i, _ in probs} | {j for _, j in probs})
    dropped = [k for k in range(n) if k not in touched]
    if len(touched) < 2:
        return CalibratedSeries(
            series_id, dict(kept_pairs), ranking=None,
            dropped_images=dropped, dropped_reason="fewer than 2 distinguishable images",
        )

    adj: dict[int, list[int]] = {u: [] for u in touched}
    indeg = {u: 0 for u in touched}
    wins = {u: 0 for u in touched}
    losses = {u: 0 for u in touched}
    pref_sum = {u: 0.0 for u in touched}
    for (i, j), p in probs.items():
        pref_sum[i] += p
        if p > 0.5:
            adj[i].append(j)
            indeg[j] += 1
            wins[i] += 1
            losses[j] += 1
    for u in adj:
        adj[u].sort()

    cycle = _find_cycle(adj, touched)
    if cycle is not None:
        return CalibratedSeries(
            series_id, dict(kept_pairs), ranking=None,
            conflict_cycle=cycle, dropped_images=dropped,
        )

    def priority(u):
        return (-(wins[u] - losses[u]), -pref_sum[u], u)

    ranking: list[int] = []
    ready = sorted((u for u in touched if indeg[u] == 0), key=priority)
    indeg = dict(indeg)
    while ready:
        u = ready.pop(0)
        ranking.append(u)
        for v in adj[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
        ready.sort(key=priority)
    return CalibratedSeries(
        series_id, dict(kept_pairs), ranking=ranking, dropped_images=dropped
    )


def calibrate_series(
    records: list[PairVoteRecord], n: int, band: float = DEFAULT_AMBIGUITY_BAND
) -> CalibratedSeries:
    """Votes -> probabilities -> ambiguity filter -> ranking, for one series."""
    if not records:
        raise CalibrateError("no vote records")
    sid = records[0].series_id
    pairs: dict[tuple[int, int], float] = {}
    for rec in records:
        if rec.series_id != sid:
            raise CalibrateError(f"mixed series ids {sid!r} and {rec.series_id!r}")
        key = (rec.i, rec.j)
        if key in pairs or (rec.j, rec.i) in pairs:
            raise CalibrateError(f"duplicate pair {key} in series {sid!r}")
        pairs[key] = pair_pref_prob(rec)
    kept, _ = filter_ambiguous(pairs, band)
    return derive_ranking(sid, kept, n)


@dataclass
class BtFitResult:
    scores: np.ndarray  # per-image strength, zero-sum per component
    components: list[list[int]]
    iterations: int
    converged: bool
    disconnected: bool
    log_likelihood: float
    ll_history: list[float] = field(default_factory=list)


def _bt_loglik(scores: np.ndarray, wins: np.ndarray) -> float:
    ll = 0.0
    n = len(scores)
    for i in range(n):
        for j in range(n):
            if wins[i, j] > 0:
                d = scores[i] - scores[j]
                ll += wins[i, j] * (d - math.log1p(math.exp(d)) if d < 30 else 0.0)
    return ll


def bt_fit(
    records: list[PairVoteRecord], n: int, iters: int = 1000, tol: float = 1e-8
) -> BtFitResult:
    """Bradley-Terry strengths via minorize-maximize on vote counts.

    Ties contribute half a win to each side. Disconnected comparison graphs
    are fit per connected component (flagged); scores are normalized to sum
    to zero within each component.
    """
    wins = np.zeros((n, n))
    for rec in records:
        w = rec.votes_i + 0.5 * rec.votes_tie
        l = rec.votes_j + 0.5 * rec.votes_tie
        wins[rec.i, rec.j] += w
        wins[rec.j, rec.i] += l

    games = wins + wins.T
    # connected components of the comparison graph
    seen = [False] * n
    components: list[list[int]] = []
    for start in range(n):
        if seen[start]:
            continue
        comp, stack = [], [start]
        seen[start] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in range(n):
                if games[u, v] > 0 and not seen[v]:
                    seen[v] = True
                    stack.append(v)
        components.append(sorted(comp))

    pi = np.ones(n)
    iterations = 0
    converged = False
    history: list[float] = []
    for iterations in range(1, iters + 1):
        old_scores = np.log(pi)
        for comp in components:
            for i in comp:
                num = wins[i].sum()
                den = 0.0
                for j in comp:
                    if games[i, j] > 0:
                        den += games[i, j] / (pi[i] + pi[j])
                if den > 0 and num > 0:
                    pi[i] = num / den
                elif den > 0:
                    pi[i] = min(pi[i], 1e-12)  # never wins: push to the floor
        # zero-sum gauge per component (likelihood-invariant)
        log_pi = np.log(np.maximum(pi, 1e-300))
        for comp in components:
            log_pi[comp] -= log_pi[comp].mean()
        pi = np.exp(log_pi)
        history.append(_bt_loglik(log_pi, wins))
        if np.max(np.abs(log_pi - old_scores)) < tol:
            converged = True
            break

    scores = np.log(pi)
    return BtFitResult(
        scores=scores,
        components=components,
        iterations=iterations,
        converged=converged,
        disconnected=len(components) > 1,
        log_likelihood=history[-1] if history else _bt_loglik(scores, wins),
        ll_history=history,
    )
