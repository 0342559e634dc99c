"""Training objectives: distribution EMD, comparative-text alignment,
Bradley-Terry pairwise probability, ListMLE rank regression, and the
alternating joint combination. All are built from the closed op set so the
finite-difference checker covers them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndiff import Tape, Tensor, constant

__all__ = [
    "LossError",
    "TrainLossConfig",
    "emd_loss",
    "ctalign_loss",
    "bt_prob",
    "listmle_loss",
    "pairwise_logistic_loss",
    "joint_loss",
]


class LossError(Exception):
    pass


@dataclass(frozen=True)
class TrainLossConfig:
    lambda_align: float = 10.0
    emd_r: float = 2.0
    literal_cosine: bool = False  # minimize raw cos(.,.) instead of 1 - cos

    def __post_init__(self):
        if self.lambda_align < 0:
            raise LossError("lambda_align must be >= 0")


def _check_dist(name: str, values: np.ndarray):
    if values.shape != (10,):
        raise LossError(f"{name}: expected 10 bins, got shape {values.shape}")
    if np.any(values < -1e-12) or abs(values.sum() - 1.0) > 1e-6:
        raise LossError(f"{name}: not a probability distribution (sum {values.sum():.6f})")


_CDF_MATRIX = np.tril(np.ones((10, 10)))


def emd_loss(tape: Tape, pred: Tensor, gt, r: float = 2.0) -> Tensor:
    """Distance between cumulative 10-bin distributions:
    ((1/10) sum_k |CDF_pred(k) - CDF_gt(k)|^r)^(1/r)."""
    gt_t = gt if isinstance(gt, Tensor) else constant(gt)
    _check_dist("pred", pred.data)
    _check_dist("gt", gt_t.data)
    diff = tape.sub(
        tape.matmul(constant(_CDF_MATRIX), tape.reshape(pred, (10, 1))),
        tape.matmul(constant(_CDF_MATRIX), tape.reshape(gt_t, (10, 1))),
    )
    powered = tape.power(tape.power(diff, 2.0), r / 2.0)  # |d|^r without abs
    return tape.power(tape.mean(powered), 1.0 / r)


def ctalign_loss(tape: Tape, ev_x: Tensor, ev_y: Tensor, et, literal_cosine: bool = False) -> Tensor:
    """Align the visual embedding difference with the comparative-text
    embedding: 1 - cos(ev_x - ev_y, et), stabilized in the denominator."""
    et_t = et if isinstance(et, Tensor) else constant(et)
    if et_t.shape != ev_x.shape or ev_x.shape != ev_y.shape:
        raise LossError(f"embedding shapes differ: {ev_x.shape}, {ev_y.shape}, {et_t.shape}")
    if float(np.linalg.norm(et_t.data)) == 0.0:
        raise LossError("zero text embedding")
    cos = tape.cosine_similarity(tape.sub(ev_x, ev_y), et_t)
    if literal_cosine:
        return cos
    return tape.sub(constant(1.0), cos)


def bt_prob(tape: Tape, score_x, score_y) -> Tensor:
    """P(x beats y) = e^{sx} / (e^{sx} + e^{sy}), max-subtraction stabilized."""
    sx = score_x if isinstance(score_x, Tensor) else constant(score_x)
    sy = score_y if isinstance(score_y, Tensor) else constant(score_y)
    if sx.shape != () or sy.shape != ():
        raise LossError("bt_prob expects scalar scores")
    pair = tape.concat([tape.reshape(sx, (1,)), tape.reshape(sy, (1,))])
    return tape.reshape(tape.slice(tape.softmax(pair), (slice(0, 1),)), ())


def _validate_ranking(ranking, n: int):
    if sorted(ranking) != list(range(n)):
        raise LossError(f"ranking {list(ranking)} is not a permutation of 0..{n - 1}")


def listmle_loss(tape: Tape, scores: Tensor, ranking) -> Tensor:
    """Negative log Plackett-Luce likelihood of `ranking` (best first) under
    `scores`, log-sum-exp stabilized."""
    if scores.ndim != 1:
        raise LossError(f"scores must be 1-D, got shape {scores.shape}")
    n = scores.shape[0]
    _validate_ranking(ranking, n)
    if n == 1:
        return tape.mul(tape.sum(scores), 0.0)
    perm = np.zeros((n, n))
    for pos, idx in enumerate(ranking):
        perm[pos, idx] = 1.0
    ordered = tape.reshape(tape.matmul(constant(perm), tape.reshape(scores, (n, 1))), (n,))
    terms = []
    for i in range(n - 1):  # last suffix contributes log(e^s / e^s) = 0
        suffix = tape.slice(ordered, (slice(i, n),))
        picked = tape.slice(ordered, (slice(i, i + 1),))
        lse = tape.logsumexp(suffix)
        terms.append(tape.reshape(tape.sub(tape.reshape(lse, (1,)), picked), (1,)))
    return tape.sum(tape.concat(terms))


def pairwise_logistic_loss(tape: Tape, scores: Tensor, ranking) -> Tensor:
    """Mean -log P(better beats worse) over all ground-truth-ordered pairs;
    the direct ranking objective used when ListMLE is ablated."""
    if scores.ndim != 1:
        raise LossError(f"scores must be 1-D, got shape {scores.shape}")
    n = scores.shape[0]
    _validate_ranking(ranking, n)
    if n < 2:
        raise LossError("need at least two items for pairwise loss")
    terms = []
    for a in range(n):
        for b in range(a + 1, n):
            p = bt_prob(
                tape,
                tape.reshape(tape.slice(scores, (slice(ranking[a], ranking[a] + 1),)), ()),
                tape.reshape(tape.slice(scores, (slice(ranking[b], ranking[b] + 1),)), ()),
            )
            terms.append(tape.reshape(tape.neg(tape.log(p)), (1,)))
    return tape.mean(tape.concat(terms))


def joint_loss(
    tape: Tape,
    delta: int,
    align: Tensor | None = None,
    rankreg: Tensor | None = None,
    emd: Tensor | None = None,
    cfg: TrainLossConfig = TrainLossConfig(),
) -> Tensor:
    """Alternating objective: delta * (lambda*align + rankreg) + (1-delta) * emd."""
    if delta not in (0, 1):
        raise LossError(f"delta must be 0 or 1, got {delta}")
    if delta == 1:
        if rankreg is None:
            raise LossError("fine step requires a rank-regression term")
        if align is None:
            if cfg.lambda_align != 0.0:
                raise LossError("fine step requires an alignment term when lambda > 0")
            return rankreg
        return tape.add(tape.mul(align, cfg.lambda_align), rankreg)
    if emd is None:
        raise LossError("coarse step requires an EMD term")
    return emd
