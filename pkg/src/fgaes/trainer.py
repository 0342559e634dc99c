"""Two-stage training: coarse EMD pretraining, then joint learning that
strictly alternates fine (rank + alignment) and coarse (EMD) steps.

The optimizer is SGD with momentum over one shared velocity buffer whose
coefficient switches per phase, plus decoupled weight decay during the
joint stage only. Every random draw comes from a per-purpose seeded stream,
so identical inputs and seeds give identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import CoarseRecord, SeriesRecord, load_series_images
from .difftoken import DiffTokenConfig, tokenize_diff, tokenize_plain
from .encoder import EncoderConfig, ModelParams, encode, init_params, text_embed
from .imaging import ImageBuf
from .metrics import EvalReport, build_report
from .ndiff import Tape, backward

__all__ = [
    "TrainerError",
    "TrainConfig",
    "FineSeries",
    "CoarseItem",
    "MomentumSGD",
    "load_fine_dataset",
    "load_coarse_dataset",
    "pretrain_coarse",
    "joint_train",
    "train_two_stage",
    "ablation_matrix",
    "predict_series_scores",
    "predict_coarse_scores",
    "evaluate_model",
    "ABLATION_TOGGLES",
]

ABLATION_TOGGLES = (
    "no_fine", "no_coarse", "sequential", "no_difftoken", "no_ctalign", "no_rankreg",
)


class TrainerError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 5e-5  # joint stage only
    coarse_batch: int = 128
    fine_batch_series: int = 16  # ~64 images per fine batch at typical lengths
    pretrain_epochs: int = 3
    joint_epochs: int = 7
    momentum_fine: float = 0.615
    momentum_coarse: float = 0.8
    lambda_align: float = 10.0
    literal_cosine: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise TrainerError("lr must be >= 0")
        for name in ("momentum_fine", "momentum_coarse"):
            m = getattr(self, name)
            if not 0.0 <= m < 1.0:
                raise TrainerError(f"{name} must be in [0, 1), got {m}")


@dataclass
class FineSeries:
    series_id: str
    source: str
    images: list[ImageBuf]
    ranking: list[int]  # best first
    texts: list[tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) < 2:
            raise TrainerError(f"series {self.series_id!r} shorter than 2 images")
        if len(self.images) > 10:
            raise TrainerError(f"series {self.series_id!r} longer than 10 images")


@dataclass
class CoarseItem:
    image: ImageBuf
    dist: np.ndarray


def load_fine_dataset(records: list[SeriesRecord], base_dir) -> list[FineSeries]:
    return [
        FineSeries(
            series_id=rec.series_id,
            source=rec.source,
            images=load_series_images(rec, base_dir),
            ranking=list(rec.gt_ranking),
            texts=list(rec.texts),
        )
        for rec in records
    ]


def load_coarse_dataset(records: list[CoarseRecord], base_dir) -> list[CoarseItem]:
    import os

    from .imaging import decode_image

    items = []
    for rec in records:
        with open(os.path.join(base_dir, rec.image), "rb") as fh:
            items.append(CoarseItem(decode_image(fh.read()), np.asarray(rec.dist)))
    return items


class MomentumSGD:
    """Classic momentum (v = m*v + g; p -= lr*v) over one shared velocity
    buffer; decoupled weight decay is applied separately when requested."""

    def __init__(self, params: ModelParams):
        self.velocity = {p: np.zeros_like(v) for p, v in params.values.items()}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray],
             lr: float, momentum: float, weight_decay: float = 0.0):
        for path, g in grads.items():
            v = self.velocity[path]
            v *= momentum
            v += g
            params.values[path] -= lr * v
            if weight_decay:
                params.values[path] -= lr * weight_decay * params.values[path]


def _grads_by_path(tape: Tape, tp, loss) -> dict[str, np.ndarray]:
    raw = backward(tape, loss)
    return {path: raw[tp.leaf_node(path)].data for path in tp.bound}


def _coarse_loss(tape: Tape, tp, batch_tokens, batch_dists):
    terms = []
    for tokens, dist in zip(batch_tokens, batch_dists):
        _, out = encode(tape, tp, tokens)
        terms.append(tape.reshape(losses.emd_loss(tape, out.dist, dist), (1,)))
    return tape.mean(tape.concat(terms))


def _prep_coarse(items: list[CoarseItem], dt_cfg: DiffTokenConfig):
    """Coarse batches are reference-free; tokenization is deterministic, so
    tokenize once up front."""
    return [tokenize_plain(it.image, dt_cfg) for it in items]


def pretrain_coarse(
    params: ModelParams,
    coarse: list[CoarseItem],
    cfg: TrainConfig,
    dt_cfg: DiffTokenConfig,
    optimizer: MomentumSGD | None = None,
    log: list | None = None,
):
    """Stage one: EMD regression on coarse data, momentum_coarse, no decay."""
    if not coarse:
        raise TrainerError("empty coarse dataset")
    tokens_cache = _prep_coarse(coarse, dt_cfg)
    opt = optimizer or MomentumSGD(params)
    epoch_losses = []
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x10, epoch]))
        order = rng.permutation(len(coarse))
        batch_losses = []
        for lo in range(0, len(order), cfg.coarse_batch):
            idx = order[lo:lo + cfg.coarse_batch]
            tape = Tape()
            tp = params.bind(tape)
            loss = _coarse_loss(
                tape, tp,
                [tokens_cache[k] for k in idx],
                [coarse[k].dist for k in idx],
            )
            grads = _grads_by_path(tape, tp, loss)
            opt.step(params, grads, cfg.lr, cfg.momentum_coarse)
            batch_losses.append(loss.item())
            if log is not None:
                log.append({
                    "step": step, "phase": "coarse", "loss": loss.item(),
                    "components": {"emd": loss.item()},
                })
            step += 1
        epoch_losses.append(float(np.mean(batch_losses)))
    return params, epoch_losses


def _fine_series_loss(tape, tp, series: FineSeries, dt_cfg, cfg: TrainConfig,
                      rng, use_diff: bool, use_ctalign: bool, use_listmle: bool):
    n = len(series.images)
    score_parts = []
    embeds = {}
    for i, img in enumerate(series.images):
        if use_diff and n > 1:
            ref = int(rng.choice([k for k in range(n) if k != i]))
            call_cfg = dataclasses.replace(dt_cfg, seed=int(rng.integers(0, 2 ** 31)))
            tokens = tokenize_diff(img, series.images[ref], call_cfg)
        else:
            call_cfg = dataclasses.replace(dt_cfg, seed=int(rng.integers(0, 2 ** 31)))
            tokens = tokenize_plain(img, call_cfg)
        _, out = encode(tape, tp, tokens)
        score_parts.append(tape.reshape(out.score, (1,)))
        embeds[i] = out.embed
    scores = tape.concat(score_parts)
    if use_listmle:
        rank_loss = losses.listmle_loss(tape, scores, series.ranking)
    else:
        rank_loss = losses.pairwise_logistic_loss(tape, scores, series.ranking)
    align_loss = None
    if use_ctalign and series.texts and cfg.lambda_align > 0.0:
        i, j, text = series.texts[int(rng.integers(0, len(series.texts)))]
        et = text_embed(text, tp.cfg.embed_dim)
        align_loss = losses.ctalign_loss(
            tape, embeds[i], embeds[j], et, literal_cosine=cfg.literal_cosine
        )
    total = losses.joint_loss(
        tape, 1, align=align_loss, rankreg=rank_loss,
        cfg=losses.TrainLossConfig(
            lambda_align=cfg.lambda_align if align_loss is not None else 0.0,
            literal_cosine=cfg.literal_cosine,
        ),
    )
    return total, rank_loss, align_loss


def joint_train(
    params: ModelParams,
    coarse: list[CoarseItem],
    fine: list[FineSeries],
    cfg: TrainConfig,
    dt_cfg: DiffTokenConfig,
    toggles: frozenset[str] = frozenset(),
    optimizer: MomentumSGD | None = None,
    log: list | None = None,
    on_epoch=None,
):
    """Stage two: strictly alternating fine/coarse steps (delta = 1, 0, 1, ...),
    shared-velocity momentum switching per phase, decoupled weight decay."""
    unknown = set(toggles) - set(ABLATION_TOGGLES)
    if unknown:
        raise TrainerError(f"unknown toggles {sorted(unknown)}")
    fine_enabled = "no_fine" not in toggles
    coarse_enabled = "no_coarse" not in toggles and "sequential" not in toggles
    if fine_enabled and not fine:
        raise TrainerError("empty fine dataset (use the no_fine toggle to skip)")
    if coarse_enabled and not coarse:
        raise TrainerError("empty coarse dataset (use the no_coarse toggle to skip)")
    for series in fine:
        if len(series.images) < 2:
            raise TrainerError(f"series {series.series_id!r} shorter than 2 images")

    use_diff = "no_difftoken" not in toggles
    use_ctalign = "no_ctalign" not in toggles
    use_listmle = "no_rankreg" not in toggles

    opt = optimizer or MomentumSGD(params)
    coarse_tokens = _prep_coarse(coarse, dt_cfg) if coarse_enabled else []
    step = 0
    coarse_cursor = 0
    coarse_order: list[int] = []
    coarse_epoch = 0

    def next_coarse_batch():
        nonlocal coarse_cursor, coarse_order, coarse_epoch
        batch = []
        while len(batch) < min(cfg.coarse_batch, len(coarse)):
            if coarse_cursor >= len(coarse_order):
                rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, 0x20, coarse_epoch]))
                coarse_order = rng.permutation(len(coarse)).tolist()
                coarse_cursor = 0
                coarse_epoch += 1
            batch.append(coarse_order[coarse_cursor])
            coarse_cursor += 1
        return batch

    for epoch in range(cfg.joint_epochs):
        if fine_enabled:
            rng_epoch = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 0x30, epoch]))
            fine_order = rng_epoch.permutation(len(fine)).tolist()
            n_fine_steps = math.ceil(len(fine) / cfg.fine_batch_series)
        else:
            fine_order = []
            n_fine_steps = math.ceil(len(coarse) / cfg.coarse_batch) if coarse_enabled else 0

        for step_in_epoch in range(n_fine_steps):
            if fine_enabled:
                lo = step_in_epoch * cfg.fine_batch_series
                batch_series = [fine[k] for k in fine_order[lo:lo + cfg.fine_batch_series]]
                rng_step = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, 0x40, epoch, step_in_epoch]))
                tape = Tape()
                tp = params.bind(tape)
                totals, ranks, aligns = [], [], []
                for series in batch_series:
                    total, rank_loss, align_loss = _fine_series_loss(
                        tape, tp, series, dt_cfg, cfg, rng_step,
                        use_diff, use_ctalign, use_listmle,
                    )
                    totals.append(tape.reshape(total, (1,)))
                    ranks.append(rank_loss.item())
                    aligns.append(align_loss.item() if align_loss is not None else None)
                loss = tape.mean(tape.concat(totals))
                grads = _grads_by_path(tape, tp, loss)
                opt.step(params, grads, cfg.lr, cfg.momentum_fine, cfg.weight_decay)
                if log is not None:
                    components = {"rankreg": float(np.mean(ranks))}
                    observed = [a for a in aligns if a is not None]
                    if observed:
                        components["align"] = float(np.mean(observed))
                    log.append({
                        "step": step, "phase": "fine", "loss": loss.item(),
                        "components": components,
                    })
                step += 1

            if coarse_enabled:
                idx = next_coarse_batch()
                tape = Tape()
                tp = params.bind(tape)
                loss = _coarse_loss(
                    tape, tp,
                    [coarse_tokens[k] for k in idx],
                    [coarse[k].dist for k in idx],
                )
                grads = _grads_by_path(tape, tp, loss)
                opt.step(params, grads, cfg.lr, cfg.momentum_coarse, cfg.weight_decay)
                if log is not None:
                    log.append({
                        "step": step, "phase": "coarse", "loss": loss.item(),
                        "components": {"emd": loss.item()},
                    })
                step += 1
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, log


def train_two_stage(
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    dt_cfg: DiffTokenConfig,
    coarse: list[CoarseItem],
    fine: list[FineSeries],
    toggles: frozenset[str] = frozenset(),
    log: list | None = None,
    on_epoch=None,
    pretrained: ModelParams | None = None,
) -> ModelParams:
    """Full pipeline: pretraining (unless no_coarse) then the joint stage.
    A shared pretrained checkpoint can be passed in to keep ablation runs
    comparable without repeating stage one."""
    if "no_coarse" in toggles:
        params = init_params(enc_cfg)
        opt = MomentumSGD(params)
    elif pretrained is not None:
        params = pretrained.copy()
        opt = MomentumSGD(params)
    else:
        params = init_params(enc_cfg)
        opt = MomentumSGD(params)
        pretrain_coarse(params, coarse, cfg, dt_cfg, optimizer=opt, log=log)
    joint_train(params, coarse, fine, cfg, dt_cfg, toggles=toggles,
                optimizer=opt, log=log, on_epoch=on_epoch)
    return params


# ---------------------------------------------------------------------------
# inference and evaluation

def predict_series_scores(
    params: ModelParams,
    fine: list[FineSeries],
    dt_cfg: DiffTokenConfig,
    use_diff: bool = True,
    seed: int = 0,
) -> dict[str, list[float]]:
    """Score every image of every series; references (when used) are drawn
    from a seed derived per (series, image), so evaluation is reproducible."""
    out: dict[str, list[float]] = {}
    for sidx, series in enumerate(fine):
        n = len(series.images)
        scores = []
        for i, img in enumerate(series.images):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0x50, sidx, i]))
            call_cfg = dataclasses.replace(dt_cfg, seed=int(rng.integers(0, 2 ** 31)))
            if use_diff and n > 1:
                ref = int(rng.choice([k for k in range(n) if k != i]))
                tokens = tokenize_diff(img, series.images[ref], call_cfg)
            else:
                tokens = tokenize_plain(img, call_cfg)
            tape = Tape()
            tp = params.bind(tape)
            _, enc_out = encode(tape, tp, tokens)
            scores.append(enc_out.score.item())
        out[series.series_id] = scores
    return out


def predict_coarse_scores(
    params: ModelParams, items: list[CoarseItem], dt_cfg: DiffTokenConfig
) -> list[float]:
    scores = []
    for tokens in _prep_coarse(items, dt_cfg):
        tape = Tape()
        tp = params.bind(tape)
        _, out = encode(tape, tp, tokens)
        scores.append(out.score.item())
    return scores


def evaluate_model(
    params: ModelParams,
    fine: list[FineSeries],
    coarse: list[CoarseItem],
    dt_cfg: DiffTokenConfig,
    use_diff: bool = True,
    seed: int = 0,
) -> EvalReport:
    scores = predict_series_scores(params, fine, dt_cfg, use_diff=use_diff, seed=seed)
    rankings = {s.series_id: s.ranking for s in fine}
    sources = {s.series_id: s.source for s in fine}
    coarse_pred = coarse_gt = None
    if coarse:
        coarse_pred = predict_coarse_scores(params, coarse, dt_cfg)
        coarse_gt = [float(np.arange(1.0, 11.0) @ it.dist) for it in coarse]
    return build_report(scores, rankings, sources, coarse_pred, coarse_gt)


def ablation_matrix(
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    dt_cfg: DiffTokenConfig,
    coarse_train: list[CoarseItem],
    fine_train: list[FineSeries],
    coarse_test: list[CoarseItem],
    fine_test: list[FineSeries],
    toggles: list[str],
    eval_seed: int = 0,
) -> dict[str, dict]:
    """One training run per requested toggle (plus the full model), all
    branching from one shared pretrained checkpoint where applicable."""
    for t in toggles:
        if t not in ABLATION_TOGGLES:
            raise TrainerError(f"unknown toggle {t!r}")
    base = init_params(enc_cfg)
    shared_opt = MomentumSGD(base)
    pretrain_coarse(base, coarse_train, cfg, dt_cfg, optimizer=shared_opt)

    results: dict[str, dict] = {}

    def run(name: str, toggle_set: frozenset[str]):
        params = train_two_stage(
            enc_cfg, cfg, dt_cfg, coarse_train, fine_train,
            toggles=toggle_set, pretrained=None if "no_coarse" in toggle_set else base,
        )
        use_diff = "no_difftoken" not in toggle_set
        report = evaluate_model(
            params, fine_test, coarse_test, dt_cfg, use_diff=use_diff, seed=eval_seed
        )
        row = dict(report.overall)
        if report.coarse:
            row.update({"srcc": report.coarse["srcc"], "plcc": report.coarse["plcc"]})
        results[name] = row

    run("full", frozenset())
    for t in toggles:
        run(t, frozenset([t]))
    return results
