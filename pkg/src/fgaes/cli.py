"""Single command-line entry point for the whole pipeline.

Every subcommand writes its artifacts plus a run manifest (inputs, resolved
config, seed, content hashes) into the output directory so a run can be
reproduced from the manifest alone. Exit codes: 0 success, 2 usage,
3 missing file, 4 schema violation, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import losses
from .calibrate import CalibrateError, bt_fit, calibrate_series, PairVoteRecord
from .data import DataError, load_manifest, split_811
from .difftoken import DiffTokenConfig, select_decisive, similarity_map, tokenize_diff, tokenize_plain
from .encoder import (
    EncoderConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .imaging import ImageBuf, ImageParseError, decode_image, encode_image
from .metrics import build_report
from .ndiff import constant, grad_check
from .refine import generic_scores, iou_filter, t2i_filter
from .trainer import (
    ABLATION_TOGGLES,
    CoarseItem,
    TrainConfig,
    TrainerError,
    ablation_matrix,
    evaluate_model,
    load_coarse_dataset,
    load_fine_dataset,
    train_two_stage,
)
from .imaging import Box

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_RUNTIME = 5

# desk-scale defaults: tiny encoder, small synthetic images. Paper-scale
# values (lr 2e-5, batch 128, ViT-B-sized encoder) stay reachable through
# the config file and flags.
DESK_ENCODER = dict(d_model=32, n_heads=4, n_layers=2, mlp_ratio=2,
                    pos_grid=8, embed_dim=16, base_patch=16, seed=0)
DESK_TRAIN = dict(lr=0.05, weight_decay=5e-5, coarse_batch=32, fine_batch_series=8,
                  pretrain_epochs=3, joint_epochs=7, momentum_fine=0.615,
                  momentum_coarse=0.8, lambda_align=1.0, seed=0)
DESK_DIFFTOKEN = dict(base_patch=16, loc_patch=32, percentile_p=0.5,
                      token_budget=196, max_side=512, seed=0)
DESK_SYNTH = dict(n_series=200, n_coarse=500, img_size=64, length_lo=2, length_hi=6)


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _worker_cap() -> int:
    raw = os.environ.get("FGAES_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def load_config_file(path) -> dict:
    """Flat key/value JSON document; unknown keys are rejected up front."""
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}", EXIT_MISSING_FILE)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}", EXIT_SCHEMA)
    if not isinstance(obj, dict) or any(isinstance(v, (dict, list)) for v in obj.values()):
        raise CliError("config file must be a flat JSON object", EXIT_SCHEMA)
    known = set(DESK_ENCODER) | set(DESK_TRAIN) | set(DESK_DIFFTOKEN) | set(DESK_SYNTH) | {
        "band", "cutoff_fraction", "working_size", "t2i_threshold",
    }
    unknown = set(obj) - known
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_SCHEMA)
    return obj


def resolve_config(args) -> dict:
    """defaults < config file < command-line flags."""
    merged = {**DESK_ENCODER, **DESK_TRAIN, **DESK_DIFFTOKEN, **DESK_SYNTH,
              "band": 0.15, "cutoff_fraction": 0.30, "working_size": 128,
              "t2i_threshold": None}
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    for flag, key in (
        ("seed", "seed"), ("budget", "token_budget"), ("loc_patch", "loc_patch"),
        ("percentile_p", "percentile_p"), ("lam", "lambda_align"), ("band", "band"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            merged[key] = val
    merged["threads"] = _worker_cap()
    return merged


def encoder_config(cfg: dict) -> EncoderConfig:
    return EncoderConfig(**{k: int(cfg[k]) for k in DESK_ENCODER})


def train_config(cfg: dict) -> TrainConfig:
    kwargs = {}
    for k in DESK_TRAIN:
        kwargs[k] = type(DESK_TRAIN[k])(cfg[k])
    return TrainConfig(**kwargs)


def difftoken_config(cfg: dict) -> DiffTokenConfig:
    return DiffTokenConfig(
        base_patch=int(cfg["base_patch"]), loc_patch=int(cfg["loc_patch"]),
        percentile_p=float(cfg["percentile_p"]), token_budget=int(cfg["token_budget"]),
        max_side=int(cfg["max_side"]) if cfg["max_side"] is not None else None,
        seed=int(cfg["seed"]),
    )


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_run_manifest(out_dir, command: str, cfg: dict, inputs: list, outputs: list):
    manifest = {
        "command": command,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "seed": cfg.get("seed"),
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "outputs": {os.path.relpath(p, out_dir): _sha256(p) for p in outputs},
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _require_out(args) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "config.json"),
                {k: v for k, v in sorted(resolve_config(args).items())})
    return out


def _read_image(path) -> ImageBuf:
    if not os.path.exists(path):
        raise CliError(f"image not found: {path}", EXIT_MISSING_FILE)
    with open(path, "rb") as fh:
        return decode_image(fh.read())


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = _require_out(args)
    seed = int(cfg["seed"])
    generated = data_mod.synth_fine(
        seed=seed, n_series=int(cfg["n_series"]),
        length_range=(int(cfg["length_lo"]), int(cfg["length_hi"])),
        img_size=int(cfg["img_size"]),
    )
    fine_manifest = data_mod.write_fine_dataset(out, generated)
    coarse_items = data_mod.synth_coarse(
        seed=seed + 1, n=int(cfg["n_coarse"]), img_size=int(cfg["img_size"]))
    coarse_manifest = data_mod.write_coarse_dataset(out, coarse_items)
    votes = data_mod.synth_votes(generated, seed=seed + 2)
    votes_manifest = data_mod.write_votes(out, votes)
    write_run_manifest(out, "synth", cfg, [],
                       [fine_manifest, coarse_manifest, votes_manifest])
    print(f"synth: {len(generated)} series, {len(coarse_items)} coarse images -> {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = resolve_config(args)
    out = _require_out(args)
    if not os.path.exists(args.manifest):
        raise CliError(f"votes manifest not found: {args.manifest}", EXIT_MISSING_FILE)
    votes = load_manifest(args.manifest, "votes")
    by_series: dict[str, list] = {}
    for row in votes:
        by_series.setdefault(row.series_id, []).append(
            PairVoteRecord(row.series_id, row.i, row.j, row.votes_i, row.votes_j, row.votes_tie)
        )
    results = []
    for sid in sorted(by_series):
        records = by_series[sid]
        n = 1 + max(max(r.i, r.j) for r in records)
        cal = calibrate_series(records, n, band=float(cfg["band"]))
        entry = {
            "series_id": sid,
            "kept_pairs": [[i, j, p] for (i, j), p in sorted(cal.kept_pairs.items())],
            "dropped_images": cal.dropped_images,
        }
        if cal.is_conflict:
            entry["conflict"] = {"cycle": cal.conflict_cycle}
        elif cal.ranking is not None:
            entry["ranking"] = cal.ranking
        else:
            entry["dropped"] = cal.dropped_reason
        results.append(entry)
    out_path = os.path.join(out, "calibrated.jsonl")
    with open(out_path, "w", encoding="utf-8") as fh:
        for entry in results:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    write_run_manifest(out, "calibrate", cfg, [args.manifest], [out_path])
    n_conflict = sum(1 for e in results if "conflict" in e)
    print(f"calibrate: {len(results)} series, {n_conflict} conflicts -> {out_path}")
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = resolve_config(args)
    out = _require_out(args)
    if not os.path.exists(args.manifest):
        raise CliError(f"series manifest not found: {args.manifest}", EXIT_MISSING_FILE)
    records = load_manifest(args.manifest, "series")
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    series = [
        (rec.series_id, rec.source, data_mod.load_series_images(rec, base_dir))
        for rec in records
    ]
    report = generic_scores(
        series,
        cutoff_fraction=float(cfg["cutoff_fraction"]),
        working_size=int(cfg["working_size"]),
    )
    removed = {(r["series_id"], r["index"]): r["reason"] for r in report.removed}
    for rec in records:
        if rec.source == "cropping" and rec.boxes:
            boxes = [Box(*b) for b in rec.boxes]
            kept = set(iou_filter(boxes))
            for idx in range(len(boxes)):
                if idx in kept or (rec.series_id, idx) in removed:
                    continue
                others = [iou_filter([boxes[idx], boxes[k]]) for k in kept]
                reason = "iou_high" if any(len(x) == 1 for x in others) else "iou_low"
                removed[(rec.series_id, idx)] = reason
        if rec.source == "aigc" and rec.t2i_scores and cfg["t2i_threshold"] is not None:
            kept = set(t2i_filter(rec.t2i_scores, float(cfg["t2i_threshold"])))
            for idx in range(len(rec.t2i_scores)):
                if idx not in kept and (rec.series_id, idx) not in removed:
                    removed[(rec.series_id, idx)] = "t2i_low"
    out_path = os.path.join(out, "refine_report.jsonl")
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in records:
            entry = {
                "series_id": rec.series_id,
                "scores": [report.scores[(rec.series_id, k)] for k in range(len(rec.images))],
                "cutoff": report.cutoffs["all"],
                "removed": [
                    {"index": k, "reason": removed[(rec.series_id, k)]}
                    for k in range(len(rec.images)) if (rec.series_id, k) in removed
                ],
            }
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    write_run_manifest(out, "refine", cfg, [args.manifest], [out_path])
    print(f"refine: {len(records)} series, {len(removed)} removals -> {out_path}")
    return EXIT_OK


def cmd_tokenize(args) -> int:
    cfg = resolve_config(args)
    out = _require_out(args)
    dt_cfg = difftoken_config(cfg)
    target = _read_image(args.image)
    if args.ref:
        ref = _read_image(args.ref)
        seq = tokenize_diff(target, ref, dt_cfg)
    else:
        seq = tokenize_plain(target, dt_cfg)
    layout = {
        "tokens": [{"u": t.u, "v": t.v, "scale": t.scale} for t in seq.tokens],
        "grid": {"rows": seq.grid[0], "cols": seq.grid[1]},
        "tau": None if seq.tau != seq.tau else seq.tau,  # NaN -> null
        "dropped": {"coarse": seq.dropped_coarse, "fine": seq.dropped_fine},
        "source_dims": list(seq.source_dims),
    }
    layout_path = os.path.join(out, "layout.json")
    _write_json(layout_path, layout)
    outputs = [layout_path]
    if args.overlay:
        overlay_path = os.path.join(out, "overlay.png")
        _write_overlay(target, args.ref, dt_cfg, overlay_path)
        outputs.append(overlay_path)
    write_run_manifest(out, "tokenize", cfg,
                       [args.image] + ([args.ref] if args.ref else []), outputs)
    print(f"tokenize: {len(seq.tokens)} tokens -> {layout_path}")
    return EXIT_OK


def _write_overlay(target: ImageBuf, ref_path, dt_cfg, out_path):
    from .difftoken import _cap_max_side, align_reference

    capped = _cap_max_side(target, dt_cfg.max_side)
    px = capped.pixels.copy()
    if ref_path:
        ref = _read_image(ref_path)
        smap = similarity_map(capped, align_reference(capped, ref), dt_cfg)
        for (i, j) in select_decisive(smap):
            y0, x0 = i * dt_cfg.loc_patch, j * dt_cfg.loc_patch
            y1 = min(y0 + dt_cfg.loc_patch, capped.height) - 1
            x1 = min(x0 + dt_cfg.loc_patch, capped.width) - 1
            px[y0, x0:x1 + 1] = [1.0, 0.0, 0.0]
            px[y1, x0:x1 + 1] = [1.0, 0.0, 0.0]
            px[y0:y1 + 1, x0] = [1.0, 0.0, 0.0]
            px[y0:y1 + 1, x1] = [1.0, 0.0, 0.0]
    with open(out_path, "wb") as fh:
        fh.write(encode_image(ImageBuf(px), fmt="png"))


def _load_datasets(args, cfg):
    if not os.path.exists(args.manifest):
        raise CliError(f"series manifest not found: {args.manifest}", EXIT_MISSING_FILE)
    if not os.path.exists(args.coarse):
        raise CliError(f"coarse manifest not found: {args.coarse}", EXIT_MISSING_FILE)
    fine_records = load_manifest(args.manifest, "series")
    coarse_records = load_manifest(args.coarse, "coarse")
    fine_dir = os.path.dirname(os.path.abspath(args.manifest))
    coarse_dir = os.path.dirname(os.path.abspath(args.coarse))
    seed = int(cfg["seed"])
    fine_train_r, fine_val_r, fine_test_r = split_811(fine_records, seed)
    fine = {
        "train": load_fine_dataset(fine_train_r, fine_dir),
        "val": load_fine_dataset(fine_val_r, fine_dir),
        "test": load_fine_dataset(fine_test_r, fine_dir),
    }
    items = load_coarse_dataset(coarse_records, coarse_dir)
    n = len(items)
    n_train, n_val = int(n * 0.8), int(n * 0.1)
    coarse = {
        "train": items[:n_train],
        "val": items[n_train:n_train + n_val],
        "test": items[n_train + n_val:],
    }
    return fine, coarse


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _require_out(args)
    fine, coarse = _load_datasets(args, cfg)
    enc_cfg = encoder_config(cfg)
    tr_cfg = train_config(cfg)
    dt_cfg = difftoken_config(cfg)
    log: list = []
    ckpts = []

    def on_epoch(epoch, params):
        path = os.path.join(out, f"checkpoint_epoch{epoch:03d}.json")
        save_checkpoint(params, path)
        ckpts.append(path)

    params = train_two_stage(enc_cfg, tr_cfg, dt_cfg, coarse["train"], fine["train"],
                             log=log, on_epoch=on_epoch)
    final_ckpt = os.path.join(out, "checkpoint_final.json")
    save_checkpoint(params, final_ckpt)
    log_path = os.path.join(out, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    report = evaluate_model(params, fine["test"], coarse["test"], dt_cfg,
                            use_diff=True, seed=int(cfg["seed"]))
    report_path = os.path.join(out, "eval_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    write_run_manifest(out, "train", cfg, [args.manifest, args.coarse],
                       [final_ckpt, log_path, report_path] + ckpts)
    print(report.to_table())
    print(f"train: checkpoint -> {final_ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = _require_out(args)
    if not os.path.exists(args.manifest):
        raise CliError(f"series manifest not found: {args.manifest}", EXIT_MISSING_FILE)
    fine_records = load_manifest(args.manifest, "series")
    fine_dir = os.path.dirname(os.path.abspath(args.manifest))
    fine = load_fine_dataset(fine_records, fine_dir)
    rankings = {s.series_id: s.ranking for s in fine}
    sources = {s.series_id: s.source for s in fine}
    inputs = [args.manifest]
    coarse_pred = coarse_gt = None

    if args.pred:
        if not os.path.exists(args.pred):
            raise CliError(f"predictions file not found: {args.pred}", EXIT_MISSING_FILE)
        inputs.append(args.pred)
        scores = {}
        with open(args.pred, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    scores[obj["series_id"]] = [float(x) for x in obj["scores"]]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise CliError(f"predictions line {lineno}: {exc}", EXIT_SCHEMA)
    elif args.ckpt:
        if not os.path.exists(args.ckpt):
            raise CliError(f"checkpoint not found: {args.ckpt}", EXIT_MISSING_FILE)
        inputs.append(args.ckpt)
        params = load_checkpoint(args.ckpt)
        from .trainer import predict_series_scores

        dt_cfg = difftoken_config(cfg)
        scores = predict_series_scores(params, fine, dt_cfg,
                                       use_diff=not args.plain, seed=int(cfg["seed"]))
        if args.coarse:
            coarse_records = load_manifest(args.coarse, "coarse")
            coarse_dir = os.path.dirname(os.path.abspath(args.coarse))
            items = load_coarse_dataset(coarse_records, coarse_dir)
            from .trainer import predict_coarse_scores

            coarse_pred = predict_coarse_scores(params, items, dt_cfg)
            coarse_gt = [float(np.arange(1.0, 11.0) @ it.dist) for it in items]
            inputs.append(args.coarse)
    else:
        raise CliError("eval needs --pred or --ckpt", EXIT_USAGE)

    report = build_report(scores, rankings, sources, coarse_pred, coarse_gt)
    report_path = os.path.join(out, "eval_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    table_path = os.path.join(out, "eval_report.txt")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_table() + "\n")
    write_run_manifest(out, "eval", cfg, inputs, [report_path, table_path])
    print(report.to_table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    results = run_gradient_suite(verbose=True)
    worst = max(results.values())
    print(f"worst relative error: {worst:.3e}")
    return EXIT_OK if worst < 1e-5 else EXIT_RUNTIME


def run_gradient_suite(verbose: bool = False) -> dict[str, float]:
    """Finite-difference checks for every loss and the full tiny encoder."""
    from .difftoken import Token, TokenSeq
    from .encoder import TapeParams, encode as enc_fn

    rng = np.random.default_rng(0)
    results: dict[str, float] = {}

    def check(name, fn, params):
        results[name] = grad_check(fn, params)
        if verbose:
            print(f"{name:24s} max rel err {results[name]:.3e}")

    gt = rng.random(10) + 0.1
    gt /= gt.sum()
    check("emd", lambda t, p: losses.emd_loss(t, t.softmax(p["logits"]), gt),
          {"logits": rng.standard_normal(10)})

    et = rng.standard_normal(8)
    check("ctalign",
          lambda t, p: losses.ctalign_loss(t, p["x"], p["y"], et),
          {"x": rng.standard_normal(8), "y": rng.standard_normal(8)})

    def bt_path(t, p):
        a = t.reshape(t.slice(p["s"], (slice(0, 1),)), ())
        b = t.reshape(t.slice(p["s"], (slice(1, 2),)), ())
        return t.neg(t.log(losses.bt_prob(t, a, b)))

    check("bt_logistic", bt_path, {"s": rng.standard_normal(2)})

    check("listmle",
          lambda t, p: losses.listmle_loss(t, p["s"], [2, 0, 3, 1]),
          {"s": rng.standard_normal(4)})

    def joint_path(t, p):
        align = losses.ctalign_loss(t, p["x"], p["y"], et)
        rank = losses.listmle_loss(t, p["s"], [1, 0, 2])
        return losses.joint_loss(t, 1, align=align, rankreg=rank,
                                 cfg=losses.TrainLossConfig(lambda_align=10.0))

    check("joint", joint_path,
          {"x": rng.standard_normal(8), "y": rng.standard_normal(8),
           "s": rng.standard_normal(3)})

    enc_cfg = EncoderConfig(d_model=16, n_heads=2, n_layers=2, mlp_ratio=2,
                            pos_grid=3, embed_dim=8, base_patch=4, seed=0)
    params = init_params(enc_cfg)
    tokens = TokenSeq(
        tokens=[
            Token(pixels=rng.random((4, 4, 3)),
                  u=float(rng.uniform(0.1, 0.9)), v=float(rng.uniform(0.1, 0.9)),
                  scale="fine" if k % 2 else "coarse")
            for k in range(5)
        ],
        source_dims=(16, 16), grid=(1, 1), tau=0.5,
    )
    probe = rng.standard_normal(10)

    def full_model(t, p):
        tp = TapeParams(enc_cfg, p)
        _, out = enc_fn(t, tp, tokens)
        return t.sum(t.mul(out.dist, constant(probe)))

    check("encoder_full", full_model, params.values)
    return results


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = _require_out(args)
    toggles = args.toggle or []
    for t in toggles:
        if t not in ABLATION_TOGGLES:
            raise CliError(f"unknown toggle {t!r} (choose from {ABLATION_TOGGLES})",
                           EXIT_USAGE)
    fine, coarse = _load_datasets(args, cfg)
    results = ablation_matrix(
        encoder_config(cfg), train_config(cfg), difftoken_config(cfg),
        coarse["train"], fine["train"], coarse["test"], fine["test"],
        toggles=list(toggles), eval_seed=int(cfg["seed"]),
    )
    table_path = os.path.join(out, "ablation.json")
    _write_json(table_path, results)
    cols = ["acc", "f1", "s_acc", "s_srcc", "srcc", "plcc"]
    header = "variant".ljust(14) + "  ".join(c.rjust(7) for c in cols)
    lines = [header]
    for name, row in results.items():
        lines.append(name.ljust(14) + "  ".join(
            f"{row.get(c, float('nan')):7.4f}" for c in cols))
    table = "\n".join(lines)
    with open(os.path.join(out, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    write_run_manifest(out, "ablate", cfg, [args.manifest, args.coarse],
                       [table_path, os.path.join(out, "ablation.txt")])
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgaes",
        description="Fine-grained image aesthetic assessment pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None)
        if out_required:
            p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    common(p)

    p = sub.add_parser("calibrate", help="votes -> calibrated rankings")
    common(p)
    p.add_argument("--manifest", required=True, help="votes.jsonl")
    p.add_argument("--band", type=float, default=None)

    p = sub.add_parser("refine", help="similarity/IoU series filtering")
    common(p)
    p.add_argument("--manifest", required=True, help="series.jsonl")

    p = sub.add_parser("tokenize", help="emit a token layout for one image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--ref", default=None)
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--loc-patch", dest="loc_patch", type=int, default=None)
    p.add_argument("--percentile-p", dest="percentile_p", type=float, default=None)

    p = sub.add_parser("train", help="two-stage training")
    common(p)
    p.add_argument("--manifest", required=True, help="series.jsonl")
    p.add_argument("--coarse", required=True, help="coarse.jsonl")
    p.add_argument("--lambda", dest="lam", type=float, default=None)

    p = sub.add_parser("eval", help="evaluate predictions or a checkpoint")
    common(p)
    p.add_argument("--manifest", required=True, help="series.jsonl")
    p.add_argument("--coarse", default=None, help="coarse.jsonl")
    p.add_argument("--pred", default=None, help="JSONL {series_id, scores}")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--plain", action="store_true", help="reference-free tokenization")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, out_required=False)

    p = sub.add_parser("ablate", help="training-strategy ablation matrix")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--coarse", required=True)
    p.add_argument("--toggle", action="append", default=[],
                   help=f"repeatable; one of {ABLATION_TOGGLES}")
    p.add_argument("--lambda", dest="lam", type=float, default=None)

    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "refine": cmd_refine,
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except CliError as exc:
        print(json.dumps({"error": {"message": str(exc), "code": exc.code}}),
              file=sys.stderr)
        return exc.code
    except (DataError, CalibrateError) as exc:
        print(json.dumps({"error": {"message": str(exc), "code": EXIT_SCHEMA}}),
              file=sys.stderr)
        return EXIT_SCHEMA
    except ImageParseError as exc:
        print(json.dumps({"error": {"message": str(exc), "code": EXIT_SCHEMA,
                                    "offset": exc.offset}}), file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(json.dumps({"error": {"message": str(exc), "code": EXIT_MISSING_FILE}}),
              file=sys.stderr)
        return EXIT_MISSING_FILE
    except TrainerError as exc:
        print(json.dumps({"error": {"message": str(exc), "code": EXIT_RUNTIME}}),
              file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
