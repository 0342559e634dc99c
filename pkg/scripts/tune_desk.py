#!/usr/bin/env python3
"""Desk-scale benchmark calibration: times the full two-stage pipeline and
prints held-out metrics for candidate hyperparameter settings."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from fgaes.data import split_811, synth_coarse, synth_fine
from fgaes.difftoken import DiffTokenConfig
from fgaes.encoder import EncoderConfig
from fgaes.metrics import corr
from fgaes.trainer import (
    CoarseItem,
    FineSeries,
    TrainConfig,
    evaluate_model,
    train_two_stage,
)


def build_data(seed=0, n_series=200, n_coarse=500, img_size=64):
    generated = synth_fine(seed=seed, n_series=n_series, length_range=(2, 6), img_size=img_size)
    fine_all = [
        FineSeries(g.record.series_id, g.record.source, g.images,
                   g.record.gt_ranking, g.record.texts)
        for g in generated
    ]
    recs = [g.record for g in generated]
    tr, va, te = split_811(recs, seed=seed)
    by_id = {f.series_id: f for f in fine_all}
    fine_train = [by_id[r.series_id] for r in tr]
    fine_test = [by_id[r.series_id] for r in te]

    coarse_all = [CoarseItem(img, np.asarray(rec.dist))
                  for rec, img in synth_coarse(seed=seed + 1, n=n_coarse, img_size=img_size)]
    n_t = int(n_coarse * 0.8)
    n_v = int(n_coarse * 0.1)
    coarse_train = coarse_all[:n_t]
    coarse_test = coarse_all[n_t + n_v:]
    return fine_train, fine_test, coarse_train, coarse_test


def main():
    enc = EncoderConfig(d_model=32, n_heads=4, n_layers=2, mlp_ratio=2,
                        pos_grid=8, embed_dim=16, base_patch=16, seed=0)
    dt = DiffTokenConfig(base_patch=16, loc_patch=32, percentile_p=0.5,
                         token_budget=196, max_side=512, seed=0)
    t0 = time.time()
    fine_train, fine_test, coarse_train, coarse_test = build_data()
    print(f"data built in {time.time()-t0:.1f}s: "
          f"{len(fine_train)} train series, {len(fine_test)} test series, "
          f"{len(coarse_train)}/{len(coarse_test)} coarse")

    for lr, lam, pe, je in [(0.05, 1.0, 3, 7), (0.1, 1.0, 3, 7), (0.05, 10.0, 3, 7)]:
        cfg = TrainConfig(lr=lr, weight_decay=5e-5, coarse_batch=32,
                          fine_batch_series=8, pretrain_epochs=pe, joint_epochs=je,
                          lambda_align=lam, seed=0)
        t0 = time.time()
        params = train_two_stage(enc, cfg, dt, coarse_train, fine_train)
        train_s = time.time() - t0
        t0 = time.time()
        report = evaluate_model(params, fine_test, coarse_test, dt, use_diff=True, seed=0)
        plain = evaluate_model(params, fine_test, [], dt, use_diff=False, seed=0)
        eval_s = time.time() - t0
        print(f"lr={lr} lam={lam} pe={pe} je={je}: train {train_s:.0f}s eval {eval_s:.0f}s")
        print(f"  diff : acc={report.overall['acc']:.3f} s_srcc={report.overall['s_srcc']:.3f} "
              f"s_acc={report.overall['s_acc']:.3f} coarse_srcc={report.coarse['srcc']:.3f}")
        print(f"  plain: acc={plain.overall['acc']:.3f} s_srcc={plain.overall['s_srcc']:.3f}")


if __name__ == "__main__":
    main()
