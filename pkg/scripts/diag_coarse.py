#!/usr/bin/env python3
"""Isolate the coarse regression path: can pretraining alone learn
severity -> score? Sweeps patch geometry, epochs, lr."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from fgaes.data import synth_coarse
from fgaes.difftoken import DiffTokenConfig
from fgaes.encoder import EncoderConfig, init_params
from fgaes.metrics import corr
from fgaes.trainer import CoarseItem, TrainConfig, predict_coarse_scores, pretrain_coarse


def run(enc, dt, lr, epochs, batch, n=500, img=64):
    items = [CoarseItem(im, np.asarray(r.dist))
             for r, im in synth_coarse(seed=1, n=n, img_size=img)]
    train, test = items[:400], items[450:]
    params = init_params(enc)
    cfg = TrainConfig(lr=lr, coarse_batch=batch, pretrain_epochs=epochs, seed=0)
    t0 = time.time()
    _, ep = pretrain_coarse(params, train, cfg, dt)
    dur = time.time() - t0
    pred = predict_coarse_scores(params, test, dt)
    gt = [float(np.arange(1.0, 11.0) @ it.dist) for it in test]
    srcc, plcc = corr(pred, gt)
    print(f"d={enc.d_model} L={enc.n_layers} base={dt.base_patch}/loc={dt.loc_patch} "
          f"lr={lr} ep={epochs} b={batch}: {dur:.0f}s "
          f"loss {ep[0]:.4f}->{ep[-1]:.4f} srcc={srcc:.3f} plcc={plcc:.3f}")


enc32 = EncoderConfig(d_model=32, n_heads=4, n_layers=2, mlp_ratio=2,
                      pos_grid=8, embed_dim=16, base_patch=16, seed=0)
dt32 = DiffTokenConfig(base_patch=16, loc_patch=32, token_budget=196, seed=0)

enc8 = EncoderConfig(d_model=32, n_heads=4, n_layers=2, mlp_ratio=2,
                     pos_grid=8, embed_dim=16, base_patch=8, seed=0)
dt8 = DiffTokenConfig(base_patch=8, loc_patch=16, token_budget=196, seed=0)

run(enc32, dt32, lr=0.05, epochs=3, batch=32)
run(enc32, dt32, lr=0.05, epochs=15, batch=16)
run(enc32, dt32, lr=0.15, epochs=15, batch=16)
run(enc8, dt8, lr=0.05, epochs=15, batch=16)
run(enc8, dt8, lr=0.15, epochs=15, batch=16)
