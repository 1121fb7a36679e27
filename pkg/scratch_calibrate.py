"""Calibration probe: reduced-scale training dynamics for criteria 4-7."""
import sys
import time

import numpy as np

from grounddial.data import SyntheticConfig, generate_synthetic
from grounddial.evaluation import ablate_distribution, evaluate
from grounddial.model import init_model_params
from grounddial.training import TrainConfig, train

IMAGES = int(sys.argv[1]) if len(sys.argv) > 1 else 100
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 10
SEEDS = [int(s) for s in (sys.argv[3].split(",") if len(sys.argv) > 3 else ["1"])]

ds_train = generate_synthetic(SyntheticConfig(num_images=IMAGES, seed=7))
ds_val = generate_synthetic(SyntheticConfig(num_images=60, seed=1007), split="val")
# val must share the train vocabulary
from grounddial.data import generate_synthetic_raw, _dataset_from_raw
raw_val, feats_val = generate_synthetic_raw(SyntheticConfig(num_images=60, seed=1007))
from grounddial.autodiff import Tensor
for ex in ds_val.examples:
    pass  # vocab of synthetic val == train vocab? check below
print("vocab train", len(ds_train.vocab), "val", len(ds_val.vocab))

for seed in SEEDS:
    for klw in (1.0, 0.0):
        cfg = TrainConfig(kl_weight=klw, max_epochs=EPOCHS, seed=seed)
        params = init_model_params(np.random.default_rng(seed), len(ds_train.vocab),
                                   d_v=16, d_q=cfg.d_q, d_e=cfg.d_e,
                                   n_heads=cfg.n_heads, d_h=cfg.d_h)
        t0 = time.time()
        res = train(ds_train, ds_val, params, cfg)
        dt = time.time() - t0
        first, last = res.epochs[0], res.epochs[-1]
        rep = evaluate(params, ds_val, decoder="generative", seq_len=cfg.seq_len,
                       max_history=cfg.max_history, posterior_diagnostics=True)
        print(f"seed={seed} kl={klw}: {dt:.0f}s  "
              f"L_KL e1={first['L_KL']:.4f} eN={last['L_KL']:.4f}  "
              f"L_G e1={first.get('L_G', 0):.3f} eN={last.get('L_G', 0):.3f}  "
              f"top1={rep.grounding_top1:.3f} top3={rep.grounding_top3:.3f}  "
              f"mrr={rep.mrr:.3f}  Hprior={rep.entropy_prior:.3f} Hpost={rep.entropy_posterior:.3f}")
        if klw == 1.0:
            o = ablate_distribution(params, ds_val, "oracle", decoder="generative",
                                    seq_len=cfg.seq_len, max_history=cfg.max_history)
            r = ablate_distribution(params, ds_val, "random", decoder="generative",
                                    seq_len=cfg.seq_len, max_history=cfg.max_history, seed=seed)
            print(f"        ablate MRR: oracle={o.mrr:.3f} learned={rep.mrr:.3f} random={r.mrr:.3f}")
