import sys
import numpy as np
from grounddial.data import SyntheticConfig, generate_synthetic
from grounddial.model import init_model_params
from grounddial.training import TrainConfig, train
from grounddial.evaluation import ablate_distribution, evaluate

klw = float(sys.argv[1])
pvals = sys.argv[2] if len(sys.argv) > 2 else "context_plus_answer"
axis = sys.argv[3] if len(sys.argv) > 3 else "rows"
seed = int(sys.argv[4]) if len(sys.argv) > 4 else 1

ds_train = generate_synthetic(SyntheticConfig(num_images=500, seed=7))
ds_val = generate_synthetic(SyntheticConfig(num_images=80, seed=1007), split="val")
cfg = TrainConfig(kl_weight=klw, max_epochs=20, seed=seed, axis_mode=axis,
                  posterior_values=pvals)
params = init_model_params(np.random.default_rng(seed), len(ds_train.vocab), d_v=16)
res = train(ds_train, ds_val, params, cfg)
for e in res.epochs:
    if e["epoch"] % 4 == 0 or e["epoch"] == 19:
        v = e["val"]
        print(f"kl={klw} {pvals[:12]} {axis} ep{e['epoch']:2d} L_G={e['L_G']:.3f} "
              f"L_KL={e['L_KL']:.4f} mrr={v['mrr']:.3f} top1={v.get('grounding_top1',-1):.3f} "
              f"Hp={v['entropy_prior']:.2f}", flush=True)
rep = evaluate(params, ds_val, decoder="generative", seq_len=cfg.seq_len,
               max_history=cfg.max_history, axis_mode=axis, posterior_diagnostics=True)
print(f"FINAL kl={klw} {pvals[:12]} {axis} seed={seed}: mrr={rep.mrr:.3f} "
      f"top1={rep.grounding_top1:.3f} top3={rep.grounding_top3:.3f} "
      f"Hప={rep.entropy_prior:.3f} HG={rep.entropy_posterior:.3f}", flush=True)
