import sys
import numpy as np
from grounddial.data import SyntheticConfig, generate_synthetic
from grounddial.model import init_model_params
from grounddial.training import TrainConfig, train
from grounddial.evaluation import evaluate

def run(name, images=150, epochs=15, axis="rows", klw=1.0, seed=1,
        pvals="context", region_scale=1.0, resid=True, noise=0.1):
    ds_train = generate_synthetic(SyntheticConfig(num_images=images, seed=7, noise=noise))
    ds_val = generate_synthetic(SyntheticConfig(num_images=40, seed=1007, noise=noise), split="val")
    cfg = TrainConfig(kl_weight=klw, max_epochs=epochs, seed=seed, axis_mode=axis,
                      posterior_values=pvals, cross_residual=resid)
    params = init_model_params(np.random.default_rng(seed), len(ds_train.vocab), d_v=16)
    if region_scale != 1.0:
        params.encoder.region_w2.data *= region_scale
    res = train(ds_train, ds_val, params, cfg)
    rep = evaluate(params, ds_val, decoder="generative", seq_len=cfg.seq_len,
                   max_history=cfg.max_history, axis_mode=axis, posterior_diagnostics=True,
                   cross_residual=resid)
    e0, eN = res.epochs[0], res.epochs[-1]
    print(f"{name}: L_G {e0['L_G']:.2f}->{eN['L_G']:.2f} L_KL {e0['L_KL']:.4f}->{eN['L_KL']:.4f} "
          f"mrr={rep.mrr:.3f} top1={rep.grounding_top1:.3f} top3={rep.grounding_top3:.3f} "
          f"Hp={rep.entropy_prior:.2f} HG={rep.entropy_posterior:.2f}", flush=True)

which = sys.argv[1]
if which == "G": run("G copy+resid", pvals="context_plus_answer")
elif which == "H": run("H copy+resid+rw3", pvals="context_plus_answer", region_scale=3.0)
elif which == "I": run("I ctx+resid+rw3", pvals="context", region_scale=3.0)
elif which == "J": run("J copy+resid+rw3+cols", pvals="context_plus_answer", region_scale=3.0, axis="columns")
