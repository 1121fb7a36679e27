import sys
import numpy as np
from grounddial.data import SyntheticConfig, generate_synthetic
from grounddial.model import init_model_params
from grounddial.training import TrainConfig, train
from grounddial.evaluation import evaluate

def run(name, noise=0.1, w2=None, images=150, epochs=15, decay=0.75, axis="rows", klw=1.0, seed=1):
    ds_train = generate_synthetic(SyntheticConfig(num_images=images, seed=7, noise=noise))
    ds_val = generate_synthetic(SyntheticConfig(num_images=40, seed=1007, noise=noise), split="val")
    cfg = TrainConfig(kl_weight=klw, max_epochs=epochs, seed=seed, axis_mode=axis, decay_factor=decay)
    params = init_model_params(np.random.default_rng(seed), len(ds_train.vocab), d_v=16)
    if w2 is not None:
        params.grounding.w2.data = np.random.default_rng(seed+77).uniform(-w2, w2, size=params.grounding.w2.shape)
    res = train(ds_train, ds_val, params, cfg)
    rep = evaluate(params, ds_val, decoder="generative", seq_len=cfg.seq_len,
                   max_history=cfg.max_history, axis_mode=axis, posterior_diagnostics=True)
    e0, eN = res.epochs[0], res.epochs[-1]
    print(f"{name}: L_G {e0['L_G']:.2f}->{eN['L_G']:.2f} L_KL {e0['L_KL']:.4f}->{eN['L_KL']:.4f} "
          f"mrr={rep.mrr:.3f} top1={rep.grounding_top1:.3f} top3={rep.grounding_top3:.3f} "
          f"Hp={rep.entropy_prior:.2f} HG={rep.entropy_posterior:.2f}", flush=True)

which = sys.argv[1]
if which == "B": run("B rows+longQ")
elif which == "C": run("C +noise.25", noise=0.25)
elif which == "D": run("D +w2=2", noise=0.25, w2=2.0)
elif which == "E": run("E nodecay", noise=0.25, decay=1.0)
elif which == "F": run("F cols+longQ", axis="columns")
