import sys
import numpy as np
from grounddial.data import SyntheticConfig, generate_synthetic
from grounddial.model import init_model_params, prepare_units, encode_unit_context, named_parameters, zero_grads
from grounddial.grounding import cross_attend
from grounddial.encoders import encode_tokens
from grounddial.decoders import fuse_for_decoder, generative_loss
from grounddial.training import TrainConfig, OptimizerState, adam_step, lr_at
from grounddial import autodiff as ad
from grounddial.autodiff import Tape, backward, Tensor

mode = sys.argv[1]  # oracle | uniform
ds_train = generate_synthetic(SyntheticConfig(num_images=500, seed=7))
ds_val = generate_synthetic(SyntheticConfig(num_images=80, seed=1007), split="val")
cfg = TrainConfig(seed=1)
params = init_model_params(np.random.default_rng(1), len(ds_train.vocab), d_v=16)
named = named_parameters(params)
state = OptimizerState()
train_units = prepare_units(ds_train, cfg.seq_len, cfg.max_history)
val_units = prepare_units(ds_val, cfg.seq_len, cfg.max_history)

def unit_loss(u, params):
    x, I = encode_unit_context(params, u)
    y = encode_tokens(u.a_ids, u.a_mask, params.encoder, "answer")
    x_y = ad.add(x, y)
    _, I_x_post = cross_attend(I, x_y, u.q_mask, "rows", residual=True, values=x,
                               att_wi=params.grounding.att_wi, att_wx=params.grounding.att_wx)
    if mode == "oracle":
        G = Tensor(np.eye(8)[u.gt_grounding[0]].reshape(8, 1))
    else:
        G = Tensor(np.full((8, 1), 1/8))
    v_post = ad.reshape(ad.matmul(ad.transpose(G), I_x_post), (64,))
    fused = fuse_for_decoder(x, u.q_mask, v_post, params.decoder)
    return generative_loss(fused, u.answer_targets, params.encoder.embedding, params.decoder)

rng = np.random.default_rng(0)
for epoch in range(20):
    lr = lr_at(epoch, cfg)
    order = rng.permutation(len(train_units))
    tot, n = 0.0, 0
    for start in range(0, len(train_units), 32):
        batch = [train_units[int(i)] for i in order[start:start+32]]
        zero_grads(params)
        with Tape() as tape:
            loss = ad.mean_of([unit_loss(u, params) for u in batch])
        backward(loss, tape)
        adam_step(named, state, lr, cfg)
        tot += loss.item() * len(batch); n += len(batch)
    if epoch % 3 == 0 or epoch == 19:
        vl = np.mean([unit_loss(u, params).item() for u in val_units])
        print(f"{mode} ep{epoch:2d}: train L_G={tot/n:.3f} val L_G={vl:.3f}", flush=True)
