import math

import numpy as np
import pytest

from grounddial import autodiff as ad
from grounddial import grounding as gr
from grounddial.autodiff import DegenerateSliceError, Tape, Tensor, backward, grad_check
from grounddial.grounding import (
    GroundingOutput,
    bridge_loss,
    cross_attend,
    init_grounding_params,
    pool_regions,
    posterior_ground,
    prior_ground,
)

D_Q = 6


@pytest.fixture
def params():
    p = init_grounding_params(np.random.default_rng(0), D_Q)
    # score weights are zero-initialized (uniform start); give them structure
    # so prior/posterior differences are visible to these tests
    p.w2.data = np.random.default_rng(1).uniform(-1.0, 1.0, size=p.w2.shape)
    return p


def rng():
    return np.random.default_rng(1)


# ---------------------------------------------------------------------------
# cross attention

def test_cross_attend_single_token_rows_mode():
    g = rng()
    I = Tensor(g.normal(size=(4, D_Q)))
    x = Tensor(g.normal(size=(1, D_Q)))
    P, I_x = cross_attend(I, x, [True], axis_mode="rows")
    assert np.allclose(P.data, np.ones((4, 1)))
    assert np.allclose(I_x.data, np.repeat(x.data, 4, axis=0))


def test_cross_attend_zero_regions_uniform_columns():
    g = rng()
    I = Tensor(np.zeros((5, D_Q)))
    x = Tensor(g.normal(size=(3, D_Q)))
    P, _ = cross_attend(I, x, [True, True, True], axis_mode="columns")
    assert np.allclose(P.data, np.full((5, 3), 0.2))


def test_cross_attend_hand_evaluated_toy():
    # mu=2, lam=2: logits I x^T chosen by hand
    I = Tensor([[1.0, 0.0], [0.0, 1.0]])
    x = Tensor([[math.log(3.0), 0.0], [0.0, math.log(2.0)]])
    # logits = [[ln3, 0], [0, ln2]]
    P, I_x = cross_attend(I, x, [True, True], axis_mode="columns")
    assert np.allclose(P.data[:, 0], [0.75, 0.25], atol=1e-12)
    assert np.allclose(P.data[:, 1], [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)
    assert np.allclose(I_x.data, P.data @ x.data)


def test_cross_attend_pad_columns_zeroed():
    g = rng()
    I = Tensor(g.normal(size=(3, D_Q)))
    x = Tensor(g.normal(size=(4, D_Q)))
    mask = [True, True, False, False]
    P, I_x = cross_attend(I, x, mask, axis_mode="columns")
    assert np.array_equal(P.data[:, 2:], np.zeros((3, 2)))
    P2, _ = cross_attend(I, x, mask, axis_mode="rows")
    assert np.array_equal(P2.data[:, 2:], np.zeros((3, 2)))
    assert np.abs(P2.data.sum(axis=1) - 1).max() < 1e-9


def test_cross_attend_all_masked_raises():
    g = rng()
    with pytest.raises(DegenerateSliceError):
        cross_attend(Tensor(g.normal(size=(3, D_Q))), Tensor(g.normal(size=(2, D_Q))),
                     [False, False])


# ---------------------------------------------------------------------------
# pooling

def test_pool_identical_rows_uniform_weights(params):
    row = rng().normal(size=(1, D_Q))
    I_x = Tensor(np.repeat(row, 5, axis=0))
    w, pooled = pool_regions(I_x, params)
    assert np.allclose(w.data, np.full(5, 0.2))
    assert np.allclose(pooled.data, row[0])


def test_pool_dominant_row_limit(params):
    g = rng()
    I_x_arr = g.normal(size=(4, D_Q))
    I_x = Tensor(I_x_arr)
    w, _ = pool_regions(I_x, params)
    # push row 2's score up by +30 via b2-equivalent shift on its hidden activation
    h = np.maximum(I_x_arr @ params.w1.data + params.b1.data, 0.0)
    scores = h @ params.w2.data + params.b2.data
    scores[2, 0] += 30.0
    e = np.exp(scores - scores.max())
    w_hand = (e / e.sum()).reshape(-1)
    assert w_hand.argmax() == 2 and w_hand[2] > 0.999
    # same through the op when the shift is baked into the inputs
    shifted = scores  # hand result only; structural check of the op below
    w2, pooled2 = pool_regions(Tensor(np.repeat(I_x_arr[2:3], 4, axis=0)), params)
    assert np.allclose(pooled2.data, (w2.data.reshape(1, 4) @ np.repeat(I_x_arr[2:3], 4, axis=0))[0])


def test_pool_hand_evaluation_toy():
    p = init_grounding_params(np.random.default_rng(2), 2, d_h=2)
    p.w1.data = np.array([[1.0, 0.0], [0.0, 1.0]])
    p.b1.data = np.array([[0.0, 0.0]])
    p.w2.data = np.array([[1.0], [-1.0]])
    p.b2.data = np.array([[0.5]])
    I_x = Tensor([[1.0, 2.0], [0.0, 0.0], [-3.0, 1.0]])
    w, pooled = pool_regions(I_x, p)
    scores = np.array([
        max(1.0, 0) * 1 + max(2.0, 0) * -1 + 0.5,
        0.5,
        max(-3.0, 0) * 1 + max(1.0, 0) * -1 + 0.5,
    ])
    e = np.exp(scores - scores.max())
    expect = e / e.sum()
    assert np.allclose(w.data, expect, atol=1e-12)
    assert np.allclose(pooled.data, expect @ I_x.data, atol=1e-12)


# ---------------------------------------------------------------------------
# prior / posterior

def test_prior_simplex_random_inputs(params):
    g = rng()
    for _ in range(25):
        I = Tensor(g.normal(size=(7, D_Q)))
        x = Tensor(g.normal(size=(4, D_Q)))
        gd, v, _ = prior_ground(I, x, [True, True, True, False], params)
        assert gd.data.min() >= 0
        assert abs(gd.data.sum() - 1.0) < 1e-9
        assert v.shape == (D_Q,)


def test_prior_permutation_equivariance(params):
    g = rng()
    I_arr = g.normal(size=(6, D_Q))
    x = Tensor(g.normal(size=(3, D_Q)))
    mask = [True, True, True]
    g1, v1, _ = prior_ground(Tensor(I_arr), x, mask, params)
    perm = [4, 0, 5, 2, 1, 3]
    g2, v2, _ = prior_ground(Tensor(I_arr[perm]), x, mask, params)
    assert np.allclose(g2.data, g1.data[perm], atol=1e-12)
    assert np.allclose(v2.data, v1.data, atol=1e-12)


def test_posterior_zero_answer_reduces_to_prior_bitwise(params):
    g = rng()
    I = Tensor(g.normal(size=(5, D_Q)))
    x = Tensor(g.normal(size=(3, D_Q)))
    mask = [True, True, False]
    gp, vp, ixp = prior_ground(I, x, mask, params)
    y = Tensor(np.zeros((3, D_Q)))
    G, v_post, ix_post = posterior_ground(I, x, y, mask, params)
    assert np.array_equal(G.data, gp.data)
    assert np.array_equal(v_post.data, vp.data)
    assert np.array_equal(ix_post.data, ixp.data)


def test_posterior_differs_with_nonzero_answer(params):
    g = rng()
    I = Tensor(g.normal(size=(5, D_Q)))
    x = Tensor(g.normal(size=(3, D_Q)))
    y = Tensor(g.normal(size=(3, D_Q)))
    mask = [True, True, True]
    gp, _, _ = prior_ground(I, x, mask, params)
    G, _, _ = posterior_ground(I, x, y, mask, params)
    assert abs(G.data.sum() - 1.0) < 1e-9
    assert not np.allclose(G.data, gp.data)


def test_posterior_call_counter(params):
    g = rng()
    gr.reset_posterior_call_count()
    I = Tensor(g.normal(size=(4, D_Q)))
    x = Tensor(g.normal(size=(2, D_Q)))
    y = Tensor(g.normal(size=(2, D_Q)))
    prior_ground(I, x, [True, True], params)
    assert gr.posterior_call_count() == 0
    posterior_ground(I, x, y, [True, True], params)
    assert gr.posterior_call_count() == 1
    gr.reset_posterior_call_count()


# ---------------------------------------------------------------------------
# bridge loss

def _output_for(params, I_arr, x_arr, y_arr, mask):
    I, x, y = Tensor(I_arr), Tensor(x_arr), Tensor(y_arr)
    g, v_prior, I_x = prior_ground(I, x, mask, params)
    G, v_post, ixp = posterior_ground(I, x, y, mask, params)
    return GroundingOutput(I_x=I_x, g=g, v_prior=v_prior, G=G, v_post=v_post, I_x_post=ixp)


def test_bridge_zero_answer_all_variants_zero(params):
    g = rng()
    out = _output_for(params, g.normal(size=(4, D_Q)), g.normal(size=(2, D_Q)),
                      np.zeros((2, D_Q)), [True, True])
    for variant in gr.BRIDGE_VARIANTS:
        assert abs(bridge_loss(out, variant).item()) < 1e-12


def test_bridge_attn_kl_hand_value(params):
    out = GroundingOutput(
        I_x=Tensor(np.zeros((2, D_Q))),
        g=Tensor([0.5, 0.5]),
        v_prior=Tensor(np.zeros(D_Q)),
        G=Tensor([0.25, 0.75]),
        v_post=Tensor(np.zeros(D_Q)),
    )
    val = bridge_loss(out, "attn_kl").item()
    expect = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)
    assert abs(val - expect) < 1e-12
    # swapped-direction sanity: the spec's 0.14384 example with posterior [0.25,0.75] as p
    out2 = GroundingOutput(I_x=out.I_x, g=Tensor([0.25, 0.75]), v_prior=out.v_prior,
                           G=Tensor([0.5, 0.5]), v_post=out.v_post)
    assert abs(bridge_loss(out2, "attn_kl").item() - 0.14384) < 5e-6


def test_bridge_nonnegative_kl(params):
    g = rng()
    for _ in range(50):
        out = _output_for(params, g.normal(size=(5, D_Q)), g.normal(size=(3, D_Q)),
                          g.normal(size=(3, D_Q)), [True, True, True])
        assert bridge_loss(out, "attn_kl").item() >= 0.0


def test_bridge_detach_blocks_posterior_gradient(params):
    g = rng()
    I = Tensor(g.normal(size=(4, D_Q)))
    x = Tensor(g.normal(size=(2, D_Q)), requires_grad=True)
    y = Tensor(g.normal(size=(2, D_Q)), requires_grad=True)
    mask = [True, True]
    with Tape() as tape:
        gp, vp, ix = prior_ground(I, x, mask, params)
        G, v_post, ixp = posterior_ground(I, x, y, mask, params)
        out = GroundingOutput(I_x=ix, g=gp, v_prior=vp, G=G, v_post=v_post)
        loss = bridge_loss(out, "attn_kl", detach_posterior=True)
    backward(loss, tape)
    # y feeds only the posterior branch; detached target -> no gradient at all
    assert y.grad is None
    assert x.grad is not None and np.abs(x.grad).max() > 0


def test_bridge_joint_gradient_reaches_posterior(params):
    g = rng()
    I = Tensor(g.normal(size=(4, D_Q)))
    x = Tensor(g.normal(size=(2, D_Q)), requires_grad=True)
    y = Tensor(g.normal(size=(2, D_Q)), requires_grad=True)
    mask = [True, True]
    with Tape() as tape:
        gp, vp, ix = prior_ground(I, x, mask, params)
        G, v_post, ixp = posterior_ground(I, x, y, mask, params)
        out = GroundingOutput(I_x=ix, g=gp, v_prior=vp, G=G, v_post=v_post)
        loss = bridge_loss(out, "attn_kl", detach_posterior=False)
    backward(loss, tape)
    assert y.grad is not None and np.abs(y.grad).max() > 0


def test_bridge_unknown_variant(params):
    g = rng()
    out = _output_for(params, g.normal(size=(4, D_Q)), g.normal(size=(2, D_Q)),
                      g.normal(size=(2, D_Q)), [True, True])
    with pytest.raises(ValueError):
        bridge_loss(out, "nope")


def test_end_to_end_grad_check_prior_plus_bridge(params):
    """Gradient fidelity of the trained path: the posterior is a fixed label,
    so finite differences see exactly the prior-side derivative."""
    g = rng()
    I_arr = g.normal(size=(4, D_Q))
    G_fixed = Tensor(np.array([0.1, 0.4, 0.3, 0.2]))
    v_fixed = Tensor(g.normal(size=(D_Q,)))
    mask = [True, True]

    def f(x):
        gp, vp, ix = prior_ground(Tensor(I_arr), x, mask, params)
        out = GroundingOutput(I_x=ix, g=gp, v_prior=vp, G=G_fixed, v_post=v_fixed)
        return bridge_loss(out, "attn_kl", detach_posterior=True)

    for seed in range(5):
        x = Tensor(np.random.default_rng(seed).normal(size=(2, D_Q)))
        assert grad_check(f, x) < 1e-4


def test_end_to_end_grad_check_joint_posterior(params):
    """With detach off, the analytic gradient is the total derivative through
    both branches and must match finite differences."""
    g = rng()
    I_arr = g.normal(size=(4, D_Q))
    y_arr = g.normal(size=(2, D_Q))
    mask = [True, True]

    def f(x):
        I = Tensor(I_arr)
        y = Tensor(y_arr)
        gp, vp, ix = prior_ground(I, x, mask, params)
        G, v_post, _ = posterior_ground(I, x, y, mask, params)
        out = GroundingOutput(I_x=ix, g=gp, v_prior=vp, G=G, v_post=v_post)
        return bridge_loss(out, "attn_kl", detach_posterior=False)

    for seed in range(5):
        x = Tensor(np.random.default_rng(seed).normal(size=(2, D_Q)))
        assert grad_check(f, x) < 1e-4


def test_attention_record_shape():
    rec = gr.attention_record("img1", 2, np.array([0.1, 0.6, 0.2, 0.1]),
                              G=np.array([0.0, 1.0, 0.0, 0.0]), gt_grounding=[1])
    assert rec["top3_prior"] == [1, 2, 0]
    assert rec["gt_grounding"] == [1]
    assert len(rec["prior"]) == 4 and len(rec["posterior"]) == 4
