"""Prior and posterior distributions over visual objects and the bridging
losses that pull the prior toward the answer-informed posterior.

The prior pipeline is cross-attention of projected regions over the context
followed by self-attention pooling; the posterior runs the identical
pipeline with the answer encoding added onto the context, sharing every
parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateSliceError, DimensionError, Tensor

BRIDGE_VARIANTS = ("attn_kl", "attn_mse", "image_kl", "image_mse", "attn_kl_image_mse")

# instrumentation: validation must never touch the posterior branch
_POSTERIOR_CALLS = 0


def posterior_call_count() -> int:
    return _POSTERIOR_CALLS


def reset_posterior_call_count() -> None:
    global _POSTERIOR_CALLS
    _POSTERIOR_CALLS = 0


@dataclass
class GroundingParams:
    att_wi: Tensor  # [d_q, d_q] region-side projection of the interaction f_cv
    att_wx: Tensor  # [d_q, d_q] context-side projection of f_cv
    w1: Tensor      # [d_q, d_h] pooling
    b1: Tensor      # [1, d_h]
    w2: Tensor      # [d_h, 1]
    b2: Tensor      # [1, 1]


def init_grounding_params(rng: np.random.Generator, d_q: int, d_h: Optional[int] = None) -> GroundingParams:
    import math
    d_h = d_q if d_h is None else d_h
    s1 = 1.0 / math.sqrt(d_q)
    # near-identity interaction projections: the raw region/context dot
    # product at step 0, with a direct gradient path for learning alignment
    eye = np.eye(d_q)
    return GroundingParams(
        att_wi=Tensor(eye + rng.uniform(-s1, s1, size=(d_q, d_q)), requires_grad=True),
        att_wx=Tensor(eye + rng.uniform(-s1, s1, size=(d_q, d_q)), requires_grad=True),
        w1=Tensor(rng.uniform(-s1, s1, size=(d_q, d_h)), requires_grad=True),
        b1=Tensor(np.zeros((1, d_h)), requires_grad=True),
        # zero-init scores: both distributions start exactly uniform, with no
        # arbitrary region preferences to unlearn
        w2=Tensor(np.zeros((d_h, 1)), requires_grad=True),
        b2=Tensor(np.zeros((1, 1)), requires_grad=True),
    )


@dataclass
class GroundingOutput:
    I_x: Tensor                      # [mu, d_q] attended regions, context branch
    g: Tensor                        # [mu] prior distribution
    v_prior: Tensor                  # [d_q]
    G: Optional[Tensor] = None       # [mu] posterior distribution
    v_post: Optional[Tensor] = None  # [d_q]
    I_x_post: Optional[Tensor] = None


def cross_attend(I: Tensor, x: Tensor, mask_x: Sequence[bool],
                 axis_mode: str = "columns", residual: bool = False,
                 values: Optional[Tensor] = None,
                 att_wi: Optional[Tensor] = None,
                 att_wx: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
    """Interaction weights P and attended regions I_x = P v (+ I when residual).

    Without projections P = softmax(I xᵀ), the bare dot-product form. The
    grounding pipeline passes its learned att_wi/att_wx, giving
    P = softmax((I Wi)(x Wx)ᵀ / sqrt(d_q)) so the region/word alignment
    lives in one directly-trained matrix pair.

    axis_mode="columns" normalizes over the mu regions within each token
    column (the stated convention); "rows" normalizes over tokens within
    each region row. PAD token positions never contribute: their columns of
    P are zeroed (columns mode) or masked out of the softmax (rows mode).

    `values` defaults to x; the grounding pipeline passes residual=True so
    each attended row keeps its own region content (without it the pooled
    vector is a pure token mix and carries no region information at all).
    """
    mu = I.shape[0]
    lam = x.shape[0]
    if I.shape[1] != x.shape[1]:
        raise DimensionError(f"cross_attend widths differ: I {I.shape}, x {x.shape}")
    mask = np.asarray(mask_x, dtype=bool)
    if mask.shape != (lam,):
        raise DimensionError(f"mask length {mask.shape} vs {lam} tokens")
    if not mask.any():
        raise DegenerateSliceError("cross_attend with every token masked")
    if att_wi is not None:
        queries = ad.matmul(I, att_wi)
        keys = ad.matmul(x, att_wx)
        logits = ad.scale(ad.matmul(queries, ad.transpose(keys)), 1.0 / math.sqrt(I.shape[1]))
    else:
        logits = ad.matmul(I, ad.transpose(x))  # [mu, lam]
    if axis_mode == "columns":
        P = ad.masked_softmax(logits, axis=0)
        P = ad.mul(P, Tensor(np.repeat(mask.reshape(1, lam), mu, axis=0).astype(float)))
    elif axis_mode == "rows":
        mask_mat = Tensor(np.repeat(mask.reshape(1, lam), mu, axis=0).astype(float))
        P = ad.masked_softmax(logits, axis=1, mask=mask_mat)
    else:
        raise ValueError(f"unknown axis_mode {axis_mode!r}")
    I_x = ad.matmul(P, x if values is None else values)
    if residual:
        I_x = ad.add(I_x, I)
    return P, I_x


def pool_regions(I_x: Tensor, params: GroundingParams) -> tuple[Tensor, Tensor]:
    """Self-attention pooling: weights over regions and the pooled vector.

    weights = softmax over mu of ReLU(I_x W1 + b1) W2 + b2; pooled is the
    weight-averaged row of I_x.
    """
    mu, d_q = I_x.shape
    h = ad.relu(ad.add(ad.matmul(I_x, params.w1), ad.tile_rows(params.b1, mu)))
    scores = ad.add(ad.matmul(h, params.w2), ad.tile_rows(params.b2, mu))  # [mu, 1]
    w_col = ad.masked_softmax(scores, axis=0)
    weights = ad.reshape(w_col, (mu,))
    pooled = ad.reshape(ad.matmul(ad.transpose(w_col), I_x), (d_q,))
    return weights, pooled


def prior_ground(I: Tensor, x: Tensor, mask_x: Sequence[bool], params: GroundingParams,
                 axis_mode: str = "columns",
                 cross_residual: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Context-only grounding: returns (g, v_prior, I_x)."""
    _, I_x = cross_attend(I, x, mask_x, axis_mode, residual=cross_residual,
                          att_wi=params.att_wi, att_wx=params.att_wx)
    g, v_prior = pool_regions(I_x, params)
    return g, v_prior, I_x


def posterior_ground(I: Tensor, x: Tensor, y: Tensor, mask_x: Sequence[bool],
                     params: GroundingParams, axis_mode: str = "columns",
                     share_cross_attention: bool = False,
                     cross_residual: bool = True,
                     posterior_values: str = "context") -> tuple[Tensor, Tensor, Tensor]:
    """Answer-informed grounding: the prior pipeline run with x + y.

    Shares every parameter with the prior. The answer steers where the
    attention looks (the x + y queries); with posterior_values="context"
    (default) the attended content stays x, so the answer cannot tunnel
    straight into v_post and the posterior is forced to earn its sharpness
    by selecting answer-consistent regions. "context_plus_answer" attends
    over x + y content too (the literal full-replacement reading).
    With share_cross_attention the attended regions are recomputed from x
    alone (sensitivity analysis; the posterior then collapses onto the
    prior because pooling sees the same input).
    """
    global _POSTERIOR_CALLS
    _POSTERIOR_CALLS += 1
    if x.shape != y.shape:
        raise DimensionError(f"x and y must match: {x.shape} vs {y.shape}")
    if posterior_values not in ("context", "context_plus_answer"):
        raise ValueError(f"unknown posterior_values {posterior_values!r}")
    x_y = ad.add(x, y)
    queries = x if share_cross_attention else x_y
    values = queries if posterior_values == "context_plus_answer" else x
    _, I_x_post = cross_attend(I, queries, mask_x, axis_mode,
                               residual=cross_residual, values=values,
                               att_wi=params.att_wi, att_wx=params.att_wx)
    G, v_post = pool_regions(I_x_post, params)
    return G, v_post, I_x_post


def bridge_loss(out: GroundingOutput, variant: str = "attn_kl",
                detach_posterior: bool = True) -> Tensor:
    """Distance between the posterior and prior branches (the auxiliary loss).

    attn_kl is KL(posterior, prior) over region weights; attn_mse the mean
    squared gap of the weights; image_* compare the pooled vectors (softmaxed
    for the KL form). With detach_posterior the posterior side is a constant
    target, so no gradient reaches tensors only the posterior branch uses.
    """
    if variant not in BRIDGE_VARIANTS:
        raise ValueError(f"unknown bridge variant {variant!r}; know {BRIDGE_VARIANTS}")
    if out.G is None or out.v_post is None:
        raise ValueError("bridge_loss needs a populated posterior branch")
    G = out.G.detach() if detach_posterior else out.G
    v_post = out.v_post.detach() if detach_posterior else out.v_post
    if variant == "attn_kl":
        return ad.kl_divergence(G, out.g)
    if variant == "attn_mse":
        return ad.mse(G, out.g)
    if variant == "image_mse":
        return ad.mse(v_post, out.v_prior)
    if variant == "image_kl":
        return ad.kl_divergence(
            ad.masked_softmax(v_post, axis=0),
            ad.masked_softmax(out.v_prior, axis=0),
        )
    return ad.add(ad.kl_divergence(G, out.g), ad.mse(v_post, out.v_prior))


def attention_record(image_id: str, round_idx: int, g: np.ndarray,
                     G: Optional[np.ndarray] = None,
                     gt_grounding: Optional[list[int]] = None,
                     top_k: int = 3) -> dict:
    """One exportable JSON record per (image, round)."""
    order = np.lexsort((np.arange(len(g)), -g))
    rec = {
        "image_id": image_id,
        "round": round_idx,
        "prior": [float(v) for v in g],
        "top3_prior": [int(i) for i in order[:top_k]],
    }
    if G is not None:
        rec["posterior"] = [float(v) for v in G]
    if gt_grounding is not None:
        rec["gt_grounding"] = [int(i) for i in gt_grounding]
    return rec
