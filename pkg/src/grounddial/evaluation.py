"""Retrieval metrics, the grounding-accuracy protocol, distribution
ablations, and entropy diagnostics.

All ranks are 1-based; score ties break in favor of the lower candidate
index everywhere so that results are bit-reproducible. Metrics are stored
as fractions in [0, 1]; multiply by 100 only when formatting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from .autodiff import ContractError, InvalidDistributionError
from .data import DialogDataset
from .grounding import attention_record
from .model import (
    ModelParams,
    Unit,
    infer_unit_scores,
    prepare_units,
    unit_posterior_weights,
    unit_prior_weights,
)


@dataclass
class EvalReport:
    mrr: float
    r_at_1: float
    r_at_5: float
    r_at_10: float
    mean_rank: float
    n_units: int
    ndcg: Optional[float] = None
    grounding_top1: Optional[float] = None
    grounding_top3: Optional[float] = None
    entropy_prior: Optional[float] = None
    entropy_posterior: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def rank_of_gt(scores: Sequence[float], gt_index: int) -> int:
    """1-based rank of the gt candidate under descending score; a tied gt
    ranks ahead of every tied peer with a higher index."""
    s = np.asarray(scores, dtype=float)
    n = s.shape[0]
    if not 0 <= gt_index < n:
        raise IndexError(f"gt_index {gt_index} out of range for {n} scores")
    gt = s[gt_index]
    better = int((s > gt).sum())
    tied_before = int((s[:gt_index] == gt).sum())
    return 1 + better + tied_before


def mrr(ranks: Sequence[int]) -> float:
    ranks = list(ranks)
    if any(r < 1 for r in ranks):
        raise ContractError("ranks are 1-based")
    return float(np.mean([1.0 / r for r in ranks]))


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    if k < 1:
        raise ContractError("k must be >= 1")
    ranks = list(ranks)
    return float(np.mean([1.0 if r <= k else 0.0 for r in ranks]))


def mean_rank(ranks: Sequence[int]) -> float:
    ranks = list(ranks)
    if not ranks:
        raise ContractError("mean_rank of an empty list")
    return float(np.mean(ranks))


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on (-score, index): ties keep the lower index first
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def ndcg(scores: Sequence[float], relevance: Sequence[float]) -> float:
    """DCG of the score ordering over ideal DCG, discount 1/log2(pos + 1)."""
    s = np.asarray(scores, dtype=float)
    rel = np.asarray(relevance, dtype=float)
    if s.shape != rel.shape:
        raise ContractError(f"scores {s.shape} vs relevance {rel.shape}")
    if (rel < 0).any() or (rel > 1).any():
        raise ContractError("relevance entries must lie in [0, 1]")
    if rel.max() <= 0:
        raise ContractError("ndcg needs at least one positive relevance")
    discounts = 1.0 / np.log2(np.arange(2, s.shape[0] + 2))
    dcg = float((rel[_descending_order(s)] * discounts).sum())
    ideal = float((np.sort(rel)[::-1] * discounts).sum())
    return dcg / ideal


def grounding_accuracy(records: Sequence[dict], top_k: int = 3) -> float:
    """Fraction of records whose top-k prior regions intersect gt_grounding."""
    if not records:
        raise ContractError("grounding_accuracy over zero records")
    hits = 0
    for rec in records:
        if "gt_grounding" not in rec or rec["gt_grounding"] is None:
            raise ContractError(f"record for {rec.get('image_id')!r} lacks gt_grounding")
        prior = np.asarray(rec["prior"], dtype=float)
        top = set(int(i) for i in _descending_order(prior)[:top_k])
        if top & set(rec["gt_grounding"]):
            hits += 1
    return hits / len(records)


def distribution_entropy(dist: Sequence[float]) -> float:
    """Shannon entropy in nats with 0 ln 0 := 0."""
    p = np.asarray(dist, dtype=float)
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise InvalidDistributionError("entropy needs a simplex vector")
    support = p > 0
    return float(-(p[support] * np.log(p[support])).sum())


ABLATION_MODES = ("learned", "mean", "random", "oracle")


def _ablated_weights(units: list[Unit], learned: list[np.ndarray], mode: str,
                     batch_size: int, seed: int) -> list[Optional[np.ndarray]]:
    """Replacement distribution per unit: None keeps the learned one."""
    if mode == "learned":
        return [None] * len(units)
    out: list[Optional[np.ndarray]] = []
    if mode == "mean":
        for u in units:
            mu = u.features.shape[0]
            out.append(np.full(mu, 1.0 / mu))
        return out
    if mode == "oracle":
        for u in units:
            if u.gt_grounding is None:
                raise ContractError(f"oracle ablation needs gt_grounding on {u.image_id!r}")
            mu = u.features.shape[0]
            w = np.zeros(mu)
            w[list(u.gt_grounding)] = 1.0 / len(u.gt_grounding)
            out.append(w)
        return out
    if mode == "random":
        rng = np.random.default_rng(seed)
        out = [None] * len(units)
        for start in range(0, len(units), batch_size):
            idx = list(range(start, min(start + batch_size, len(units))))
            perm = rng.permutation(len(idx))
            for pos, j in enumerate(idx):
                out[j] = learned[idx[int(perm[pos])]].copy()
        return out
    raise ValueError(f"unknown ablation mode {mode!r}")


def evaluate(params: ModelParams, ds: DialogDataset, *, decoder: str,
             seq_len: int = 20, max_history: int = 11, axis_mode: str = "columns",
             score_norm: str = "mean", ablate: str = "learned", seed: int = 0,
             batch_size: int = 32, posterior_diagnostics: bool = False,
             cross_residual: bool = True,
             units: Optional[list[Unit]] = None) -> EvalReport:
    """Inference-condition evaluation: ranking and grounding from the prior.

    posterior_diagnostics additionally runs the answer-aware branch to report
    its entropy (the Table-3 "with answers" protocol); it never affects the
    ranking metrics.
    """
    if units is None:
        units = prepare_units(ds, seq_len, max_history)
    if not units:
        raise ContractError("evaluate on an empty dataset")

    if ablate != "learned":
        learned = [unit_prior_weights(params, u, axis_mode, cross_residual) for u in units]
        overrides = _ablated_weights(units, learned, ablate, batch_size, seed)
    else:
        overrides = [None] * len(units)

    ranks: list[int] = []
    ndcgs: list[float] = []
    records: list[dict] = []
    entropies: list[float] = []
    for u, g_override in zip(units, overrides):
        scores, g = infer_unit_scores(params, u, decoder=decoder, axis_mode=axis_mode,
                                      score_norm=score_norm, cross_residual=cross_residual,
                                      g_override=g_override)
        ranks.append(rank_of_gt(scores, u.gt_index))
        if u.relevance is not None:
            ndcgs.append(ndcg(scores, u.relevance))
        entropies.append(distribution_entropy(g))
        records.append(attention_record(u.image_id, u.round_index, g,
                                        gt_grounding=u.gt_grounding))

    report = EvalReport(
        mrr=mrr(ranks),
        r_at_1=recall_at_k(ranks, 1),
        r_at_5=recall_at_k(ranks, 5),
        r_at_10=recall_at_k(ranks, 10),
        mean_rank=mean_rank(ranks),
        n_units=len(units),
        ndcg=float(np.mean(ndcgs)) if len(ndcgs) == len(units) else None,
        entropy_prior=float(np.mean(entropies)),
    )
    if all(u.gt_grounding is not None for u in units):
        report.grounding_top1 = grounding_accuracy(records, top_k=1)
        report.grounding_top3 = grounding_accuracy(records, top_k=3)
    if posterior_diagnostics:
        post_entropies = [
            distribution_entropy(unit_posterior_weights(params, u, axis_mode,
                                                        cross_residual=cross_residual))
            for u in units
        ]
        report.entropy_posterior = float(np.mean(post_entropies))
    return report


def ablate_distribution(params: ModelParams, ds: DialogDataset, mode: str, *,
                        decoder: str, seed: int = 0, **kw) -> EvalReport:
    """Evaluate with the prior replaced before pooling (uniform, in-batch
    shuffled, or the ground-truth oracle)."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; know {ABLATION_MODES}")
    return evaluate(params, ds, decoder=decoder, ablate=mode, seed=seed, **kw)


def export_attention(params: ModelParams, ds: DialogDataset, *, seq_len: int = 20,
                     max_history: int = 11, axis_mode: str = "columns",
                     with_posterior: bool = False, cross_residual: bool = True,
                     units: Optional[list[Unit]] = None) -> list[dict]:
    """Per-(image, round) attention records for offline analysis."""
    if units is None:
        units = prepare_units(ds, seq_len, max_history)
    records = []
    for u in units:
        g = unit_prior_weights(params, u, axis_mode, cross_residual)
        G = unit_posterior_weights(params, u, axis_mode,
                                   cross_residual=cross_residual) if with_posterior else None
        records.append(attention_record(u.image_id, u.round_index, g, G=G,
                                        gt_grounding=u.gt_grounding))
    return records
