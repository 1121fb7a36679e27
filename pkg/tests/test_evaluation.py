import math

import numpy as np
import pytest

from grounddial.autodiff import ContractError, InvalidDistributionError
from grounddial.data import SyntheticConfig, generate_synthetic
from grounddial.evaluation import (
    EvalReport,
    ablate_distribution,
    distribution_entropy,
    evaluate,
    export_attention,
    grounding_accuracy,
    mean_rank,
    mrr,
    ndcg,
    rank_of_gt,
    recall_at_k,
)
from grounddial.model import init_model_params


# ---------------------------------------------------------------------------
# independent brute-force oracles, written from the definitions only

def oracle_rank(scores, gt_index):
    """Sort candidate indices by (-score, index); rank = 1 + position of gt."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order.index(gt_index) + 1


def oracle_mrr(ranks):
    return sum(1.0 / r for r in ranks) / len(ranks)


def oracle_recall(ranks, k):
    return sum(1 for r in ranks if r <= k) / len(ranks)


def oracle_mean_rank(ranks):
    return sum(ranks) / len(ranks)


def oracle_ndcg(scores, relevance):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    dcg = sum(relevance[i] / math.log2(pos + 2) for pos, i in enumerate(order))
    ideal_order = sorted(range(len(scores)), key=lambda i: -relevance[i])
    idcg = sum(relevance[i] / math.log2(pos + 2) for pos, i in enumerate(ideal_order))
    return dcg / idcg


# ---------------------------------------------------------------------------
# rank_of_gt

def test_rank_unique_max_is_one():
    assert rank_of_gt([0.1, 0.9, 0.3], 1) == 1


def test_rank_all_tied_lowest_index_wins():
    assert rank_of_gt([0.5] * 100, 0) == 1
    assert rank_of_gt([0.5] * 100, 99) == 100


def test_rank_hand_sorted():
    assert rank_of_gt([0.1, 0.9, 0.5], 2) == 2


def test_rank_index_error():
    with pytest.raises(IndexError):
        rank_of_gt([0.1, 0.2], 2)


# ---------------------------------------------------------------------------
# aggregates

def test_mrr_values():
    assert mrr([1, 1, 1]) == 1.0
    assert mrr([2, 4]) == 0.375


def test_recall_boundary_inclusive():
    assert recall_at_k([5], 5) == 1.0
    assert recall_at_k([1, 6, 11], 5) == pytest.approx(1 / 3)
    assert recall_at_k([3, 7], 100) == 1.0


def test_mean_rank_values():
    assert mean_rank([1, 1, 1]) == 1.0
    assert mean_rank([1, 3]) == 2.0
    assert mean_rank([7]) == 7.0
    with pytest.raises(ContractError):
        mean_rank([])


# ---------------------------------------------------------------------------
# ndcg

def test_ndcg_ideal_order_is_one():
    assert ndcg([0.9, 0.5, 0.1], [1.0, 0.5, 0.0]) == pytest.approx(1.0)


def test_ndcg_two_item_hand_value():
    val = ndcg([0.1, 0.9], [1.0, 0.0])  # 0-relevance candidate ranked first
    assert val == pytest.approx(1.0 / math.log2(3.0), abs=1e-12)
    assert abs(val - 0.6309) < 1e-4


def test_ndcg_all_zero_relevance_errors():
    with pytest.raises(ContractError):
        ndcg([0.5, 0.5], [0.0, 0.0])


def test_metrics_match_oracles_on_200_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(2, 21))
        scores = rng.normal(size=n)
        if rng.random() < 0.3:  # force ties sometimes
            scores = np.round(scores, 1)
        relevance = rng.random(n)
        relevance[int(rng.integers(n))] = 1.0
        gt = int(np.argmax(relevance))
        r_impl = rank_of_gt(scores, gt)
        assert r_impl == oracle_rank(list(scores), gt)
        assert abs(ndcg(scores, relevance) - oracle_ndcg(list(scores), list(relevance))) < 1e-9
    ranks = [oracle_rank(list(np.random.default_rng(s).normal(size=10)), 3) for s in range(40)]
    assert abs(mrr(ranks) - oracle_mrr(ranks)) < 1e-9
    for k in (1, 5, 10):
        assert abs(recall_at_k(ranks, k) - oracle_recall(ranks, k)) < 1e-9
    assert abs(mean_rank(ranks) - oracle_mean_rank(ranks)) < 1e-9


def test_recall_monotonicity_random_runs():
    rng = np.random.default_rng(7)
    for _ in range(50):
        ranks = list(rng.integers(1, 30, size=20))
        r1, r5, r10 = (recall_at_k(ranks, k) for k in (1, 5, 10))
        assert r1 <= r5 <= r10
        assert mrr(ranks) >= r1


# ---------------------------------------------------------------------------
# grounding accuracy

def test_grounding_one_hot_correct():
    recs = [{"image_id": "a", "round": 0, "prior": [0.0, 1.0, 0.0], "gt_grounding": [1]}]
    assert grounding_accuracy(recs, top_k=1) == 1.0


def test_grounding_uniform_expected_three_eighths():
    """Uniform prior over 8 regions, top-3 by the index tie rule, gt cycling
    over every index: exactly 3/8 of the records hit."""
    recs = [
        {"image_id": "u", "round": i, "prior": [1.0 / 8] * 8, "gt_grounding": [i]}
        for i in range(8)
    ]
    assert grounding_accuracy(recs, top_k=3) == pytest.approx(3 / 8)


def test_grounding_missing_annotation_errors():
    with pytest.raises(ContractError):
        grounding_accuracy([{"image_id": "a", "round": 0, "prior": [1.0]}])


# ---------------------------------------------------------------------------
# entropy

def test_entropy_one_hot_zero():
    assert distribution_entropy([0.0, 1.0, 0.0]) == 0.0


def test_entropy_uniform_log_mu():
    assert distribution_entropy([0.25] * 4) == pytest.approx(math.log(4.0))


def test_entropy_hand_value():
    val = distribution_entropy([0.5, 0.25, 0.25])
    assert val == pytest.approx(1.5 * math.log(2.0), abs=1e-12)
    assert abs(val - 1.0397) < 1e-4


def test_entropy_invalid():
    with pytest.raises(InvalidDistributionError):
        distribution_entropy([0.5, 0.2])


# ---------------------------------------------------------------------------
# end-to-end evaluation plumbing

@pytest.fixture(scope="module")
def tiny_setup():
    ds = generate_synthetic(SyntheticConfig(num_images=3, seed=9))
    params = init_model_params(np.random.default_rng(0), len(ds.vocab),
                               d_v=ds.examples[0].region_features.shape[1],
                               d_e=8, d_q=8, n_heads=2, d_h=8)
    return ds, params


def test_evaluate_report_fields(tiny_setup):
    ds, params = tiny_setup
    rep = evaluate(params, ds, decoder="generative", seq_len=10, max_history=4)
    assert 0 < rep.mrr <= 1
    assert rep.r_at_1 <= rep.r_at_5 <= rep.r_at_10
    assert 1 <= rep.mean_rank <= 10
    assert rep.ndcg is not None and 0 <= rep.ndcg <= 1
    assert rep.grounding_top1 is not None
    assert rep.entropy_prior is not None
    assert rep.n_units == 9
    assert rep.entropy_posterior is None


def test_evaluate_posterior_diagnostics(tiny_setup):
    ds, params = tiny_setup
    rep = evaluate(params, ds, decoder="generative", seq_len=10, max_history=4,
                   posterior_diagnostics=True)
    assert rep.entropy_posterior is not None


def test_ablate_mean_mode_is_uniform(tiny_setup):
    ds, params = tiny_setup
    rep = ablate_distribution(params, ds, "mean", decoder="generative",
                              seq_len=10, max_history=4)
    assert isinstance(rep, EvalReport)
    mu = ds.examples[0].region_features.shape[0]
    assert rep.entropy_prior == pytest.approx(math.log(mu))


def test_ablate_oracle_and_random(tiny_setup):
    ds, params = tiny_setup
    oracle = ablate_distribution(params, ds, "oracle", decoder="generative",
                                 seq_len=10, max_history=4)
    assert oracle.grounding_top1 == 1.0
    rnd = ablate_distribution(params, ds, "random", decoder="generative",
                              seq_len=10, max_history=4, seed=3)
    assert isinstance(rnd.mrr, float)
    with pytest.raises(ValueError):
        ablate_distribution(params, ds, "nope", decoder="generative")


def test_ablate_deterministic(tiny_setup):
    ds, params = tiny_setup
    a = ablate_distribution(params, ds, "random", decoder="generative",
                            seq_len=10, max_history=4, seed=5)
    b = ablate_distribution(params, ds, "random", decoder="generative",
                            seq_len=10, max_history=4, seed=5)
    assert a.to_dict() == b.to_dict()


def test_export_attention_records(tiny_setup):
    ds, params = tiny_setup
    recs = export_attention(params, ds, seq_len=10, max_history=4)
    assert len(recs) == 9
    assert {"image_id", "round", "prior", "top3_prior", "gt_grounding"} <= set(recs[0])
    assert "posterior" not in recs[0]
    recs2 = export_attention(params, ds, seq_len=10, max_history=4, with_posterior=True)
    assert "posterior" in recs2[0]
