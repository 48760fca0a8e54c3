import csv
import math

import numpy as np
import pytest
import torch

from conftest import make_kg
from mre.config import small_config
from mre.errors import UnknownQuery, ValidationError
from mre.evaluation import (
    HITS_AT,
    aggregate_metrics,
    build_candidates,
    cosine_scores,
    export_embeddings,
    rank_of,
    read_embeddings,
    run_eval,
    score_and_rank,
    sweep,
    uniform_rank_baseline,
)
from mre.kg import RelationSplit
from mre.model import MREModel, TokenizedKG
from mre.synthetic import make_synthetic_mmkg, synthetic_vocabulary


def brute_rank(scores, idx, ties):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    better = sum(1 for s in scores if s > scores[idx])
    equal = sum(1 for s in scores if s == scores[idx]) - 1
    if ties == "optimistic":
        return better + 1
    if ties == "pessimistic":
        return better + equal + 1
    assert order  # mean
    return better + 1 + equal / 2


def test_metrics_example():
    res = aggregate_metrics([1, 2, 4])
    assert res.mrr == pytest.approx((1 + 0.5 + 0.25) / 3, abs=1e-15)
    assert res.hits[1] == pytest.approx(1 / 3)
    ones = aggregate_metrics([1] * 7)
    assert ones.mrr == 1.0 and all(ones.hits[k] == 1.0 for k in HITS_AT)


def test_metrics_against_recomputation():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        ranks = rng.integers(1, 60, size=int(rng.integers(1, 12)))
        res = aggregate_metrics(ranks)
        assert res.mrr == sum(1.0 / r for r in ranks.tolist()) / len(ranks) or math.isclose(
            res.mrr, sum(1.0 / r for r in ranks.tolist()) / len(ranks), rel_tol=0, abs_tol=1e-15)
        for k in HITS_AT:
            assert res.hits[k] == sum(1 for r in ranks.tolist() if r <= k) / len(ranks)
        assert res.hits[1] <= res.hits[5] <= res.hits[10] <= 1
        assert res.hits[1] <= res.mrr <= 1


def test_rank_against_sort_oracle():
    rng = np.random.default_rng(1)
    for trial in range(10_000):
        n = int(rng.integers(1, 100))
        # coarse values produce ties regularly
        scores = rng.integers(0, 20, size=n).astype(float) if trial % 2 else rng.normal(size=n)
        idx = int(rng.integers(n))
        for ties in ("optimistic", "pessimistic", "mean"):
            rank, tied = rank_of(scores, idx, ties)
            assert rank == brute_rank(scores.tolist(), idx, ties)
            assert tied == (np.sum(scores == scores[idx]) > 1)


def test_rank_edge_cases():
    assert rank_of(np.array([0.1, 0.9, 0.3]), 1) == (1, False)
    rank, tied = rank_of(np.ones(5), 3)
    assert rank == 1 and tied


def test_rank_stable_under_worse_candidate():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=30)
    idx = 4
    r0, _ = rank_of(scores, idx)
    r1, _ = rank_of(np.append(scores, scores[idx] - 1.0), idx)
    assert r0 == r1


def test_zero_vector_scores_minus_infinity():
    pairs = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    s = cosine_scores(pairs, torch.tensor([1.0, 0.0]))
    assert s[0] == pytest.approx(1.0) and s[1] == -np.inf


def test_uniform_baseline_is_harmonic_mean():
    for n in (1, 2, 10, 50):
        assert uniform_rank_baseline([n]) == pytest.approx(sum(1 / k for k in range(1, n + 1)) / n)


def unseen_fixture():
    triples = [(0, 0, 1), (1, 0, 2), (2, 1, 3), (3, 1, 0), (0, 2, 1), (0, 2, 3), (2, 2, 1)]
    return make_kg(triples, 5, 3, split=RelationSplit([0, 1], [], [2]))


def test_candidates_unfiltered_and_filtered():
    kg = unseen_fixture()
    c = build_candidates(kg, (0, 2, 1))
    assert sorted(c.candidates.tolist()) == list(range(kg.num_entities))
    assert c.candidates[c.true_index] == 1
    f = build_candidates(kg, (0, 2, 1), filtered=True)
    # (0, 2, 3) is the one other true tail
    assert len(f.candidates) == kg.num_entities - 1
    brute = {e for e in range(kg.num_entities) if e == 1 or (0, 2, e) not in kg.triple_set}
    assert set(f.candidates.tolist()) == brute
    assert len(set(f.candidates.tolist())) == len(f.candidates)


def test_candidates_reject_unknown_queries():
    kg = unseen_fixture()
    with pytest.raises(UnknownQuery):
        build_candidates(kg, (0, 0, 1))  # seen relation
    with pytest.raises(UnknownQuery):
        build_candidates(kg, (4, 2, 4))  # not a triple


def test_score_and_rank_uses_cosine():
    kg = unseen_fixture()
    c = build_candidates(kg, (0, 2, 1))
    emb = torch.eye(kg.num_entities)

    def pairs(heads, tails):
        return emb[torch.as_tensor(tails)]

    rank, tied = score_and_rank(c, pairs, emb[1] * 3.0)
    assert rank == 1 and not tied


@pytest.fixture(scope="module")
def untrained_setup():
    kg = make_synthetic_mmkg(0)
    vocab = synthetic_vocabulary(kg)
    cfg = small_config()
    return kg, vocab, cfg, TokenizedKG.build(kg, vocab, cfg)


def test_untrained_model_matches_uniform_baseline(untrained_setup):
    kg, vocab, cfg, data = untrained_setup
    mrrs = []
    for seed in range(50):
        torch.manual_seed(seed)
        model = MREModel(cfg, len(vocab), kg.train_relations)
        rep = run_eval(kg, model, data, 20, seed)
        mrrs.append(rep.overall.mrr)
    base = rep.as_dict()["uniform_baseline_mrr"]
    sigma = np.std(mrrs, ddof=1) / math.sqrt(len(mrrs))
    assert abs(np.mean(mrrs) - base) < 3 * sigma


def test_run_eval_consistency_and_purity(trained):
    kg, model, data = trained.kg, trained.model, trained.data
    before = {g: model.checksum(g) for g in ("encoder", "decoder", "consolidator", "projector", "noise", "extractor")}
    rels = sorted(kg.relations)
    rep = run_eval(kg, model, data, 20, 0, relations=rels)
    weighted = sum(r.mrr * r.count for r in rep.per_relation.values()) / sum(r.count for r in rep.per_relation.values())
    assert rep.overall.mrr == pytest.approx(weighted, abs=1e-12)
    assert rep.overall.count == len(kg.triples)
    for k in HITS_AT:
        assert rep.overall.hits[k] == pytest.approx(
            sum(r.hits[k] * r.count for r in rep.per_relation.values()) / rep.overall.count)
    assert before == {g: model.checksum(g) for g in before}
    one = run_eval(kg, model, data, 1, 0)
    assert 0 < one.overall.mrr <= 1
    assert small_config().eval.n_noise == 20
    again = run_eval(kg, model, data, 20, 0, relations=rels)
    assert again.as_dict() == rep.as_dict()


def test_report_csv(trained, tmp_path):
    rep = run_eval(trained.kg, trained.model, trained.data, 20, 0)
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][:3] == ["relation", "count", "MRR"] and rows[-1][0] == "ALL"
    assert len(rows) == 1 + len(trained.kg.unseen_relations) + 1


def test_export_row_count_and_centers(tmp_path):
    kg = make_synthetic_mmkg(0, per_class=20, heads_per_relation=5, relations=((0, 1), (1, 2), (2, 3), (3, 4), (4, 0)),
                             num_unseen=0)
    assert all(len(kg.triple_indices(r)) == 100 for r in kg.relations)
    vocab = synthetic_vocabulary(kg)
    cfg = small_config()
    torch.manual_seed(0)
    model = MREModel(cfg, len(vocab), kg.train_relations)
    data = TokenizedKG.build(kg, vocab, cfg)
    rows = export_embeddings(tmp_path / "e.csv", kg, model, data, list(kg.relations))
    assert rows == 505 + 5
    kinds, rels, mat = read_embeddings(tmp_path / "e.csv")
    assert len(kinds) == rows and mat.shape == (rows, cfg.learner.embed_dim)
    assert kinds.count("pair") == 500 and kinds.count("generated") == 5 and kinds.count("center") == 5
    assert set(rels) == set(kg.relation_names)
    kinds, rels = np.asarray(kinds), np.asarray(rels)
    for name in kg.relation_names:
        pairs = mat[(kinds == "pair") & (rels == name)]
        center = mat[(kinds == "center") & (rels == name)][0]
        assert np.abs(pairs.mean(0) - center).max() < 1e-6


def test_sweep_writes_one_row_per_value(tmp_path):
    kg = make_synthetic_mmkg(0)
    vocab = synthetic_vocabulary(kg)
    cfg = small_config(fusion_epochs=1, extractor_steps=2, gan_steps=2)
    rows = sweep("mask_ratio", [0.15, 0.45, 0.75, 0.9], cfg, kg, vocab, tmp_path)
    assert [r["status"] for r in rows] == ["ok"] * 4
    table = list(csv.DictReader(open(tmp_path / "sweep_mask_ratio.csv")))
    assert len(table) == 4 and (tmp_path / "sweep_mask_ratio.png").stat().st_size > 0
    # a failing cell is recorded, not raised
    rows = sweep("noise_dim", [0, 4], cfg, kg, vocab, tmp_path, make_plot=False)
    assert rows[0]["status"].startswith("failed") and rows[1]["status"] == "ok"
    with pytest.raises(ValidationError):
        sweep("bogus", [1], cfg, kg, vocab, tmp_path)
