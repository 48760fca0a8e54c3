"""Zero-shot ranking evaluation, metric aggregation, sweeps and embedding export."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import UnknownQuery, ValidationError

log = logging.getLogger(__name__)

HITS_AT = (1, 5, 10)


@dataclass
class CandidateList:
    head: int
    relation: int
    tail: int
    candidates: np.ndarray  # replacement entities, true one included once
    corrupt: str = "tail"

    @property
    def true_index(self) -> int:
        target = self.tail if self.corrupt == "tail" else self.head
        return int(np.flatnonzero(self.candidates == target)[0])


def build_candidates(kg, query, filtered=False, corrupt="tail", relations=None) -> CandidateList:
    """Every entity as a replacement tail (or head); ``filtered`` drops other known answers.

    ``relations`` is the set the query relation must belong to (default: unseen relations).
    """
    h, r, t = (int(x) for x in query)
    allowed = kg.unseen_relations if relations is None else frozenset(relations)
    if r not in allowed or (h, r, t) not in kg.triple_set:
        raise UnknownQuery(f"{(h, r, t)} is not a triple of an evaluated relation")
    cands = np.arange(kg.num_entities)
    if filtered:
        if corrupt == "tail":
            others = set(kg.adjacency.get(r, {}).get(h, ())) - {t}
        else:
            others = {hh for hh, ts in kg.adjacency.get(r, {}).items() if t in ts} - {h}
        if others:
            cands = cands[~np.isin(cands, sorted(others))]
    return CandidateList(h, r, t, cands, corrupt)


def rank_of(scores, true_index: int, ties: str = "optimistic") -> tuple:
    """(rank, tied): 1-based rank of ``scores[true_index]``; ``tied`` if any other score equals it."""
    s = np.asarray(scores, dtype=np.float64)
    s = np.where(np.isnan(s), -np.inf, s)
    target = s[true_index]
    higher = int(np.sum(s > target))
    equal = int(np.sum(s == target)) - 1
    if ties == "optimistic":
        rank = 1 + higher
    elif ties == "pessimistic":
        rank = 1 + higher + equal
    elif ties == "mean":
        rank = 1 + higher + equal / 2
    else:
        raise ValidationError(f"unknown tie policy {ties!r}")
    return rank, equal > 0


def cosine_scores(pairs: torch.Tensor, x_fa: torch.Tensor) -> np.ndarray:
    """Cosine of each pair embedding with ``x_fa``; zero vectors score -inf."""
    pairs = pairs.detach().to(torch.float64)
    x = x_fa.detach().to(torch.float64).reshape(-1)
    norms = pairs.norm(dim=-1) * x.norm()
    s = (pairs @ x) / torch.where(norms > 0, norms, torch.ones_like(norms))
    s = torch.where(norms > 0, s, torch.full_like(s, -math.inf))
    zero = int((norms == 0).sum())
    if zero:
        log.warning("%d zero vectors scored as -inf", zero)
    return s.numpy()


def score_and_rank(candidates: CandidateList, pair_embedder, x_fa_mean, ties="optimistic") -> tuple:
    """``pair_embedder(heads, tails) -> (n, d)``; returns (rank, tied)."""
    c = candidates
    if c.corrupt == "tail":
        heads, tails = np.full(len(c.candidates), c.head), c.candidates
    else:
        heads, tails = c.candidates, np.full(len(c.candidates), c.tail)
    return rank_of(cosine_scores(pair_embedder(heads, tails), x_fa_mean), c.true_index, ties)


@dataclass
class RankingResult:
    ranks: np.ndarray
    mrr: float
    hits: dict
    count: int

    @property
    def hits1(self):
        return self.hits[1]

    def as_dict(self) -> dict:
        out = {"MRR": self.mrr, "count": self.count}
        out.update({f"Hits@{k}": v for k, v in self.hits.items()})
        return out


def aggregate_metrics(ranks, hits_at=HITS_AT) -> RankingResult:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValidationError("no ranks to aggregate")
    if np.any(r < 1):
        raise ValidationError("ranks are 1-based")
    mrr = float(np.mean(1.0 / r))
    hits = {k: float(np.mean(r <= k)) for k in hits_at}
    return RankingResult(r, mrr, hits, int(r.size))


def uniform_rank_baseline(num_candidates) -> float:
    """E[1/rank] when the true answer is uniformly placed among ``n`` candidates, averaged over queries."""
    n = np.atleast_1d(np.asarray(num_candidates, dtype=np.int64))
    return float(np.mean([np.sum(1.0 / np.arange(1, k + 1)) / k for k in n]))


@dataclass
class EvalReport:
    overall: RankingResult
    per_relation: dict  # relation id -> RankingResult
    tied_queries: int
    num_candidates: np.ndarray
    relation_names: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "overall": self.overall.as_dict(),
            "per_relation": {self.relation_names.get(r, str(r)): v.as_dict() for r, v in sorted(self.per_relation.items())},
            "tied_queries": self.tied_queries,
            "uniform_baseline_mrr": uniform_rank_baseline(self.num_candidates),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["relation", "count", "MRR"] + [f"Hits@{k}" for k in HITS_AT])
            for r, res in sorted(self.per_relation.items()):
                w.writerow([self.relation_names.get(r, r), res.count, res.mrr] + [res.hits[k] for k in HITS_AT])
            o = self.overall
            w.writerow(["ALL", o.count, o.mrr] + [o.hits[k] for k in HITS_AT])


def run_eval(kg, model, data, n_noise=20, seed=0, relations=None, filtered=False, ties="optimistic", corrupt="tail"):
    """Rank every triple of ``relations`` (default: the unseen relations).

    Relation embeddings are averaged over ``n_noise`` generated samples and
    candidates are scored by cosine against the extractor's pair embeddings.
    Model parameters are not modified.
    """
    rels = sorted(kg.unseen_relations if relations is None else (int(r) for r in relations))
    was_training = model.training
    model.eval()
    ranks, per_rel, sizes = [], defaultdict(list), []
    tied = 0
    with torch.no_grad():
        table = model.entity_table(kg, data)
        neighbors = model.neighbor_index(kg)

        def embed(heads, tails):
            return model.pair_embeddings(table, heads, tails, neighbors)

        for r in rels:
            x_fa = model.relation_embedding(data, r, n_noise, seed + r)
            for h, _, t in kg.triples_of(r).tolist():
                cands = build_candidates(kg, (h, r, t), filtered, corrupt, relations=rels)
                rank, is_tied = score_and_rank(cands, embed, x_fa, ties)
                tied += is_tied
                ranks.append(rank)
                per_rel[r].append(rank)
                sizes.append(len(cands.candidates))
    model.train(was_training)
    if tied:
        log.warning("%d queries had score ties (%s policy)", tied, ties)
    if not ranks:
        raise ValidationError("no evaluation triples")
    return EvalReport(
        aggregate_metrics(ranks),
        {r: aggregate_metrics(v) for r, v in per_rel.items()},
        tied,
        np.asarray(sizes),
        {r: kg.relation_names[r] for r in rels},
    )


def export_embeddings(path, kg, model, data, relations, n_noise=20, seed=0, max_pairs=None) -> int:
    """Write pair embeddings, generated relation embeddings and cluster centers to CSV.

    Columns: ``kind, relation, head, tail, e0..e{d-1}``. Returns the row count.
    """
    rows = 0
    with torch.no_grad():
        model.eval()
        table = model.entity_table(kg, data)
        neighbors = model.neighbor_index(kg)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["kind", "relation", "head", "tail"] + [f"e{i}" for i in range(model.dim)])
            centers, generated = [], []
            for r in relations:
                trip = kg.triples_of(int(r))
                if max_pairs is not None:
                    trip = trip[:max_pairs]
                emb = model.pair_embeddings(table, trip[:, 0], trip[:, 2], neighbors).to(torch.float64)
                name = kg.relation_names[int(r)]
                for (h, _, t), e in zip(trip.tolist(), emb.tolist()):
                    w.writerow(["pair", name, kg.entity_names[h], kg.entity_names[t]] + e)
                    rows += 1
                generated.append((name, model.relation_embedding(data, int(r), n_noise, seed + int(r)).tolist()))
                centers.append((name, emb.mean(0).tolist()))
            for name, e in generated:
                w.writerow(["generated", name, "", ""] + e)
                rows += 1
            for name, e in centers:
                w.writerow(["center", name, "", ""] + e)
                rows += 1
    return rows


def read_embeddings(path):
    """(kinds, relations, matrix) from an :func:`export_embeddings` file."""
    kinds, rels, vecs = [], [], []
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        next(r)
        for row in r:
            kinds.append(row[0])
            rels.append(row[1])
            vecs.append([float(x) for x in row[4:]])
    return kinds, rels, np.asarray(vecs)


SWEEP_AXES = {"split_ratio", "mask_ratio", "noise_dim"}


def sweep(axis, values, base_config, kg, vocab, out_dir, *, eval_filtered=None, make_plot=True):
    """Train and evaluate once per value of ``axis``; writes ``sweep_<axis>.csv`` (+ ``.png``).

    A failing cell is recorded with its error instead of aborting the sweep.
    """
    from .kg import generate_split
    from .trainer import Trainer

    if axis not in SWEEP_AXES:
        raise ValidationError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    if not values:
        raise ValidationError("sweep needs at least one value")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        cfg = base_config.copy()
        graph = kg
        row = {"axis": axis, "value": v}
        try:
            if axis == "split_ratio":
                graph = kg.with_split(generate_split(kg, float(v), cfg.train.seed))
            elif axis == "mask_ratio":
                cfg.set("mask_ratio", float(v))
            else:
                cfg.set("noise_dim", int(v))
            cfg.validate()
            trainer = Trainer(graph, vocab, cfg)
            trainer.fit()
            filt = cfg.eval.filtered if eval_filtered is None else eval_filtered
            rep = run_eval(graph, trainer.model, trainer.data, cfg.eval.n_noise, cfg.train.seed, filtered=filt,
                           ties=cfg.eval.ties)
            row.update(rep.overall.as_dict(), status="ok")
        except Exception as exc:  # partial tables are allowed
            log.exception("sweep cell %s=%s failed", axis, v)
            row.update(status=f"failed: {type(exc).__name__}: {exc}")
        rows.append(row)
    cols = ["axis", "value", "status", "MRR"] + [f"Hits@{k}" for k in HITS_AT] + ["count"]
    csv_path = out_dir / f"sweep_{axis}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    if make_plot:
        plot_sweep(rows, axis, out_dir / f"sweep_{axis}.png")
    return rows


def plot_sweep(rows, axis, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if ok:
        xs = [float(r["value"]) for r in ok]
        ax.plot(xs, [r["MRR"] for r in ok], "o-", label="MRR")
        ax.plot(xs, [r["Hits@1"] for r in ok], "s--", label="Hits@1")
        ax.legend()
    ax.set_xlabel(axis)
    ax.set_ylabel("score")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
