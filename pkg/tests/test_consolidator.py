import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import finite_difference_check
from mre.consolidator import (
    RelationBank,
    RelationalGraphConv,
    StructureConsolidator,
    aggregate,
    encode_relation_for_scoring,
    margin_loss,
    transe_score,
)
from mre.errors import UnknownRelation
from mre.kg import make_subgraph


def dense_layer(x, triples, relations, layer, inverse=True):
    """Brute-force evaluation with dense per-row normalized adjacency matrices."""
    N = x.shape[0]
    W = layer.relation_weights()
    n = len(relations)
    out = x @ layer.self_loop.T
    for i, r in enumerate(relations):
        dirs = [(0, 2, i)] + ([(2, 0, n + i)] if inverse else [])
        for s, d, row in dirs:
            A = torch.zeros(N, N, dtype=x.dtype)
            for tr in triples:
                if tr[1] == r:
                    A[tr[d], tr[s]] = 1.0
            deg = A.sum(1, keepdim=True)
            A = torch.where(deg > 0, A / deg.clamp(min=1), A)
            out = out + A @ (x @ W[row].T)
    return F.leaky_relu(out, layer.slope)


def random_graph(N, R, T, seed):
    rng = np.random.default_rng(seed)
    rows = set()
    while len(rows) < T:
        rows.add((int(rng.integers(N)), int(rng.integers(R)), int(rng.integers(N))))
    return np.asarray(sorted(rows))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("bases", [0, 2])
def test_sparse_matches_dense_oracle(seed, bases):
    torch.manual_seed(seed)
    triples = random_graph(50, 4, 150, seed)
    sg = make_subgraph(triples)
    # compact ids so every node of the subgraph is a row
    x = torch.randn(len(sg.entities), 8, dtype=torch.float64)
    local = np.stack([sg.local(triples[:, 0]), triples[:, 1], sg.local(triples[:, 2])], 1)
    bank = RelationBank(range(4))
    layer = RelationalGraphConv(8, len(bank), bases).double()
    got = aggregate(sg, x, layer, bank)
    want = dense_layer(x, local.tolist(), list(range(4)), layer)
    assert (got - want).abs().max().item() < 1e-6


def test_four_node_fixture_two_layers():
    torch.manual_seed(0)
    triples = np.array([[0, 0, 1], [1, 0, 2], [2, 1, 3], [3, 0, 0], [0, 1, 2]])
    sg = make_subgraph(triples)
    model = StructureConsolidator(4, [0, 1]).double()
    x = torch.randn(4, 4, dtype=torch.float64)
    h = x
    for layer in model.layers:
        h = dense_layer(h, triples.tolist(), [0, 1], layer)
    assert torch.allclose(model(x, sg), h, atol=1e-6)


def test_isolated_node_uses_only_self_loop():
    layer = RelationalGraphConv(3, 2).double()
    x = torch.randn(2, 3, dtype=torch.float64)
    e = torch.empty(0, dtype=torch.long)
    assert torch.allclose(layer(x, e, e, e), F.leaky_relu(x @ layer.self_loop.T, 0.01))


def test_single_neighbor_identity_probe():
    layer = RelationalGraphConv(3, 1).double()
    with torch.no_grad():
        layer.weight[0] = torch.eye(3)
        layer.self_loop.zero_()
    x = torch.rand(2, 3, dtype=torch.float64) + 0.1
    out = layer(x, torch.tensor([0]), torch.tensor([1]), torch.tensor([0]))
    assert torch.allclose(out[1], x[0])


def test_locality_three_hops():
    # path 0-1-2-3-4 ; node 0's 2-layer output ignores nodes 3 and 4
    triples = np.array([[i, 0, i + 1] for i in range(4)])
    sg = make_subgraph(triples)
    torch.manual_seed(1)
    model = StructureConsolidator(5, [0]).double()
    x = torch.randn(5, 5, dtype=torch.float64)
    y = x.clone()
    y[3] += 10.0
    y[4] -= 7.0
    assert torch.equal(model(x, sg)[0], model(y, sg)[0])
    assert not torch.equal(model(x, sg)[2], model(y, sg)[2])


def test_unknown_relation_rejected():
    sg = make_subgraph(np.array([[0, 5, 1]]))
    with pytest.raises(UnknownRelation):
        StructureConsolidator(4, [0, 1])(torch.zeros(2, 4), sg)


def test_transe_cases():
    t = torch.tensor
    assert transe_score(t([1.0, 0.0]), t([0.0, 1.0]), t([1.0, 1.0])).item() == 0.0
    assert transe_score(torch.zeros(2), torch.zeros(2), torch.zeros(2)).item() == 0.0
    assert transe_score(t([1.0, 2.0]), t([3.0, 4.0]), t([0.0, 0.0])).item() == pytest.approx(math.sqrt(52), abs=1e-6)


def test_transe_translation_invariance():
    # dyadic values keep the shift exact in floating point
    h = torch.tensor([0.5, -1.25, 2.0])
    r = torch.tensor([0.25, 0.75, -0.5])
    tail = torch.tensor([1.0, 0.5, 0.125])
    c = torch.tensor([4.0, -8.0, 0.5])
    assert transe_score(h + c, r, tail + c).item() == transe_score(h, r, tail).item()


def test_margin_hinge_cases():
    t = torch.tensor
    assert margin_loss(t([0.0]), t([2.0]), 1.0).item() == 0.0
    assert margin_loss(t([1.0]), t([1.0]), 1.0).item() == 1.0
    assert margin_loss(t([1.0, 0.0]), t([1.0, 0.0]), 1.0, "mean").item() == 1.0


def test_margin_monotone_in_negative_score():
    pos = torch.tensor([0.7])
    vals = [margin_loss(pos, torch.tensor([v]), 1.0).item() for v in np.linspace(0, 3, 31)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_margin_gradient():
    torch.manual_seed(0)
    r = torch.randn(8, dtype=torch.float64)
    t_pos, t_neg = torch.randn(8, dtype=torch.float64), torch.randn(8, dtype=torch.float64) * 3

    def f(h):
        return margin_loss(transe_score(h, r, t_pos)[None], transe_score(h, r, t_neg)[None], 5.0)

    h = torch.randn(8, dtype=torch.float64)
    assert f(h).item() > 0
    assert finite_difference_check(f, h) < 1e-4


class TextOnly(torch.nn.Module):
    def __init__(self, cls):
        super().__init__()
        self.cls = cls

    def encode_text(self, ids):
        return self.cls[ids[:, 0]]


def test_zero_projector_returns_bias():
    proj = torch.nn.Linear(4, 4)
    with torch.no_grad():
        proj.weight.zero_()
        proj.bias.copy_(torch.tensor([1.0, 2.0, 3.0, 4.0]))
    out = encode_relation_for_scoring(torch.tensor([[0], [1]]), TextOnly(torch.randn(2, 4)), proj)
    assert torch.equal(out, proj.bias.expand(2, -1))


def test_identity_slice_projector_reproduces_cls_prefix():
    cls = torch.randn(3, 6)
    proj = torch.nn.Linear(6, 2)
    with torch.no_grad():
        proj.weight.copy_(torch.eye(6)[:2])
        proj.bias.zero_()
    out = encode_relation_for_scoring(torch.tensor([[0], [2]]), TextOnly(cls), proj)
    assert out.shape == (2, 2) and torch.allclose(out, cls[[0, 2], :2])
