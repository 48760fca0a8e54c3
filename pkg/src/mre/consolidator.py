"""Relational graph convolution over CLS entity features, translational scoring and margin loss."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionMismatch, UnknownRelation
from .kg import Subgraph


class RelationBank:
    """Maps global relation ids to rows of the per-relation weight tensor.

    Row ``i`` serves forward edges of ``relations[i]``; with inverse edges,
    row ``n + i`` serves the reversed direction.
    """

    def __init__(self, relations, inverse_edges=True):
        self.relations = tuple(sorted(int(r) for r in relations))
        self.index = {r: i for i, r in enumerate(self.relations)}
        self.inverse_edges = inverse_edges

    def __len__(self):
        return len(self.relations) * (2 if self.inverse_edges else 1)

    def __contains__(self, r):
        return int(r) in self.index

    def edges(self, triples: np.ndarray, local) -> tuple:
        """(src, dst, row) index tensors for message passing; ``local`` maps global entity ids."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if len(triples) == 0:
            z = torch.empty(0, dtype=torch.long)
            return z, z, z
        rows = []
        for r in triples[:, 1].tolist():
            if r not in self.index:
                raise UnknownRelation(f"relation {r} has no weights in the bank")
            rows.append(self.index[r])
        rows = np.asarray(rows, dtype=np.int64)
        h, t = local(triples[:, 0]), local(triples[:, 2])
        src, dst, rel = [h], [t], [rows]
        if self.inverse_edges:
            src.append(t)
            dst.append(h)
            rel.append(rows + len(self.relations))
        return tuple(torch.as_tensor(np.concatenate(a)) for a in (src, dst, rel))


class RelationalGraphConv(nn.Module):
    """x'_e = LeakyReLU( sum_r sum_{j in N_e^r} W_r x_j / |N_e^r| + W_0 x_e )."""

    def __init__(self, dim, num_rows, num_bases=0, slope=0.01, activation=True):
        super().__init__()
        self.dim = dim
        self.slope = slope
        self.activation = activation
        self.num_bases = num_bases
        if num_bases and num_bases < num_rows:
            self.bases = nn.Parameter(torch.empty(num_bases, dim, dim))
            self.coeff = nn.Parameter(torch.empty(num_rows, num_bases))
            nn.init.xavier_uniform_(self.bases)
            nn.init.xavier_uniform_(self.coeff)
        else:
            self.num_bases = 0
            self.weight = nn.Parameter(torch.empty(num_rows, dim, dim))
            for w in self.weight.data:
                nn.init.xavier_uniform_(w)
        self.self_loop = nn.Parameter(torch.empty(dim, dim))
        nn.init.xavier_uniform_(self.self_loop)

    def relation_weights(self) -> torch.Tensor:
        if self.num_bases:
            return torch.einsum("rb,bij->rij", self.coeff, self.bases)
        return self.weight

    def forward(self, x, src, dst, rel):
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"expected width {self.dim}, got {x.shape[-1]}")
        N = x.shape[0]
        W = self.relation_weights()
        out = x @ self.self_loop.T
        if len(src):
            R = W.shape[0]
            key = dst * R + rel
            count = torch.bincount(key, minlength=N * R).to(x.dtype)
            norm = 1.0 / count[key]
            msg = torch.empty(len(src), self.dim, dtype=x.dtype)
            for r in torch.unique(rel).tolist():
                sel = rel == r
                msg[sel] = x[src[sel]] @ W[r].T
            out = out.index_add(0, dst, msg * norm[:, None])
        return F.leaky_relu(out, self.slope) if self.activation else out


class StructureConsolidator(nn.Module):
    """Stack of relational graph convolutions (two by default) over a fixed relation bank."""

    def __init__(self, dim, relations, layers=2, num_bases=0, slope=0.01, inverse_edges=True):
        super().__init__()
        self.bank = RelationBank(relations, inverse_edges)
        self.layers = nn.ModuleList(
            RelationalGraphConv(dim, len(self.bank), num_bases, slope) for _ in range(layers)
        )

    def forward(self, x0, subgraph: Subgraph, return_all=False):
        """``x0`` holds CLS features for ``subgraph.entities`` in order."""
        if x0.shape[0] != len(subgraph.entities):
            raise DimensionMismatch("one feature row per subgraph entity is required")
        src, dst, rel = self.bank.edges(subgraph.triples, subgraph.local)
        xs = [x0]
        for layer in self.layers:
            xs.append(layer(xs[-1], src, dst, rel))
        return xs if return_all else xs[-1]


def aggregate(subgraph: Subgraph, x, layer: RelationalGraphConv, bank: RelationBank):
    """One aggregation step of ``layer`` over ``subgraph``."""
    return layer(x, *bank.edges(subgraph.triples, subgraph.local))


def transe_score(x_h, x_r, x_t):
    """||x_h + x_r - x_t||_2 along the last axis."""
    if not (x_h.shape[-1] == x_r.shape[-1] == x_t.shape[-1]):
        raise DimensionMismatch("head, relation and tail embeddings must share a dimension")
    return torch.linalg.vector_norm(x_h + x_r - x_t, dim=-1)


def margin_loss(pos_scores, neg_scores, gamma=1.0, reduction="sum"):
    """Paired hinge [gamma + f(pos) - f(neg)]_+ summed (or averaged) over pairs."""
    hinge = F.relu(gamma + pos_scores - neg_scores)
    return hinge.sum() if reduction == "sum" else hinge.mean()


def encode_relation_for_scoring(relation_ids, learner, projector):
    """x_r = Phi_P(CLS of the unmasked description)."""
    cls = learner.encode_text(relation_ids)
    if cls.shape[-1] != projector.in_features:
        raise DimensionMismatch("projector input does not match the encoder width")
    return projector(cls)


def xavier_bound(fan_in, fan_out, gain=1.0):
    return gain * math.sqrt(6.0 / (fan_in + fan_out))
