"""Entity-pair feature extractor and the adversarial relation-embedding generator."""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionMismatch, EmptySet, MissingCenter, ValidationError

log = logging.getLogger(__name__)


def _fc(d_in, d_out, hidden=0):
    if not hidden:
        return nn.Linear(d_in, d_out)
    return nn.Sequential(nn.Linear(d_in, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, d_out))


def _index(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.long()
    return torch.from_numpy(np.array(x, dtype=np.int64))


class NeighborIndex:
    """Undirected one-hop neighbourhoods of the structure graph (self-loops dropped)."""

    def __init__(self, num_entities: int, triples: np.ndarray):
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        a = np.concatenate([triples[:, 0], triples[:, 2]])
        b = np.concatenate([triples[:, 2], triples[:, 0]])
        keep = a != b
        keys = np.unique(a[keep] * num_entities + b[keep])
        self.num_entities = num_entities
        self.keys = keys
        self.rows = torch.as_tensor(keys // num_entities)
        self.cols = torch.as_tensor(keys % num_entities)
        self.degree = torch.bincount(self.rows, minlength=num_entities)

    def are_neighbors(self, a, b) -> torch.Tensor:
        q = np.asarray(a, dtype=np.int64) * self.num_entities + np.asarray(b, dtype=np.int64)
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, max(len(self.keys) - 1, 0))
        hit = self.keys[pos] == q if len(self.keys) else np.zeros_like(q, dtype=bool)
        return torch.as_tensor(hit)

    def neighbor_sum(self, z: torch.Tensor) -> torch.Tensor:
        return torch.zeros_like(z).index_add(0, self.rows, z[self.cols])


class FeatureExtractor(nn.Module):
    """Maps an entity pair (with neighbour context) to one embedding x_(h,t).

    psi1 encodes the two entities (tanh of the concatenation gives the pair's
    relation code), psi2 encodes neighbours, psi3 projects
    ``x_h^new + x_r + x_t^new`` (concatenated) back to the entity width.
    """

    def __init__(self, dim, hidden=0):
        super().__init__()
        self.dim = dim
        self.psi1 = nn.Linear(dim, dim)
        self.psi2 = nn.Linear(dim, dim)
        self.psi3 = _fc(4 * dim, dim, hidden)

    def relation_code(self, x_h, x_t):
        return torch.tanh(torch.cat([self.psi1(x_h), self.psi1(x_t)], dim=-1))

    def combine(self, new_h, x_r, new_t):
        return self.psi3(torch.cat([new_h, x_r, new_t], dim=-1))

    def neighbor_encoding(self, table, entities, partners, neighbors: NeighborIndex, z=None, s=None):
        """Mean psi2 over each entity's neighbours, leaving out its partner in the pair.

        Entities without any other neighbour fall back to psi2 of their own embedding.
        """
        if z is None:
            z = self.psi2(table)
        if s is None:
            s = neighbors.neighbor_sum(z)
        entities = _index(entities)
        partners = _index(partners)
        linked = neighbors.are_neighbors(entities.numpy(), partners.numpy()).to(z.dtype)
        count = neighbors.degree[entities].to(z.dtype) - linked
        total = s[entities] - linked[:, None] * z[partners]
        isolated = count <= 0
        if bool(isolated.any()):
            log.debug("%d entities have no neighbours besides their partner", int(isolated.sum()))
        safe = torch.where(isolated, torch.ones_like(count), count)
        return torch.where(isolated[:, None], z[entities], total / safe[:, None])

    def forward(self, table, heads, tails, neighbors: NeighborIndex):
        """x_(h,t) for index vectors ``heads``/``tails`` into the entity ``table``."""
        if table.shape[-1] != self.dim:
            raise DimensionMismatch(f"entity table width {table.shape[-1]} != {self.dim}")
        heads = _index(heads)
        tails = _index(tails)
        z = self.psi2(table)
        s = neighbors.neighbor_sum(z)
        new_h = self.neighbor_encoding(table, heads, tails, neighbors, z, s)
        new_t = self.neighbor_encoding(table, tails, heads, neighbors, z, s)
        return self.combine(new_h, self.relation_code(table[heads], table[tails]), new_t)


def extractor_loss(x_ref, x_pos, x_neg, gamma_f=0.5, literal=False):
    """Mean over positives of [gamma_f + cos(tar, neg) - cos(tar, pos)]_+, tar = mean of ``x_ref``.

    ``literal=True`` swaps pos/neg inside the hinge.
    """
    if len(x_ref) == 0 or len(x_pos) == 0 or len(x_neg) == 0:
        raise EmptySet("reference, positive and negative sets must be nonempty")
    if len(x_pos) != len(x_neg):
        raise ValidationError("one negative per positive is required")
    tar = x_ref.mean(0, keepdim=True)
    cp = F.cosine_similarity(tar, x_pos, dim=-1)
    cn = F.cosine_similarity(tar, x_neg, dim=-1)
    if literal:
        cp, cn = cn, cp
    return F.relu(gamma_f + cn - cp).mean()


class ClusterStats:
    """Running per-relation sums so centers can be updated batch by batch."""

    def __init__(self, dim):
        self.dim = dim
        self.sums: dict = {}
        self.counts: dict = {}

    def add(self, relation, embeddings):
        emb = torch.as_tensor(embeddings).detach().to(torch.float64).reshape(-1, self.dim)
        r = int(relation)
        self.sums[r] = self.sums.get(r, torch.zeros(self.dim, dtype=torch.float64)) + emb.sum(0)
        self.counts[r] = self.counts.get(r, 0) + len(emb)

    def center(self, relation) -> torch.Tensor:
        r = int(relation)
        if not self.counts.get(r):
            raise MissingCenter(f"no entity pairs recorded for relation {r}")
        return self.sums[r] / self.counts[r]

    def centers(self, relations) -> torch.Tensor:
        return torch.stack([self.center(r) for r in relations])


class NoiseLayer(nn.Module):
    """Phi_N: (CLS + z) -> noisy relation embedding."""

    def __init__(self, dim, noise_dim):
        super().__init__()
        self.dim = dim
        self.noise_dim = noise_dim
        self.fc = nn.Linear(dim + noise_dim, dim)

    def forward(self, cls, z):
        if cls.shape[-1] != self.dim or z.shape[-1] != self.noise_dim:
            raise DimensionMismatch("CLS or noise width does not match the noise layer")
        return F.leaky_relu(self.fc(torch.cat([cls, z], dim=-1)), 0.2)


def generate(cls, z, noise_layer: NoiseLayer, projector: nn.Module):
    """x_fa = Phi_P(Phi_N(CLS + z))."""
    return projector(noise_layer(cls, z))


class Discriminator(nn.Module):
    def __init__(self, dim, hidden=0):
        super().__init__()
        hidden = hidden or dim
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, 1))

    def forward(self, x):
        return self.net(x).squeeze(-1)


def gradient_penalty(dis, real, fake, eps=None, generator=None):
    """E[(||grad Dis(x_hat)||_2 - 1)^2] on random interpolates x_hat of real and fake."""
    if eps is None:
        eps = torch.rand(real.shape[0], 1, generator=generator, dtype=real.dtype)
    x_hat = (eps * real + (1 - eps) * fake).requires_grad_(True)
    out = dis(x_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    return ((grad.norm(2, dim=-1) - 1) ** 2).mean()


def classification_loss(classifier, x, labels):
    return F.cross_entropy(classifier(x), torch.as_tensor(labels, dtype=torch.long))


def generator_loss(x_fa, labels, dis, classifier, centers):
    """-E[Dis(x_fa)] + L_cls(x_fa) + mean ||x_fa - x_tr(label)||^2.

    ``centers`` is indexed by ``labels``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(labels) and (int(labels.max()) >= len(centers) or int(labels.min()) < 0):
        raise MissingCenter("a generated embedding has no matching cluster center")
    target = centers[labels]
    if not torch.isfinite(target).all():
        raise MissingCenter("cluster center is not finite")
    pivot = ((x_fa - target) ** 2).sum(-1).mean()
    return -dis(x_fa).mean() + classification_loss(classifier, x_fa, labels) + pivot


def discriminator_loss(x_tr, x_fa, dis, classifier, labels, lam=1.0, gp_weight=10.0, eps=None, generator=None):
    """E[Dis(x_fa)] - E[Dis(x_tr)] + lam * L_cls(x_tr) + gp_weight * GP.

    ``labels`` are the relation classes of ``x_tr``; the penalty pairs
    ``x_tr[i]`` with ``x_fa[i]``.
    """
    if len(x_tr) == 0 or len(x_fa) == 0:
        raise EmptySet("critic batches must be nonempty")
    loss = dis(x_fa).mean() - dis(x_tr).mean()
    if lam:
        loss = loss + lam * classification_loss(classifier, x_tr, labels)
    if gp_weight:
        loss = loss + gp_weight * gradient_penalty(dis, x_tr, x_fa, eps, generator)
    return loss


def infer_relation_embedding(cls, noise_layer: NoiseLayer, projector, n_noise=20, seed=0):
    """Average of ``n_noise`` generated embeddings for one description CLS (d,) or a batch (B, d)."""
    if n_noise < 1:
        raise ValidationError("n_noise must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    single = cls.dim() == 1
    cls = cls.reshape(-1, cls.shape[-1])
    z = torch.randn(n_noise, cls.shape[0], noise_layer.noise_dim, generator=gen, dtype=cls.dtype)
    out = generate(cls.expand(n_noise, -1, -1), z, noise_layer, projector).mean(0)
    return out[0] if single else out
