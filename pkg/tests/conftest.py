import numpy as np
import pytest
import torch

from mre.config import small_config
from mre.kg import MultimodalKG, RelationSplit
from mre.synthetic import make_synthetic_mmkg, synthetic_vocabulary

torch.set_num_threads(1)


def make_kg(triples, num_entities=None, num_relations=None, split=None, image_size=8, seed=0):
    """In-memory graph with random images and templated texts."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    E = num_entities if num_entities is not None else int(triples[:, [0, 2]].max()) + 1
    R = num_relations if num_relations is not None else int(triples[:, 1].max()) + 1
    rng = np.random.default_rng(seed)
    return MultimodalKG(
        entity_names=tuple(f"e{i}" for i in range(E)),
        relation_names=tuple(f"r{i}" for i in range(R)),
        triples=triples,
        entity_image=rng.integers(0, 256, size=(E, image_size, image_size, 3), dtype=np.uint8),
        entity_text=tuple(f"entity number {i}" for i in range(E)),
        relation_text=tuple(f"relation number {i}" for i in range(R)),
        split=split,
    )


def random_kg(num_entities=12, num_relations=5, num_triples=40, seed=0, split=None):
    rng = np.random.default_rng(seed)
    rows = set()
    while len(rows) < num_triples:
        h, t = rng.integers(num_entities, size=2)
        rows.add((int(h), int(rng.integers(num_relations)), int(t)))
    return make_kg(sorted(rows), num_entities, num_relations, split=split, seed=seed)


def finite_difference_check(f, x, eps=1e-6, rtol=1e-4):
    """Compare autograd with central differences for scalar ``f`` at float64 ``x``."""
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    g = g.detach()
    num = torch.zeros_like(x, requires_grad=False)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        xp = flat.clone()
        xm = flat.clone()
        xp[i] += eps
        xm[i] -= eps
        num.view(-1)[i] = ((f(xp.view_as(x)) - f(xm.view_as(x))) / (2 * eps)).detach()
    err = (g - num).norm() / max(num.norm().item(), g.norm().item(), 1e-12)
    return float(err)


@pytest.fixture
def tiny_kg():
    # 3 entities, 2 relations
    return make_kg([(0, 0, 1), (1, 0, 2), (0, 1, 2)], 3, 2)


@pytest.fixture(scope="session")
def synthetic():
    kg = make_synthetic_mmkg(0)
    return kg, synthetic_vocabulary(kg)


@pytest.fixture(scope="session")
def trained(synthetic):
    """One end-to-end desk-scale run on the synthetic benchmark (seed 0)."""
    from mre.trainer import Trainer

    kg, vocab = synthetic
    trainer = Trainer(kg, vocab, small_config(seed=0))
    before = {}

    run_zs = trainer.run_zeroshot_phase

    def spy():
        before["encoder"] = trainer.model.checksum("encoder")
        before["consolidator"] = trainer.model.checksum("consolidator")
        out = run_zs()
        before["encoder_after"] = trainer.model.checksum("encoder")
        before["consolidator_after"] = trainer.model.checksum("consolidator")
        return out

    trainer.run_zeroshot_phase = spy
    trainer.fit()
    trainer.checksums = before
    return trainer
