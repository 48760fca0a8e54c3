import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import finite_difference_check
from mre.errors import EmptySet, MissingCenter, ValidationError
from mre.generator import (
    ClusterStats,
    Discriminator,
    FeatureExtractor,
    NeighborIndex,
    NoiseLayer,
    discriminator_loss,
    extractor_loss,
    generate,
    generator_loss,
    gradient_penalty,
    infer_relation_embedding,
)


def identity_extractor(d):
    fe = FeatureExtractor(d).double()
    with torch.no_grad():
        for lin in (fe.psi1, fe.psi2):
            lin.weight.copy_(torch.eye(d))
            lin.bias.zero_()
        fe.psi3.weight.copy_(torch.eye(4 * d)[: d] * 0 + torch.cat([torch.eye(d)] * 4, 1))
        fe.psi3.bias.zero_()
    return fe


def test_identity_probe_single_neighbors():
    d = 3
    # pair (0, 1); 0 also touches 2, 1 also touches 3
    nb = NeighborIndex(4, np.array([[0, 0, 1], [0, 1, 2], [1, 1, 3]]))
    table = torch.randn(4, d, dtype=torch.float64)
    fe = identity_extractor(d)
    code = torch.tanh(torch.cat([table[0], table[1]]))
    x = fe(table, [0], [1], nb)[0]
    # psi3 sums the four d-blocks of [x_2, tanh(x_0 ++ x_1), x_3]
    expected = table[2] + code[:d] + code[d:] + table[3]
    assert torch.allclose(x, expected)
    raw = fe.neighbor_encoding(table, [0], [1], nb)
    assert torch.allclose(raw[0], table[2])


def test_isolated_pair_falls_back_to_own_embedding():
    nb = NeighborIndex(2, np.array([[0, 0, 1]]))
    table = torch.randn(2, 3, dtype=torch.float64)
    fe = identity_extractor(3)
    enc = fe.neighbor_encoding(table, [0, 1], [1, 0], nb)
    assert torch.allclose(enc, table)


def test_neighbor_mean_excludes_only_partner():
    nb = NeighborIndex(5, np.array([[0, 0, 1], [0, 0, 2], [0, 1, 3], [4, 0, 0]]))
    table = torch.randn(5, 2, dtype=torch.float64)
    fe = identity_extractor(2)
    enc = fe.neighbor_encoding(table, [0], [1], nb)
    assert torch.allclose(enc[0], table[[2, 3, 4]].mean(0))
    # a partner that is not a neighbour excludes nothing
    enc = fe.neighbor_encoding(table, [1], [3], nb)
    assert torch.allclose(enc[0], table[0])


def test_relation_code_is_bounded():
    fe = FeatureExtractor(4)
    code = fe.relation_code(torch.randn(50, 4) * 100, torch.randn(50, 4) * 100)
    assert code.abs().max().item() <= 1.0 and code.shape == (50, 8)


def test_zero_embeddings_give_zero_output():
    fe = FeatureExtractor(4)
    for m in (fe.psi1, fe.psi2, fe.psi3):
        torch.nn.init.zeros_(m.bias)
    nb = NeighborIndex(3, np.array([[0, 0, 1], [1, 0, 2]]))
    assert not fe(torch.zeros(3, 4), [0, 1], [1, 2], nb).any()


def test_extractor_loss_cases():
    tar = torch.tensor([[1.0, 0.0]])
    pos = torch.tensor([[2.0, 0.0]])
    neg = torch.tensor([[0.0, 3.0]])
    assert extractor_loss(tar, pos, neg, 0.5).item() == 0.0
    assert extractor_loss(tar, pos, pos, 0.5).item() == pytest.approx(0.5)
    # literal sign swaps the roles: 0.5 + 1 - 0
    assert extractor_loss(tar, pos, neg, 0.5, literal=True).item() == pytest.approx(1.5)
    with pytest.raises(EmptySet):
        extractor_loss(tar[:0], pos, neg)


def test_extractor_loss_gradient():
    torch.manual_seed(0)
    ref = torch.randn(3, 8, dtype=torch.float64)
    neg = torch.randn(4, 8, dtype=torch.float64)
    assert finite_difference_check(lambda p: extractor_loss(ref, p, neg, 2.0), torch.randn(4, 8)) < 1e-4
    assert finite_difference_check(lambda r: extractor_loss(r, neg * 0.5 + 1, neg, 2.0), torch.randn(3, 8)) < 1e-4


def test_cluster_centers_match_brute_force():
    rng = np.random.default_rng(0)
    stats = ClusterStats(6)
    data = {r: rng.normal(size=(int(rng.integers(3, 20)), 6)) for r in range(4)}
    for r, x in data.items():
        for chunk in np.array_split(x, 3):
            stats.add(r, torch.as_tensor(chunk))
    for r, x in data.items():
        assert np.abs(stats.center(r).numpy() - x.mean(0)).max() < 1e-6
    with pytest.raises(MissingCenter):
        stats.center(9)


def test_generate_deterministic_and_noise_sensitive():
    torch.manual_seed(0)
    noise, proj = NoiseLayer(6, 4), torch.nn.Linear(6, 6)
    cls = torch.randn(6)
    z = torch.randn(4)
    a = generate(cls, z, noise, proj)
    assert a.shape == (6,) and torch.equal(a, generate(cls, z, noise, proj))
    outs = generate(cls.expand(100, -1), torch.randn(100, 4), noise, proj)
    assert len({tuple(o.tolist()) for o in outs}) == 100


def probe_dis(d, value=None, weight=None):
    dis = Discriminator(d, 1)
    with torch.no_grad():
        dis.net[0].weight.copy_(torch.eye(d)[:1] if weight is None else weight)
        dis.net[0].bias.fill_(1e3)  # keeps the hidden unit on the linear side of LeakyReLU
        dis.net[2].weight.fill_(1.0)
        dis.net[2].bias.fill_(-1e3)
        if value is not None:
            dis.net[0].weight.zero_()
            dis.net[2].bias.fill_(value - 1e3)
    return dis.double()


def perfect_classifier(d, n):
    clf = torch.nn.Linear(d, n).double()
    with torch.no_grad():
        clf.weight.copy_(torch.eye(d)[:n] * 1e4)
        clf.bias.zero_()
    return clf


def test_generator_loss_zero_at_optimum():
    d, n = 4, 3
    centers = torch.eye(d, dtype=torch.float64)[:n]
    labels = torch.arange(n)
    loss = generator_loss(centers.clone(), labels, probe_dis(d, value=0.0), perfect_classifier(d, n), centers)
    assert abs(loss.item()) < 1e-9


def test_generator_wasserstein_term_is_minus_constant():
    d = 4
    x = torch.randn(5, d, dtype=torch.float64)
    centers = x.clone()
    clf = torch.nn.Linear(d, 5).double()
    labels = torch.arange(5)
    ce = F.cross_entropy(clf(x), labels).item()
    loss = generator_loss(x, labels, probe_dis(d, value=2.5), clf, centers)
    assert loss.item() == pytest.approx(-2.5 + ce, abs=1e-9)


def test_wasserstein_terms_are_negations():
    torch.manual_seed(0)
    d = 4
    dis = Discriminator(d).double()
    fake = torch.randn(6, d, dtype=torch.float64)
    real = torch.randn(6, d, dtype=torch.float64)
    clf = torch.nn.Linear(d, 2).double()
    labels = torch.zeros(6, dtype=torch.long)
    centers = torch.zeros(2, d, dtype=torch.float64)
    g_w = generator_loss(fake, labels, dis, clf, centers) - F.cross_entropy(clf(fake), labels) - (fake ** 2).sum(-1).mean()
    d_w = discriminator_loss(real, fake, dis, clf, labels, lam=0, gp_weight=0) + dis(real).mean()
    assert torch.allclose(g_w, -d_w)


def test_discriminator_constant_critic_cancels():
    d = 4
    x = torch.randn(3, d, dtype=torch.float64)
    clf = torch.nn.Linear(d, 2).double()
    loss = discriminator_loss(x, x + 1, probe_dis(d, value=7.0), clf, torch.zeros(3, dtype=torch.long), 0.0, 0.0)
    assert abs(loss.item()) < 1e-9


def test_discriminator_real_one_fake_zero():
    d = 2
    dis = probe_dis(d)  # Dis(x) = x[0]
    real = torch.tensor([[1.0, 5.0]], dtype=torch.float64)
    fake = torch.tensor([[0.0, -3.0]], dtype=torch.float64)
    clf = torch.nn.Linear(d, 2).double()
    assert discriminator_loss(real, fake, dis, clf, torch.tensor([0]), 0.0, 0.0).item() == pytest.approx(-1.0)


def test_gradient_penalty_zero_for_unit_linear_critic():
    d = 5
    w = torch.randn(1, d)
    dis = probe_dis(d, weight=w / w.norm())
    real = torch.randn(8, d, dtype=torch.float64)
    fake = torch.randn(8, d, dtype=torch.float64)
    assert gradient_penalty(dis, real, fake).item() < 1e-12


def test_gan_losses_gradients():
    torch.manual_seed(0)
    d = 6
    dis = Discriminator(d).double()
    clf = torch.nn.Linear(d, 3).double()
    centers = torch.randn(3, d, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 1])
    real = centers[labels]
    eps = torch.rand(4, 1, dtype=torch.float64)
    assert finite_difference_check(lambda x: generator_loss(x, labels, dis, clf, centers), torch.randn(4, d)) < 1e-4
    assert finite_difference_check(
        lambda x: discriminator_loss(real, x, dis, clf, labels, 1.0, 10.0, eps=eps), torch.randn(4, d)) < 1e-4


def test_generator_loss_checks_centers():
    with pytest.raises(MissingCenter):
        generator_loss(torch.zeros(2, 3), torch.tensor([0, 5]), Discriminator(3), torch.nn.Linear(3, 6),
                       torch.zeros(2, 3))


def test_infer_single_noise_equals_generate():
    torch.manual_seed(0)
    noise, proj = NoiseLayer(6, 4), torch.nn.Linear(6, 6)
    cls = torch.randn(6)
    z = torch.randn(1, 1, 4, generator=torch.Generator().manual_seed(13))[0, 0]
    assert torch.allclose(infer_relation_embedding(cls, noise, proj, 1, 13), generate(cls, z, noise, proj))
    with pytest.raises(ValidationError):
        infer_relation_embedding(cls, noise, proj, 0)


def test_infer_is_arithmetic_mean():
    torch.manual_seed(0)
    noise, proj = NoiseLayer(6, 4), torch.nn.Linear(6, 6)
    cls = torch.randn(6)
    z = torch.randn(20, 1, 4, generator=torch.Generator().manual_seed(3))
    manual = torch.stack([generate(cls, z[i, 0], noise, proj) for i in range(20)]).mean(0)
    assert torch.allclose(infer_relation_embedding(cls, noise, proj, 20, 3), manual, atol=1e-6)


def test_infer_variance_shrinks_like_one_over_n():
    torch.manual_seed(0)
    noise, proj = NoiseLayer(4, 4), torch.nn.Linear(4, 4)
    with torch.no_grad():
        noise.fc.weight.copy_(torch.cat([torch.zeros(4, 4), torch.eye(4)], 1))  # pure noise passthrough
        noise.fc.bias.fill_(10.0)  # stay on the linear side
        proj.weight.copy_(torch.eye(4))
        proj.bias.zero_()
    cls = torch.zeros(4)
    var = {}
    for n in (1, 16):
        samples = torch.stack([infer_relation_embedding(cls, noise, proj, n, s) for s in range(400)])
        var[n] = samples.var(0).mean().item()
    ratio = var[1] / var[16]
    assert 10 < ratio < 25
