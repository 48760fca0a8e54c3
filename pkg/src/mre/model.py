"""Full model: every trainable component plus the tokenized view of a graph."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import Config
from .consolidator import StructureConsolidator, encode_relation_for_scoring
from .generator import Discriminator, FeatureExtractor, NeighborIndex, NoiseLayer, generate, infer_relation_embedding
from .kg import MultimodalKG, Subgraph, make_subgraph
from .tokenization import PixelNorm, Vocabulary, patchify, tokenize_relation, tokenize_text


@dataclass
class TokenizedKG:
    patches: torch.Tensor  # (E, |P|, p*p*3)
    text_ids: torch.Tensor  # (E, |D|)
    relation_ids: torch.Tensor  # (R, relation_text_len)

    @classmethod
    def build(cls, kg: MultimodalKG, vocab: Vocabulary, cfg: Config) -> "TokenizedKG":
        d = cfg.data
        norm = PixelNorm(tuple(d.pixel_mean), tuple(d.pixel_std))
        patches = np.stack([patchify(img, d.patch_size, norm) for img in kg.entity_image])
        if patches.shape[1] != d.num_patches:
            raise ValueError(
                f"images give {patches.shape[1]} patches, config expects {d.num_patches}; "
                "resize images to image_size at load"
            )
        text = np.stack([tokenize_text(t, d.text_len, vocab) for t in kg.entity_text])
        rel = np.stack([tokenize_relation(t, d.relation_text_len, vocab) for t in kg.relation_text])
        return cls(torch.from_numpy(patches), torch.from_numpy(text), torch.from_numpy(rel))


PARAMETER_GROUPS = ("encoder", "decoder", "consolidator", "projector", "noise", "extractor", "discriminator")


class MREModel(nn.Module):
    def __init__(self, cfg: Config, vocab_size: int, train_relations, num_relations: int | None = None):
        super().__init__()
        from .learner import MultimodalLearner

        d = cfg.learner.embed_dim
        self.cfg = cfg
        self.train_relations = tuple(sorted(int(r) for r in train_relations))
        self.label_of = {r: i for i, r in enumerate(self.train_relations)}
        self.learner = MultimodalLearner(cfg.learner, cfg.data, vocab_size)
        c = cfg.consolidator
        self.consolidator = StructureConsolidator(
            d, self.train_relations, c.gnn_layers, c.num_bases, c.leaky_slope, c.inverse_edges
        )
        self.projector = nn.Linear(d, d)
        self.noise = NoiseLayer(d, cfg.gan.noise_dim)
        self.extractor = FeatureExtractor(d, cfg.gan.extractor_hidden)
        self.discriminator = Discriminator(d, cfg.gan.disc_hidden)
        self.classifier = nn.Linear(d, max(1, len(self.train_relations)))
        xavier_init(self)

    @property
    def dim(self) -> int:
        return self.cfg.learner.embed_dim

    def group_parameters(self, group: str):
        if group == "encoder":
            return list(self.learner.encoder_parameters())
        if group == "decoder":
            return list(self.learner.decoder_parameters())
        if group == "consolidator":
            return list(self.consolidator.parameters())
        if group == "projector":
            return list(self.projector.parameters())
        if group == "noise":
            return list(self.noise.parameters())
        if group == "extractor":
            return list(self.extractor.parameters())
        if group == "discriminator":
            return list(self.discriminator.parameters()) + list(self.classifier.parameters())
        raise KeyError(group)

    def checksum(self, group: str = "encoder") -> str:
        h = hashlib.sha256()
        for p in self.group_parameters(group):
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    # -- encoding -----------------------------------------------------------

    def entity_cls(self, data: TokenizedKG, entities, chunk: int = 256) -> torch.Tensor:
        entities = torch.as_tensor(np.asarray(entities), dtype=torch.long)
        outs = []
        for i in range(0, len(entities), chunk):
            idx = entities[i : i + chunk]
            outs.append(self.learner.encode_full(data.patches[idx], data.text_ids[idx]).cls)
        if not outs:
            return torch.empty(0, self.dim)
        return torch.cat(outs)

    def relation_cls(self, data: TokenizedKG, relations) -> torch.Tensor:
        idx = torch.as_tensor(np.asarray(relations), dtype=torch.long)
        return self.learner.encode_text(data.relation_ids[idx])

    def relation_for_scoring(self, data: TokenizedKG, relations) -> torch.Tensor:
        idx = torch.as_tensor(np.asarray(relations), dtype=torch.long)
        return encode_relation_for_scoring(data.relation_ids[idx], self.learner, self.projector)

    def structure_graph(self, kg: MultimodalKG) -> Subgraph:
        """Message-passing graph used outside of training batches: all train-relation triples."""
        return make_subgraph(kg.triples_of(self.train_relations))

    def entity_table(self, kg: MultimodalKG, data: TokenizedKG) -> torch.Tensor:
        """Consolidated embeddings for every entity, shape (E, d).

        Entities outside the structure graph keep their CLS feature.
        """
        graph = self.structure_graph(kg)
        cls = self.entity_cls(data, np.arange(kg.num_entities))
        if len(graph.entities) == 0:
            return cls
        idx = torch.as_tensor(graph.entities)
        out = cls.clone()
        out[idx] = self.consolidator(cls[idx], graph)
        return out

    def neighbor_index(self, kg: MultimodalKG) -> NeighborIndex:
        return NeighborIndex(kg.num_entities, kg.triples_of(self.train_relations))

    def pair_embeddings(self, table, heads, tails, neighbors: NeighborIndex) -> torch.Tensor:
        return self.extractor(table, heads, tails, neighbors)

    def generate(self, cls, z) -> torch.Tensor:
        return generate(cls, z, self.noise, self.projector)

    def relation_embedding(self, data: TokenizedKG, relation: int, n_noise: int, seed: int) -> torch.Tensor:
        cls = self.relation_cls(data, [relation])[0]
        return infer_relation_embedding(cls, self.noise, self.projector, n_noise, seed)


def xavier_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def xavier_violations(model: MREModel) -> list:
    """Names of linear weights lying outside their Xavier-uniform bound (should be empty after init)."""
    from .consolidator import xavier_bound

    bad = []
    for name, m in model.named_modules():
        if isinstance(m, nn.Linear):
            bound = xavier_bound(m.in_features, m.out_features)
            if float(m.weight.detach().abs().max()) > bound + 1e-6:
                bad.append(name)
    return bad
