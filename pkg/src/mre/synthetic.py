"""Small synthetic multimodal KG with class-correlated images and templated texts.

Entities fall into classes; every relation links a few heads of one class to
every entity of another class, and its description names both classes with
the same words the entity descriptions use.  That shared vocabulary is the
only route from an unseen relation's description to its triples.
"""

from __future__ import annotations

import numpy as np

from .kg import MultimodalKG, RelationSplit
from .tokenization import Vocabulary

CLASS_WORDS = ("film", "person", "city", "band", "river", "company", "book", "team")
COLOR_WORDS = ("red", "green", "blue", "yellow", "purple", "cyan", "orange", "gray")
CLASS_COLORS = (
    (220, 40, 40),
    (40, 200, 60),
    (40, 60, 220),
    (230, 220, 40),
    (160, 40, 200),
    (40, 210, 210),
    (240, 140, 20),
    (128, 128, 128),
)
NAME_WORDS = (
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
)
VERB_WORDS = (
    "directs", "hosts", "employs", "features", "borders", "owns", "publishes", "sponsors",
    "inspires", "visits", "supports", "records",
)

RELATION_TEMPLATE = "a {head} related to a {tail} . it looks {color} ."

# (head class, tail class); the seen pairs form a spanning tree over head and
# tail class slots so every unseen combination is reachable from seen ones
DEFAULT_RELATIONS = (
    (0, 1), (0, 2), (1, 2), (1, 3), (2, 3), (2, 4), (3, 4), (3, 0),
    (1, 0), (2, 1),
)


def class_image(rng, color, size, noise=40):
    base = np.broadcast_to(np.asarray(color, dtype=np.float64), (size, size, 3))
    img = base + rng.normal(0.0, noise, size=(size, size, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_synthetic_mmkg(
    seed=0,
    *,
    num_classes=5,
    per_class=10,
    relations=DEFAULT_RELATIONS,
    num_unseen=2,
    heads_per_relation=3,
    image_size=32,
) -> MultimodalKG:
    """Build the benchmark graph; the last ``num_unseen`` relations form the unseen split."""
    if num_classes > len(CLASS_WORDS) or per_class > len(NAME_WORDS) or len(relations) > len(VERB_WORDS):
        raise ValueError("synthetic benchmark size exceeds its word lists")
    rng = np.random.default_rng(seed)
    members = [list(range(c * per_class, (c + 1) * per_class)) for c in range(num_classes)]

    rows = []
    for j, (a, b) in enumerate(relations):
        heads = np.sort(rng.choice(members[a], size=heads_per_relation, replace=False))
        for h in heads.tolist():
            for t in members[b]:
                rows.append((h, j, t))
    triples = np.asarray(rows, dtype=np.int64)

    # renumber entities by first appearance so the graph matches what load_mmkg would produce
    order = list(dict.fromkeys(triples[:, [0, 2]].ravel().tolist()))
    order += [e for e in range(num_classes * per_class) if e not in set(order)]
    remap = {old: new for new, old in enumerate(order)}
    triples[:, 0] = [remap[h] for h in triples[:, 0]]
    triples[:, 2] = [remap[t] for t in triples[:, 2]]

    names, texts, images = [], [], []
    for old in order:
        c, i = divmod(old, per_class)
        names.append(f"{CLASS_WORDS[c]}_{NAME_WORDS[i]}")
        texts.append(f"{NAME_WORDS[i]} is a {CLASS_WORDS[c]} . it looks {COLOR_WORDS[c]} .")
        images.append(class_image(rng, CLASS_COLORS[c], image_size))

    rel_names, rel_texts = [], []
    for j, (a, b) in enumerate(relations):
        rel_names.append(f"{CLASS_WORDS[a]}_{VERB_WORDS[j]}_{CLASS_WORDS[b]}")
        rel_texts.append(RELATION_TEMPLATE.format(head=CLASS_WORDS[a], tail=CLASS_WORDS[b], color=COLOR_WORDS[b]))

    n = len(relations)
    split = RelationSplit(range(n - num_unseen), (), range(n - num_unseen, n), ratio_u=num_unseen / n)
    kg = MultimodalKG(
        entity_names=tuple(names),
        relation_names=tuple(rel_names),
        triples=triples,
        entity_image=np.stack(images),
        entity_text=tuple(texts),
        relation_text=tuple(rel_texts),
        split=split,
    )
    kg.validate()
    return kg


def synthetic_vocabulary(kg: MultimodalKG) -> Vocabulary:
    return Vocabulary.from_corpus(list(kg.entity_text) + list(kg.relation_text))
