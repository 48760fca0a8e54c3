"""Multimodal knowledge graph data model, file ingestion, splitting and samplers.

On-disk layout (all UTF-8):

* triples: ``head<TAB>relation<TAB>tail`` per line
* entity / relation texts: JSON lines ``{"id": ..., "text": ...}``
* images: one raster file per entity named ``<entity id>.<ext>`` (``/`` in ids
  maps to ``.``, so ``/m/02mjmr`` is looked up as ``m.02mjmr.jpg``); a
  subdirectory named after the entity may hold several images, in which case
  the lexicographically smallest filename wins
* split: JSON ``{"train": [...], "val": [...], "test": [...]}`` of relation ids
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DanglingReference,
    ExhaustedCandidates,
    InfeasibleSplit,
    InvalidSplit,
    MissingModality,
    ParseError,
    TooFewTriples,
    ValidationError,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff")


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def round_half_up(x: float) -> int:
    # the epsilon absorbs binary representation error, e.g. 0.15 * 30
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class RelationSplit:
    train: frozenset
    val: frozenset
    test: frozenset
    ratio_u: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "train", frozenset(int(r) for r in self.train))
        object.__setattr__(self, "val", frozenset(int(r) for r in self.val))
        object.__setattr__(self, "test", frozenset(int(r) for r in self.test))
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise InvalidSplit("train/val/test relation sets must be pairwise disjoint")

    @property
    def seen(self) -> frozenset:
        return self.train | self.val

    @property
    def unseen(self) -> frozenset:
        return self.test

    def to_json(self, relation_names: Sequence[str]) -> dict:
        return {
            "train": [relation_names[r] for r in sorted(self.train)],
            "val": [relation_names[r] for r in sorted(self.val)],
            "test": [relation_names[r] for r in sorted(self.test)],
        }


@dataclass(frozen=True, eq=False)
class MultimodalKG:
    """Immutable multimodal KG.

    Entity and relation ids are dense integers assigned by first appearance
    in the triples file; ``entity_names[i]`` recovers the string id.
    """

    entity_names: tuple
    relation_names: tuple
    triples: np.ndarray  # (T, 3) int64: head, relation, tail
    entity_image: np.ndarray  # (E, H, W, 3) uint8
    entity_text: tuple
    relation_text: tuple
    split: RelationSplit | None = None

    def __post_init__(self):
        triples = np.ascontiguousarray(self.triples, dtype=np.int64).reshape(-1, 3)
        triples.setflags(write=False)
        object.__setattr__(self, "triples", triples)
        self.entity_image.setflags(write=False)

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    @property
    def entities(self) -> range:
        return range(self.num_entities)

    @property
    def relations(self) -> range:
        return range(self.num_relations)

    @property
    def seen_relations(self) -> frozenset:
        if self.split is None:
            return frozenset(self.relations)
        return self.split.seen

    @property
    def unseen_relations(self) -> frozenset:
        if self.split is None:
            return frozenset()
        return self.split.unseen

    @property
    def train_relations(self) -> frozenset:
        if self.split is None:
            return frozenset(self.relations)
        return self.split.train

    @cached_property
    def entity_index(self) -> dict:
        return {name: i for i, name in enumerate(self.entity_names)}

    @cached_property
    def relation_index(self) -> dict:
        return {name: i for i, name in enumerate(self.relation_names)}

    @cached_property
    def triple_set(self) -> frozenset:
        return frozenset(map(tuple, self.triples.tolist()))

    @cached_property
    def _by_relation(self) -> dict:
        order = np.argsort(self.triples[:, 1], kind="stable")
        rels = self.triples[order, 1]
        out = {}
        for r in np.unique(rels):
            lo, hi = np.searchsorted(rels, [r, r + 1])
            out[int(r)] = order[lo:hi]
        return out

    def triple_indices(self, relation: int) -> np.ndarray:
        return self._by_relation.get(int(relation), np.empty(0, dtype=np.int64))

    def triples_of(self, relations) -> np.ndarray:
        if isinstance(relations, (int, np.integer)):
            relations = [relations]
        idx = [self.triple_indices(r) for r in sorted(relations)]
        if not idx:
            return np.empty((0, 3), dtype=np.int64)
        return self.triples[np.concatenate(idx)]

    @cached_property
    def adjacency(self) -> dict:
        """relation -> head -> sorted tuple of tails."""
        adj: dict = defaultdict(lambda: defaultdict(list))
        for h, r, t in self.triples.tolist():
            adj[r][h].append(t)
        return {r: {h: tuple(sorted(ts)) for h, ts in sorted(hs.items())} for r, hs in sorted(adj.items())}

    @cached_property
    def incident(self) -> dict:
        """entity -> relation -> array of indices of triples touching the entity."""
        inc: dict = defaultdict(lambda: defaultdict(list))
        for i, (h, r, t) in enumerate(self.triples.tolist()):
            inc[h][r].append(i)
            if t != h:
                inc[t][r].append(i)
        return {e: {r: np.asarray(v, dtype=np.int64) for r, v in rs.items()} for e, rs in inc.items()}

    def with_split(self, split: RelationSplit | None) -> "MultimodalKG":
        kg = replace(self, split=split)
        if split is not None:
            check_split(kg, split)
        return kg

    def validate(self) -> None:
        E, R = self.num_entities, self.num_relations
        if len(self.triples) == 0:
            raise ValidationError("graph has no triples")
        if self.triples[:, [0, 2]].min() < 0 or self.triples[:, [0, 2]].max() >= E:
            raise DanglingReference("triple references an unknown entity")
        if self.triples[:, 1].min() < 0 or self.triples[:, 1].max() >= R:
            raise DanglingReference("triple references an unknown relation")
        if len(self.triple_set) != len(self.triples):
            raise ValidationError("duplicate triples")
        if len(self.entity_text) != E or self.entity_image.shape[0] != E:
            raise ValidationError("every entity needs exactly one image and one description")
        if self.entity_image.ndim != 4 or self.entity_image.shape[-1] != 3 or self.entity_image.dtype != np.uint8:
            raise ValidationError("entity images must be an (E, H, W, 3) uint8 array")
        if len(self.relation_text) != R or any(not str(t).strip() for t in self.relation_text):
            raise ValidationError("every relation needs a nonempty description")
        if self.split is not None:
            check_split(self, self.split)


def check_split(kg: MultimodalKG, split: RelationSplit) -> None:
    allr = split.train | split.val | split.test
    if any(r < 0 or r >= kg.num_relations for r in allr):
        raise DanglingReference("split references an unknown relation")
    if allr != frozenset(kg.relations):
        missing = sorted(set(kg.relations) - allr)
        raise InvalidSplit(f"split does not cover relations {[kg.relation_names[r] for r in missing]}")
    orphans = uncovered_entities(kg, split.seen, split.unseen)
    if orphans:
        names = [kg.entity_names[e] for e in sorted(orphans)[:5]]
        raise InvalidSplit(f"{len(orphans)} entities of unseen triples never occur in seen triples, e.g. {names}")


def uncovered_entities(kg: MultimodalKG, seen: Iterable[int], unseen: Iterable[int]) -> set:
    seen_t = kg.triples_of(list(seen))
    unseen_t = kg.triples_of(list(unseen))
    covered = set(seen_t[:, 0].tolist()) | set(seen_t[:, 2].tolist())
    needed = set(unseen_t[:, 0].tolist()) | set(unseen_t[:, 2].tolist())
    return needed - covered


# ---------------------------------------------------------------------------
# ingestion


def image_stem(name: str) -> str:
    return name.strip("/").replace("/", ".")


def _read_jsonl_map(path: Path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key, text = str(rec["id"]), rec["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad JSON-lines record ({exc})", path, lineno) from None
            if not isinstance(text, str):
                raise ParseError("'text' must be a string", path, lineno)
            out[key] = text
    return out


def _find_image(image_dir: Path, name: str) -> Path | None:
    found = []
    for stem in dict.fromkeys([name, image_stem(name)]):
        if not stem or "/" in stem:
            continue
        sub = image_dir / stem
        if sub.is_dir():
            found.extend(p for p in sub.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        found.extend(p for p in image_dir.glob(f"{_glob_escape(stem)}.*") if p.suffix.lower() in IMAGE_SUFFIXES)
        if found:
            break
    if not found:
        return None
    return min(found, key=lambda p: p.name)


def _glob_escape(s: str) -> str:
    return "".join(f"[{c}]" if c in "*?[]" else c for c in s)


def read_image(path: Path, image_size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def read_triples(path) -> tuple[list, list, np.ndarray]:
    path = Path(path)
    ent, rel = {}, {}
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise ParseError("expected head<TAB>relation<TAB>tail", path, lineno)
            h, r, t = (p.strip() for p in parts)
            for name, table in ((h, ent), (r, rel), (t, ent)):
                if name not in table:
                    table[name] = len(table)
            rows.append((ent[h], rel[r], ent[t]))
    if not rows:
        raise ParseError("triples file is empty", path)
    triples = np.asarray(rows, dtype=np.int64)
    uniq, first = np.unique(triples, axis=0, return_index=True)
    if len(uniq) != len(triples):
        dup = sorted(set(range(len(triples))) - set(first.tolist()))[0]
        log.warning("dropping %d duplicate triples (first at row %d)", len(triples) - len(uniq), dup + 1)
        triples = triples[np.sort(first)]
    return list(ent), list(rel), triples


def read_split(path, relation_index: dict) -> RelationSplit:
    path = Path(path)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc})", path) from None
    if not isinstance(raw, dict) or any(k not in raw for k in ("train", "val", "test")):
        raise ParseError("split must be an object with train/val/test arrays", path)
    sets = {}
    for key in ("train", "val", "test"):
        ids = []
        for name in raw[key]:
            if name not in relation_index:
                raise DanglingReference(f"split '{key}' names unknown relation {name!r}")
            ids.append(relation_index[name])
        sets[key] = ids
    n = len(relation_index)
    return RelationSplit(sets["train"], sets["val"], sets["test"], ratio_u=len(sets["test"]) / n if n else 0.0)


def load_mmkg(
    triples_path,
    entity_text_path,
    relation_text_path,
    image_dir,
    split_path=None,
    *,
    image_size: int | None = None,
    allow_missing: bool = False,
) -> MultimodalKG:
    """Load a multimodal KG from the file layout described in the module docstring.

    ``allow_missing`` substitutes a black image / empty description for
    entities lacking a modality instead of raising :class:`MissingModality`.
    """
    entity_names, relation_names, triples = read_triples(triples_path)
    ent_text = _read_jsonl_map(Path(entity_text_path))
    rel_text = _read_jsonl_map(Path(relation_text_path))
    image_dir = Path(image_dir)

    texts = []
    for name in entity_names:
        if name not in ent_text:
            if not allow_missing:
                raise MissingModality(name, "text")
            log.warning("entity %s has no description; using empty string", name)
        texts.append(ent_text.get(name, ""))

    images = []
    shape = None
    for name in entity_names:
        path = _find_image(image_dir, name)
        if path is None:
            if not allow_missing:
                raise MissingModality(name, "image")
            log.warning("entity %s has no image; using zeros", name)
            images.append(None)
            continue
        img = read_image(path, image_size)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValidationError(
                f"image {path} has shape {img.shape}, expected {shape}; pass image_size to resize at load"
            )
        images.append(img)
    if shape is None:
        side = image_size or 1
        shape = (side, side, 3)
    stacked = np.stack([img if img is not None else np.zeros(shape, np.uint8) for img in images])

    rtexts = []
    for name in relation_names:
        text = rel_text.get(name, "")
        if not text.strip():
            raise MissingModality(name, "description")
        rtexts.append(text)

    split = None
    if split_path is not None:
        split = read_split(split_path, {n: i for i, n in enumerate(relation_names)})

    kg = MultimodalKG(
        entity_names=tuple(entity_names),
        relation_names=tuple(relation_names),
        triples=triples,
        entity_image=stacked,
        entity_text=tuple(texts),
        relation_text=tuple(rtexts),
        split=split,
    )
    kg.validate()
    return kg


DATASET_FILES = {
    "triples": "triples.tsv",
    "entity_text": "entity_text.jsonl",
    "relation_text": "relation_text.jsonl",
    "images": "images",
    "split": "split.json",
}


def load_dataset_dir(root, **kwargs) -> MultimodalKG:
    root = Path(root)
    split = root / DATASET_FILES["split"]
    return load_mmkg(
        root / DATASET_FILES["triples"],
        root / DATASET_FILES["entity_text"],
        root / DATASET_FILES["relation_text"],
        root / DATASET_FILES["images"],
        split if split.exists() else None,
        **kwargs,
    )


def save_mmkg(kg: MultimodalKG, root) -> Path:
    """Write ``kg`` in canonical form (id order, PNG images) under ``root``."""
    root = Path(root)
    (root / DATASET_FILES["images"]).mkdir(parents=True, exist_ok=True)
    E, R = kg.entity_names, kg.relation_names
    with open(root / DATASET_FILES["triples"], "w", encoding="utf-8") as f:
        for h, r, t in kg.triples.tolist():
            f.write(f"{E[h]}\t{R[r]}\t{E[t]}\n")
    with open(root / DATASET_FILES["entity_text"], "w", encoding="utf-8") as f:
        for name, text in zip(E, kg.entity_text):
            f.write(json.dumps({"id": name, "text": text}, ensure_ascii=False) + "\n")
    with open(root / DATASET_FILES["relation_text"], "w", encoding="utf-8") as f:
        for name, text in zip(R, kg.relation_text):
            f.write(json.dumps({"id": name, "text": text}, ensure_ascii=False) + "\n")
    for name, img in zip(E, kg.entity_image):
        Image.fromarray(img).save(root / DATASET_FILES["images"] / f"{image_stem(name)}.png")
    if kg.split is not None:
        save_split(kg.split, kg, root / DATASET_FILES["split"])
    return root


def save_split(split: RelationSplit, kg: MultimodalKG, path) -> None:
    Path(path).write_text(json.dumps(split.to_json(kg.relation_names), indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# splitting and sampling


def generate_split(
    kg: MultimodalKG, ratio_u: float, seed: int, *, n_val: int = 0, max_retries: int = 100
) -> RelationSplit:
    """Randomly hold out ``round_half_up(ratio_u * |R|)`` relations as unseen.

    Relations whose removal would leave an unseen-triple entity without any
    seen triple are skipped; if the greedy pass cannot reach the target size
    the relation order is reshuffled, up to ``max_retries`` times.
    """
    if not 0 < ratio_u < 1:
        raise ValidationError(f"ratio_u must be in (0, 1), got {ratio_u}")
    R = kg.num_relations
    if R < 3:
        raise ValidationError("need at least 3 relations to split")
    n_unseen = round_half_up(ratio_u * R)
    if n_unseen < 1 or n_unseen + n_val > R - 1:
        raise InfeasibleSplit(f"cannot hold out {n_unseen} (+{n_val} val) of {R} relations")

    E = kg.num_entities
    per_rel = np.zeros((R, E), dtype=np.int64)
    for h, r, t in kg.triples.tolist():
        per_rel[r, h] += 1
        if t != h:
            per_rel[r, t] += 1
    touches = per_rel > 0

    rng = as_rng(seed)
    for _ in range(max_retries):
        order = rng.permutation(R)
        seen_count = per_rel.sum(axis=0)
        needed = np.zeros(E, dtype=bool)
        unseen = []
        for r in order.tolist():
            after = seen_count - per_rel[r]
            need = needed | touches[r]
            if np.all(after[need] > 0):
                unseen.append(r)
                seen_count, needed = after, need
                if len(unseen) == n_unseen:
                    break
        if len(unseen) == n_unseen:
            rest = sorted(set(range(R)) - set(unseen))
            val = rng.choice(rest, size=n_val, replace=False).tolist() if n_val else []
            train = sorted(set(rest) - set(val))
            return RelationSplit(train, val, unseen, ratio_u=ratio_u)
    raise InfeasibleSplit(f"no split with {n_unseen} unseen relations keeps entity coverage after {max_retries} tries")


def sample_negatives(
    kg: MultimodalKG,
    triple,
    n: int,
    mode: str = "tail",
    seed=None,
    *,
    candidates: Sequence[int] | None = None,
    max_tries: int = 64,
) -> list:
    """Corrupt ``triple`` ``n`` times into distinct triples absent from the graph.

    ``mode='both'`` picks head or tail with probability 1/2 per negative.
    ``candidates`` restricts replacement entities (default: every entity).
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if mode not in ("head", "tail", "both"):
        raise ValidationError(f"unknown corruption mode {mode!r}")
    h, r, t = (int(x) for x in triple)
    rng = as_rng(seed)
    pool = np.arange(kg.num_entities) if candidates is None else np.asarray(candidates, dtype=np.int64)
    known = kg.triple_set

    def corrupt(slot, e):
        return (e, r, t) if slot == "head" else (h, r, e)

    def valid(slot, e):
        original = h if slot == "head" else t
        return e != original and corrupt(slot, e) not in known

    out, chosen = [], set()
    exhausted = set()
    while len(out) < n:
        slots = [s for s in (("head", "tail") if mode == "both" else (mode,)) if s not in exhausted]
        if not slots:
            raise ExhaustedCandidates(f"only {len(out)} negatives exist for {triple}, asked for {n}")
        slot = slots[rng.integers(len(slots))] if len(slots) > 1 else slots[0]
        got = None
        for _ in range(max_tries):
            e = int(pool[rng.integers(len(pool))])
            c = corrupt(slot, e)
            if valid(slot, e) and c not in chosen:
                got = c
                break
        if got is None:
            # rejection sampling stalled: fall back to exact enumeration
            rest = [corrupt(slot, int(e)) for e in pool if valid(slot, int(e)) and corrupt(slot, int(e)) not in chosen]
            if not rest:
                exhausted.add(slot)
                continue
            got = rest[rng.integers(len(rest))]
        chosen.add(got)
        out.append(Triple(*got))
    return out


def sample_reference_sets(kg: MultimodalKG, relation: int, k_ref: int, seed=None):
    """Split a relation's triples into reference / positive sets plus tail-corrupted negatives.

    Returns three ``(n, 3)`` int arrays ``(O_r, O_p, O_n)``; ``O_n[i]`` is a
    corruption of ``O_p[i]``.
    """
    trip = kg.triples_of(int(relation))
    if k_ref < 1 or len(trip) < k_ref + 1:
        raise TooFewTriples(int(relation), len(trip), k_ref + 1)
    rng = as_rng(seed)
    perm = rng.permutation(len(trip))
    ref = trip[np.sort(perm[:k_ref])]
    pos = trip[np.sort(perm[k_ref:])]
    neg = np.asarray([sample_negatives(kg, p, 1, "tail", rng)[0] for p in pos], dtype=np.int64)
    return ref, pos, neg


def default_k_ref(n_triples: int) -> int:
    return min(5, n_triples // 2)


@dataclass(frozen=True, eq=False)
class Subgraph:
    entities: np.ndarray  # sorted global entity ids
    triples: np.ndarray  # (n, 3) global ids; batch-relation triples first
    num_batch_triples: int = 0
    _local: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._local.update({int(e): i for i, e in enumerate(self.entities.tolist())})

    def local(self, ids) -> np.ndarray:
        return np.asarray([self._local[int(e)] for e in np.asarray(ids).ravel()], dtype=np.int64).reshape(np.shape(ids))

    @property
    def batch_triples(self) -> np.ndarray:
        return self.triples[: self.num_batch_triples]

    def __len__(self):
        return len(self.entities)


def make_subgraph(triples: np.ndarray, num_batch_triples: int | None = None) -> Subgraph:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    ents = np.unique(triples[:, [0, 2]]) if len(triples) else np.empty(0, dtype=np.int64)
    return Subgraph(ents, triples, len(triples) if num_batch_triples is None else num_batch_triples)


def sample_subgraph(
    kg: MultimodalKG,
    batch_relations,
    fanout: int,
    seed=None,
    *,
    neighbor_relations=None,
) -> Subgraph:
    """All triples of ``batch_relations`` plus up to ``fanout`` sampled triples
    per (touched entity, neighbor relation) from ``neighbor_relations``
    (default: the seen relations)."""
    batch_relations = sorted(int(r) for r in batch_relations)
    seen = kg.seen_relations
    if any(r not in seen for r in batch_relations):
        raise ValidationError("batch relations must be seen relations")
    rng = as_rng(seed)
    core = kg.triples_of(batch_relations)
    if fanout <= 0 or len(core) == 0:
        return make_subgraph(core)
    pool = set(seen if neighbor_relations is None else (int(r) for r in neighbor_relations))
    pool -= set(batch_relations)
    touched = np.unique(core[:, [0, 2]]).tolist()
    extra = set()
    for e in touched:
        for r, idx in sorted(kg.incident.get(e, {}).items()):
            if r not in pool:
                continue
            if len(idx) > fanout:
                idx = np.sort(rng.choice(idx, size=fanout, replace=False))
            extra.update(idx.tolist())
    extra_t = kg.triples[sorted(extra)] if extra else np.empty((0, 3), dtype=np.int64)
    return make_subgraph(np.concatenate([core, extra_t]), len(core))
