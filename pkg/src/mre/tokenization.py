"""Subword tokenization, image patchification and token-embedding tables."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DimensionMismatch, ShapeError, ValidationError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)

VISUAL, TEXTUAL = 0, 1


class Vocabulary:
    """Token <-> id map. Line ``i`` of a vocabulary file is token id ``i``; ``[PAD]`` must be id 0.

    Continuation pieces are looked up with the ``##`` prefix when the vocabulary
    uses it (WordPiece files) and bare otherwise.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != PAD:
            raise ValidationError("vocabulary must start with [PAD] at index 0")
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise ValidationError(f"duplicate vocabulary token {tok!r}")
            index[tok] = i
        for tok in SPECIAL_TOKENS:
            if tok not in index:
                raise ValidationError(f"vocabulary lacks special token {tok}")
        self.tokens = tokens
        self.index = index
        self.continuation_prefix = "##" if any(t.startswith("##") for t in tokens) else ""
        self.lowercase = not any(t != t.lower() for t in tokens if t not in SPECIAL_TOKENS)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls([ln.rstrip("\r") for ln in lines])

    @classmethod
    def build(cls, tokens: Iterable[str]) -> "Vocabulary":
        seen = dict.fromkeys(SPECIAL_TOKENS)
        for tok in tokens:
            seen.setdefault(tok)
        return cls(list(seen))

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Vocabulary":
        """Whole-word vocabulary over ``basic_tokenize`` output, sorted for determinism."""
        words = set()
        for text in texts:
            words.update(basic_tokenize(text))
        return cls.build(sorted(words))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_tokenize(text: str, lowercase: bool = True) -> list:
    """Whitespace/punctuation split in the style of BERT's basic tokenizer."""
    if lowercase:
        text = unicodedata.normalize("NFD", text.lower())
        text = "".join(ch for ch in text if unicodedata.category(ch) != "Mn")
    out, cur = [], []
    for ch in text:
        if ch.isspace() or unicodedata.category(ch) in ("Cc", "Cf"):
            if cur:
                out.append("".join(cur))
                cur = []
        elif _is_punct(ch):
            if cur:
                out.append("".join(cur))
                cur = []
            out.append(ch)
        else:
            cur.append(ch)
    if cur:
        out.append("".join(cur))
    return out


def wordpiece(word: str, vocab: Vocabulary, max_chars: int = 100) -> list:
    """Greedy longest-match-first segmentation of one word; ``[UNK]`` if any part fails."""
    if len(word) > max_chars:
        return [vocab.unk_id]
    ids, start = [], 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = vocab.continuation_prefix + piece
            if piece in vocab.index:
                match = vocab.index[piece]
                break
            end -= 1
        if match is None:
            return [vocab.unk_id]
        ids.append(match)
        start = end
    return ids


def tokenize_text(text: str, max_len: int, vocab: Vocabulary) -> np.ndarray:
    """Subword ids of ``text`` truncated / right-padded with PAD to exactly ``max_len``."""
    if max_len < 1:
        raise ValidationError("max_len must be >= 1")
    ids = []
    for word in basic_tokenize(text, vocab.lowercase):
        ids.extend(wordpiece(word, vocab))
        if len(ids) >= max_len:
            break
    out = np.zeros(max_len, dtype=np.int64)
    ids = ids[:max_len]
    out[: len(ids)] = ids
    return out


def tokenize_relation(text: str, max_len: int, vocab: Vocabulary) -> np.ndarray:
    return tokenize_text(text, max_len, vocab)


@dataclass(frozen=True)
class PixelNorm:
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)


def patchify(image: np.ndarray, p: int, norm: PixelNorm = PixelNorm()) -> np.ndarray:
    """(H, W, 3) uint8 image -> (H/p * W/p, p*p*3) float32 patches in row-major order.

    Pixels are scaled to [0, 1] then standardized per channel.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {image.shape}")
    H, W, _ = image.shape
    if p < 1 or H % p or W % p:
        raise ShapeError(f"image {H}x{W} is not divisible into {p}x{p} patches")
    x = image.astype(np.float32) / 255.0
    x = (x - np.asarray(norm.mean, np.float32)) / np.asarray(norm.std, np.float32)
    x = x.reshape(H // p, p, W // p, p, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape((H // p) * (W // p), p * p * 3))


def unpatchify(patches: np.ndarray, p: int, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`patchify` up to normalization; returns normalized (H, W, 3) floats."""
    patches = np.asarray(patches)
    gh, gw = height // p, width // p
    if patches.shape != (gh * gw, p * p * 3):
        raise ShapeError(f"patch matrix {patches.shape} does not match a {height}x{width} image")
    x = patches.reshape(gh, gw, p, p, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(height, width, 3)


def denormalize(x: np.ndarray, norm: PixelNorm = PixelNorm()) -> np.ndarray:
    return np.rint((x * np.asarray(norm.std) + np.asarray(norm.mean)) * 255.0).clip(0, 255).astype(np.uint8)


@dataclass
class TokenizedEntity:
    patch_values: np.ndarray  # (|P|, p*p*3)
    text_ids: np.ndarray  # (|D|,)

    @property
    def num_patches(self) -> int:
        return len(self.patch_values)

    @property
    def modality_tags(self) -> np.ndarray:
        return np.concatenate([np.full(self.num_patches, VISUAL), np.full(len(self.text_ids), TEXTUAL)])

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.num_patches + len(self.text_ids))


def tokenize_entity(image, text, vocab, patch_size, text_len, norm=PixelNorm()) -> TokenizedEntity:
    return TokenizedEntity(patchify(image, patch_size, norm), tokenize_text(text, text_len, vocab))


class EmbeddingTables(nn.Module):
    """Learnable tables: patch projection, token lookup, two modality vectors, one positional table.

    Positions ``[0, num_patches)`` are visual; text tokens always start at
    ``num_patches``, which is also where relation descriptions are placed.
    """

    def __init__(self, vocab_size, patch_dim, num_patches, max_text_len, dim):
        super().__init__()
        self.num_patches = num_patches
        self.patch_proj = nn.Linear(patch_dim, dim)
        self.token = nn.Embedding(vocab_size, dim)
        self.modality = nn.Embedding(2, dim)
        self.position = nn.Parameter(torch.zeros(num_patches + max_text_len, dim))
        nn.init.normal_(self.position, std=0.02)
        nn.init.normal_(self.modality.weight, std=0.02)
        nn.init.normal_(self.token.weight, std=0.02)

    @property
    def dim(self) -> int:
        return self.token.embedding_dim

    def visual(self, patches: torch.Tensor) -> torch.Tensor:
        P = patches.shape[-2]
        if patches.shape[-1] != self.patch_proj.in_features or P > self.num_patches:
            raise DimensionMismatch(f"patches {tuple(patches.shape)} do not fit the patch projection")
        return self.patch_proj(patches) + self.modality.weight[VISUAL] + self.position[:P]

    def textual(self, ids: torch.Tensor) -> torch.Tensor:
        L = ids.shape[-1]
        start = self.num_patches
        if start + L > self.position.shape[0]:
            raise DimensionMismatch(f"text length {L} exceeds the positional table")
        return self.token(ids) + self.modality.weight[TEXTUAL] + self.position[start : start + L]

    def forward(self, patches: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.visual(patches), self.textual(ids)], dim=-2)


def embed_sequence(tok: TokenizedEntity, tables: EmbeddingTables) -> torch.Tensor:
    """S_e: one (|P|+|D|, d) matrix for a single entity."""
    patches = torch.as_tensor(tok.patch_values, dtype=tables.patch_proj.weight.dtype)
    ids = torch.as_tensor(tok.text_ids, dtype=torch.long)
    if ids.numel() and int(ids.max()) >= tables.token.num_embeddings:
        raise DimensionMismatch("token id outside the vocabulary table")
    return tables(patches, ids)
