"""Masked joint encoder/decoder over concatenated image-patch and text tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import DataConfig, LearnerConfig
from .errors import BatchTooSmall, DimensionMismatch, ValidationError
from .kg import as_rng, round_half_up
from .tokenization import TEXTUAL, VISUAL, EmbeddingTables


def mask_count(length: int, m: float) -> int:
    return round_half_up(m * length)


@dataclass
class MaskPlan:
    """Kept / masked indices per modality (modality-local positions).

    Arrays are 1-D for a single entity or 2-D ``(batch, k)`` for a stacked plan.
    """

    visual_kept: np.ndarray
    visual_masked: np.ndarray
    text_kept: np.ndarray
    text_masked: np.ndarray
    ratio: float

    @property
    def num_patches(self) -> int:
        return self.visual_kept.shape[-1] + self.visual_masked.shape[-1]

    @property
    def text_len(self) -> int:
        return self.text_kept.shape[-1] + self.text_masked.shape[-1]

    def kept_positions(self) -> np.ndarray:
        """Positions in the concatenated sequence, visual first."""
        return np.concatenate([self.visual_kept, self.text_kept + self.num_patches], axis=-1)

    def masked_positions(self) -> np.ndarray:
        return np.concatenate([self.visual_masked, self.text_masked + self.num_patches], axis=-1)


def plan_mask(tok_lengths, m: float, seed=None) -> MaskPlan:
    """Uniformly mask ``round_half_up(m * n)`` positions of each modality."""
    if not 0 < m < 1:
        raise ValidationError(f"mask ratio must be in (0, 1), got {m}")
    n_p, n_d = (int(x) for x in tok_lengths)
    rng = as_rng(seed)
    parts = []
    for n in (n_p, n_d):
        perm = rng.permutation(n)
        k = mask_count(n, m)
        parts.append((np.sort(perm[k:]), np.sort(perm[:k])))
    (vk, vm), (tk, tm) = parts
    return MaskPlan(vk, vm, tk, tm, m)


def stack_plans(plans) -> MaskPlan:
    return MaskPlan(
        np.stack([p.visual_kept for p in plans]),
        np.stack([p.visual_masked for p in plans]),
        np.stack([p.text_kept for p in plans]),
        np.stack([p.text_masked for p in plans]),
        plans[0].ratio,
    )


def plan_masks(batch: int, tok_lengths, m: float, seed=None) -> MaskPlan:
    rng = as_rng(seed)
    return stack_plans([plan_mask(tok_lengths, m, rng) for _ in range(batch)])


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise DimensionMismatch(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_padding=None):
        B, L, C = x.shape
        q, k, v = self.qkv(x).reshape(B, L, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if key_padding is not None:
            attn = attn.masked_fill(key_padding[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(B, L, C))


class Block(nn.Module):
    """Pre-norm transformer block with a GELU feed-forward."""

    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x, key_padding=None):
        x = x + self.attn(self.norm1(x), key_padding)
        return x + self.mlp(self.norm2(x))


class TransformerStack(nn.Module):
    def __init__(self, dim, depth, heads, mlp_ratio=4):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))

    def forward(self, x, key_padding=None):
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"expected width {self.dim}, got {x.shape[-1]}")
        for blk in self.blocks:
            x = blk(x, key_padding)
        return x


@dataclass
class JointEncoding:
    """Encoder output for a batch: ``cls`` is (B, d), ``tokens`` is (B, L, d) without the CLS row."""

    cls: torch.Tensor
    tokens: torch.Tensor
    padding: torch.Tensor | None = None  # (B, L) True where the input token was PAD

    @property
    def full(self) -> torch.Tensor:
        return torch.cat([self.cls[:, None], self.tokens], dim=1)


@dataclass
class Reconstruction:
    patch_preds: torch.Tensor  # (B, |M^P|, p*p*3)
    token_logits: torch.Tensor  # (B, |M^D|, V)


class MultimodalLearner(nn.Module):
    """Joint encoder (Phi_E) and decoder (Phi_D) with reconstruction heads."""

    def __init__(self, cfg: LearnerConfig, data: DataConfig, vocab_size: int):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.num_patches = data.num_patches
        self.text_len = data.text_len
        self.tables = EmbeddingTables(
            vocab_size, data.patch_dim, data.num_patches, max(data.text_len, data.relation_text_len), d
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.encoder = TransformerStack(d, cfg.encoder_layers, cfg.num_heads, cfg.mlp_ratio)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.decoder = TransformerStack(d, cfg.decoder_layers, cfg.num_heads, cfg.mlp_ratio)
        self.patch_head = nn.Linear(d, data.patch_dim)
        self.token_head = nn.Linear(d, vocab_size)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)

    @property
    def dim(self) -> int:
        return self.cfg.embed_dim

    def encoder_parameters(self):
        yield from self.tables.parameters()
        yield self.cls_token
        yield from self.encoder.parameters()

    def decoder_parameters(self):
        yield self.mask_token
        yield from self.decoder.parameters()
        yield from self.patch_head.parameters()
        yield from self.token_head.parameters()

    def embed(self, patches, ids):
        """S_e for a batch plus its PAD flags."""
        S = self.tables(patches, ids)
        pad = torch.cat([torch.zeros(patches.shape[:2], dtype=torch.bool, device=ids.device), ids == 0], dim=1)
        return S, pad

    def encode(self, S, padding=None) -> JointEncoding:
        """Prepend CLS and run the encoder stack over ``S`` (B, L, d)."""
        if S.dim() != 3 or S.shape[-1] != self.dim:
            raise DimensionMismatch(f"expected (B, L, {self.dim}) input, got {tuple(S.shape)}")
        B = S.shape[0]
        x = torch.cat([self.cls_token.expand(B, -1, -1).to(S.dtype), S], dim=1)
        kp = None
        if padding is not None:
            kp = torch.cat([torch.zeros(B, 1, dtype=torch.bool, device=S.device), padding], dim=1)
        out = self.encoder(x, kp)
        return JointEncoding(out[:, 0], out[:, 1:], padding)

    def encode_full(self, patches, ids) -> JointEncoding:
        S, pad = self.embed(patches, ids)
        return self.encode(S, pad)

    def encode_masked(self, patches, ids, plan: MaskPlan):
        S, pad = self.embed(patches, ids)
        kept = torch.as_tensor(plan.kept_positions(), dtype=torch.long)
        S_kept = torch.gather(S, 1, kept[..., None].expand(-1, -1, S.shape[-1]))
        return self.encode(S_kept, torch.gather(pad, 1, kept))

    def encode_text(self, ids) -> torch.Tensor:
        """CLS of a text-only sequence (relation descriptions), unmasked."""
        return self.encode(self.tables.textual(ids), ids == 0).cls

    def decode_and_reconstruct(self, enc: JointEncoding, plan: MaskPlan) -> Reconstruction:
        B, _, d = enc.tokens.shape
        L = plan.num_patches + plan.text_len
        kept = torch.as_tensor(plan.kept_positions(), dtype=torch.long)
        masked = torch.as_tensor(plan.masked_positions(), dtype=torch.long)
        if kept.shape != (B, enc.tokens.shape[1]):
            raise DimensionMismatch("mask plan does not match the encoding")
        modality = torch.full((L,), VISUAL, dtype=torch.long)
        modality[plan.num_patches :] = TEXTUAL
        fill = self.mask_token + self.tables.position[:L] + self.tables.modality(modality)
        full = fill.to(enc.tokens.dtype).expand(B, L, d).clone()
        full = full.scatter(1, kept[..., None].expand(-1, -1, d), enc.tokens)
        out = self.decoder(torch.cat([enc.cls[:, None], full], dim=1))[:, 1:]
        n_mp = plan.visual_masked.shape[-1]
        picked = torch.gather(out, 1, masked[..., None].expand(-1, -1, d))
        return Reconstruction(self.patch_head(picked[:, :n_mp]), self.token_head(picked[:, n_mp:]))


def masked_targets(plan: MaskPlan, patches, ids):
    vm = torch.as_tensor(plan.visual_masked, dtype=torch.long)
    tm = torch.as_tensor(plan.text_masked, dtype=torch.long)
    if vm.dim() == 1:
        return patches[vm], ids[tm]
    return (
        torch.gather(patches, 1, vm[..., None].expand(-1, -1, patches.shape[-1])),
        torch.gather(ids, 1, tm),
    )


def reconstruction_loss(patch_preds, token_logits, patch_targets, token_targets, lambda_p=1.0, lambda_d=1.0):
    """(L_r^P, L_r^D, L_r): mean squared patch error and mean token cross-entropy over masked slots.

    Targets must already be restricted to masked positions (see :func:`masked_targets`).
    An empty masked set contributes 0.
    """
    patch_preds = patch_preds.reshape(-1, patch_preds.shape[-1])
    patch_targets = patch_targets.reshape(-1, patch_targets.shape[-1])
    if patch_preds.shape != patch_targets.shape:
        raise DimensionMismatch("patch predictions and targets differ in shape")
    if len(patch_preds):
        lp = ((patch_preds - patch_targets) ** 2).sum(-1).mean()
    else:
        lp = patch_preds.sum() * 0
    logits = token_logits.reshape(-1, token_logits.shape[-1])
    targets = token_targets.reshape(-1)
    ld = F.cross_entropy(logits, targets) if len(targets) else logits.sum() * 0
    return lp, ld, lambda_p * lp + lambda_d * ld


def modality_means(enc: JointEncoding, plan: MaskPlan):
    """Mean encoded visual and textual tokens (P_a, D_a) per entity; PAD tokens are skipped."""
    n_vis = plan.visual_kept.shape[-1]
    vis = enc.tokens[:, :n_vis]
    txt = enc.tokens[:, n_vis:]
    P_a = vis.mean(1) if n_vis else vis.new_zeros(vis.shape[0], vis.shape[-1])
    if txt.shape[1] == 0:
        return P_a, txt.new_zeros(txt.shape[0], txt.shape[-1])
    w = torch.ones(txt.shape[:2], dtype=txt.dtype)
    if enc.padding is not None:
        w = (~enc.padding[:, n_vis:]).to(txt.dtype)
        w = torch.where(w.sum(1, keepdim=True) > 0, w, torch.ones_like(w))
    D_a = (txt * w[..., None]).sum(1) / w.sum(1, keepdim=True)
    return P_a, D_a


def similarity_matrix(visual, textual, kind="cosine"):
    if kind == "cosine":
        return F.normalize(visual, dim=-1) @ F.normalize(textual, dim=-1).T
    if kind == "abs":
        return visual.abs() @ textual.abs().T
    raise ValidationError(f"unknown similarity {kind!r}")


def contrastive_from_similarity(s, tau):
    if s.shape[0] < 2:
        raise BatchTooSmall("contrastive loss needs at least 2 entities")
    if tau <= 0:
        raise ValidationError("tau must be > 0")
    return F.cross_entropy(s / tau, torch.arange(s.shape[0]))


def contrastive_loss(visual_means, text_means, tau, kind="cosine"):
    """Image-to-text InfoNCE over N entities; row i's positive is column i."""
    return contrastive_from_similarity(similarity_matrix(visual_means, text_means, kind), tau)
