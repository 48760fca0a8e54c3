"""Two-phase training driver: fusion (L_1) then extractor + adversarial generator."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .consolidator import margin_loss, transe_score
from .errors import CorruptCheckpoint, ExhaustedCandidates, NonFiniteLoss, TooFewTriples, VersionMismatch
from .generator import ClusterStats, discriminator_loss, extractor_loss, generator_loss
from .kg import MultimodalKG, RelationSplit, default_k_ref, sample_negatives, sample_reference_sets, sample_subgraph
from .learner import contrastive_loss, masked_targets, modality_means, plan_masks, reconstruction_loss
from .model import MREModel, TokenizedKG, xavier_violations
from .tokenization import Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mre-checkpoint"
CHECKPOINT_VERSION = 1

_PURPOSES = {"epoch": 1, "subgraph": 2, "mask": 3, "negatives": 4, "extractor": 5, "gan": 6, "eval": 7}


class ModeCollapseWarning(UserWarning):
    pass


def derived_rng(seed: int, purpose: str, counter: int) -> np.random.Generator:
    """Independent stream per (seed, purpose, counter); resuming needs only the counters."""
    return np.random.default_rng([int(seed), _PURPOSES[purpose], int(counter)])


def derived_torch_generator(seed: int, purpose: str, counter: int) -> torch.Generator:
    s = int(derived_rng(seed, purpose, counter).integers(0, 2**62))
    return torch.Generator().manual_seed(s)


@dataclass
class TrainState:
    fusion_epoch: int = 0
    fusion_step: int = 0
    extractor_step: int = 0
    gan_step: int = 0
    cycle: int = 0
    best_val_mrr: float = -1.0
    stale_cycles: int = 0
    history: list = field(default_factory=list)

    def counters(self) -> dict:
        return {k: getattr(self, k) for k in ("fusion_epoch", "fusion_step", "extractor_step", "gan_step", "cycle")}


@dataclass
class FusionBatch:
    relations: list
    subgraph: object
    negatives: np.ndarray  # (n, 3), one per row of subgraph.batch_triples kept in ``positives``
    positives: np.ndarray


def _finite(losses: dict) -> bool:
    return all(math.isfinite(v) for v in losses.values())


class Trainer:
    """Owns the model, optimizers, schedulers and all counters of a run."""

    def __init__(self, kg: MultimodalKG, vocab: Vocabulary, cfg: Config, log_path=None, model: MREModel | None = None):
        cfg.validate()
        self.kg = kg
        self.vocab = vocab
        self.cfg = cfg
        self.seed = cfg.train.seed
        self.data = TokenizedKG.build(kg, vocab, cfg)
        train_rel = sorted(r for r in kg.train_relations if len(kg.triple_indices(r)))
        if model is None:
            torch.manual_seed(self.seed)
            model = MREModel(cfg, len(vocab), train_rel, kg.num_relations)
            bad = xavier_violations(model)
            if bad:
                raise RuntimeError(f"layers outside their Xavier bound after init: {bad}")
        self.model = model
        self.state = TrainState()
        self.log_path = Path(log_path) if log_path else None
        self._build_optimizers()

    # -- setup --------------------------------------------------------------

    def _adam(self, params, lr):
        t = self.cfg.train
        return torch.optim.Adam(params, lr=lr, betas=(t.adam_beta1, t.adam_beta2), weight_decay=t.weight_decay)

    def _build_optimizers(self):
        m, t = self.model, self.cfg.train
        fusion = [p for g in ("encoder", "decoder", "consolidator", "projector") for p in m.group_parameters(g)]
        self.optimizers = {
            "fusion": self._adam(fusion, t.lr_fusion),
            "extractor": self._adam(m.group_parameters("extractor"), t.lr_extractor),
            "generator": torch.optim.AdamW(
                m.group_parameters("noise") + m.group_parameters("projector"),
                lr=t.lr_generator,
                betas=(t.adam_beta1, t.adam_beta2),
                weight_decay=t.generator_weight_decay,
            ),
            "discriminator": self._adam(m.group_parameters("discriminator"), t.lr_discriminator),
        }
        self.schedulers = {
            k: torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=t.restart_period, eta_min=t.min_lr)
            for k, opt in self.optimizers.items()
        }

    def _set_trainable(self, groups, flag):
        for g in groups:
            for p in self.model.group_parameters(g):
                p.requires_grad_(flag)

    def _step(self, name, loss, clip=None):
        opt = self.optimizers[name]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if clip:
            params = [p for grp in opt.param_groups for p in grp["params"] if p.grad is not None]
            torch.nn.utils.clip_grad_norm_(params, clip)
        opt.step()
        self.schedulers[name].step()

    def _record(self, phase, step, losses):
        if not _finite(losses):
            raise NonFiniteLoss(phase, step, losses)
        row = {"phase": phase, "step": step, **{k: float(v) for k, v in losses.items()}}
        self.state.history.append(row)
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(row) + "\n")

    # -- phase 1 ------------------------------------------------------------

    def fusion_batches(self, epoch: int):
        """Deterministic batch plan for one fusion epoch (subgraphs and paired negatives)."""
        t = self.cfg.train
        rels = list(self.model.train_relations)
        order = derived_rng(self.seed, "epoch", epoch).permutation(rels).tolist()
        step = self.state.fusion_step
        for i in range(0, len(order), t.relations_per_batch):
            batch = sorted(order[i : i + t.relations_per_batch])
            sub = sample_subgraph(
                self.kg, batch, t.fanout, derived_rng(self.seed, "subgraph", step), neighbor_relations=rels
            )
            rng = derived_rng(self.seed, "negatives", step)
            pos, neg = [], []
            for tr in sub.batch_triples:
                try:
                    (n,) = sample_negatives(self.kg, tr, 1, "both", rng, candidates=sub.entities)
                except ExhaustedCandidates:
                    continue
                pos.append(tr)
                neg.append(n)
            yield FusionBatch(batch, sub, np.asarray(neg, dtype=np.int64).reshape(-1, 3), np.asarray(pos).reshape(-1, 3))
            step += 1

    def margin_objective(self, batch: FusionBatch):
        m, data = self.model, self.data
        sub = batch.subgraph
        x = m.consolidator(m.entity_cls(data, sub.entities), sub)
        rels = np.unique(batch.positives[:, 1])
        xr_all = m.relation_for_scoring(data, rels)
        row = {int(r): i for i, r in enumerate(rels.tolist())}
        ri = torch.as_tensor([row[int(r)] for r in batch.positives[:, 1]], dtype=torch.long)
        xr = xr_all[ri]
        f_pos = transe_score(x[sub.local(batch.positives[:, 0])], xr, x[sub.local(batch.positives[:, 2])])
        f_neg = transe_score(x[sub.local(batch.negatives[:, 0])], xr, x[sub.local(batch.negatives[:, 2])])
        c = self.cfg.consolidator
        return margin_loss(f_pos, f_neg, c.margin, c.margin_reduction)

    def multimodal_objective(self, entities, step):
        lc = self.cfg.learner
        m, data = self.model, self.data
        ents = np.asarray(entities)
        cap = self.cfg.train.contrastive_batch
        if len(ents) > cap:
            ents = np.sort(derived_rng(self.seed, "mask", step).choice(ents, size=cap, replace=False))
        idx = torch.as_tensor(ents, dtype=torch.long)
        patches, ids = data.patches[idx], data.text_ids[idx]
        plan = plan_masks(len(ents), (patches.shape[1], ids.shape[1]), lc.mask_ratio, derived_rng(self.seed, "mask", step))
        enc = m.learner.encode_masked(patches, ids, plan)
        rec = m.learner.decode_and_reconstruct(enc, plan)
        tp, tt = masked_targets(plan, patches, ids)
        lrp, lrd, lr = reconstruction_loss(rec.patch_preds, rec.token_logits, tp, tt, lc.lambda_p, lc.lambda_d)
        if len(ents) >= 2:
            pa, da = modality_means(enc, plan)
            lcon = contrastive_loss(pa, da, lc.tau, lc.similarity)
        else:
            lcon = lr * 0
        return lrp, lrd, lr, lcon

    def run_fusion_phase(self, epochs: int | None = None):
        """``epochs`` (default ``fusion_epochs``) passes over the train relations minimizing L_1."""
        lc = self.cfg.learner
        self._set_trainable(("encoder", "decoder", "consolidator", "projector"), True)
        self.model.train()
        for _ in range(self.cfg.train.fusion_epochs if epochs is None else epochs):
            for batch in self.fusion_batches(self.state.fusion_epoch):
                step = self.state.fusion_step
                losses = {}
                total = 0.0
                if lc.lambda_r or lc.lambda_c:
                    lrp, lrd, lr, lcon = self.multimodal_objective(batch.subgraph.entities, step)
                    total = lc.lambda_c * lcon + lc.lambda_r * lr
                    losses.update(L_rP=lrp.item(), L_rD=lrd.item(), L_r=lr.item(), L_c=lcon.item())
                if lc.lambda_m and len(batch.positives):
                    lm = self.margin_objective(batch)
                    total = total + lc.lambda_m * lm
                    losses["L_m"] = lm.item()
                if not torch.is_tensor(total):
                    self.state.fusion_step += 1
                    continue
                losses["L_1"] = total.item()
                self._record("fusion", step, losses)
                self._step("fusion", total)
                self.state.fusion_step += 1
            self.state.fusion_epoch += 1
        return self.state

    # -- phase 2 ------------------------------------------------------------

    def _zeroshot_relations(self):
        return [r for r in self.model.train_relations if len(self.kg.triple_indices(r)) >= 2]

    def frozen_entity_table(self):
        with torch.no_grad():
            self.model.eval()
            table = self.model.entity_table(self.kg, self.data)
        return table

    def train_extractor(self, table, neighbors, steps):
        g = self.cfg.gan
        rels = self._zeroshot_relations()
        for _ in range(steps):
            step = self.state.extractor_step
            rng = derived_rng(self.seed, "extractor", step)
            terms = []
            for r in rels:
                n = len(self.kg.triple_indices(r))
                k = g.k_ref or default_k_ref(n)
                try:
                    ref, pos, neg = sample_reference_sets(self.kg, r, min(k, n - 1), rng)
                except (TooFewTriples, ExhaustedCandidates):
                    continue
                heads = np.concatenate([ref[:, 0], pos[:, 0], neg[:, 0]])
                tails = np.concatenate([ref[:, 2], pos[:, 2], neg[:, 2]])
                emb = self.model.pair_embeddings(table, heads, tails, neighbors)
                a, b = len(ref), len(ref) + len(pos)
                terms.append(extractor_loss(emb[:a], emb[a:b], emb[b:], g.extractor_margin, g.literal_extractor_sign))
            if not terms:
                break
            lf = torch.stack(terms).mean()
            self._record("extractor", step, {"L_f": lf.item()})
            self._step("extractor", lf)
            self.state.extractor_step += 1

    def cluster_centers(self, table, neighbors, relations):
        stats = ClusterStats(self.model.dim)
        with torch.no_grad():
            for r in relations:
                trip = self.kg.triples_of(r)
                stats.add(r, self.model.pair_embeddings(table, trip[:, 0], trip[:, 2], neighbors))
        return stats

    def train_adversarial(self, centers, steps):
        g, t = self.cfg.gan, self.cfg.train
        m = self.model
        rels = [r for r in m.train_relations if r in centers.counts]
        if not rels:
            return
        with torch.no_grad():
            cls = m.relation_cls(self.data, rels)
        k = g.noise_per_relation
        cls_rep = cls.repeat_interleave(k, 0)
        labels = torch.as_tensor([m.label_of[r] for r in rels], dtype=torch.long).repeat_interleave(k)
        table = torch.zeros(len(m.train_relations), m.dim)
        table[[m.label_of[r] for r in rels]] = centers.centers(rels).to(table.dtype)
        real = table[labels]
        for _ in range(steps):
            step = self.state.gan_step
            gen = derived_torch_generator(self.seed, "gan", step)
            for _c in range(g.critic_steps):
                with torch.no_grad():
                    fake = m.generate(cls_rep, torch.randn(len(cls_rep), g.noise_dim, generator=gen))
                ld = discriminator_loss(real, fake, m.discriminator, m.classifier, labels, g.cls_weight, g.gp_weight, generator=gen)
                self._step("discriminator", ld, t.grad_clip)
            fake = m.generate(cls_rep, torch.randn(len(cls_rep), g.noise_dim, generator=gen))
            lg = generator_loss(fake, labels, m.discriminator, m.classifier, table)
            spread = fake.detach().reshape(len(rels), k, -1).var(1, unbiased=False).mean().item() if k > 1 else float("nan")
            self._record("adversarial", step, {"L_D": ld.item(), "L_G": lg.item()})
            self._step("generator", lg, t.grad_clip)
            if k > 1 and spread < t.mode_collapse_threshold:
                warnings.warn(f"generated embeddings collapsed (variance {spread:.2e})", ModeCollapseWarning)
            self.state.gan_step += 1

    def run_zeroshot_phase(self):
        """Train the extractor on reference/positive/negative sets, then the generator/critic pair.

        The joint encoder (and by default the consolidator) stays frozen.
        """
        t = self.cfg.train
        frozen = ["encoder"] if t.freeze_encoder else []
        if t.freeze_consolidator:
            frozen.append("consolidator")
        self._set_trainable(frozen, False)
        try:
            table = self.frozen_entity_table()
            self.model.train()
            neighbors = self.model.neighbor_index(self.kg)
            self.train_extractor(table, neighbors, t.extractor_steps)
            centers = self.cluster_centers(table, neighbors, self._zeroshot_relations())
            self.train_adversarial(centers, t.gan_steps)
        finally:
            self._set_trainable(frozen, True)
            self.model.eval()
        return self.state

    # -- driver -------------------------------------------------------------

    def fit(self, checkpoint_path=None, evaluate_val=None):
        """Outer cycles of (fusion, zero-shot); stops early on a validation-MRR plateau.

        ``evaluate_val(trainer) -> float`` overrides the default validation metric.
        """
        t = self.cfg.train
        has_val = self.kg.split is not None and len(self.kg.split.val) > 0
        while self.state.cycle < t.outer_cycles:
            self.run_fusion_phase()
            self.run_zeroshot_phase()
            self.state.cycle += 1
            if has_val or evaluate_val is not None:
                score = evaluate_val(self) if evaluate_val else self._val_mrr()
                self._record("validation", self.state.cycle, {"val_mrr": score})
                if score > self.state.best_val_mrr:
                    self.state.best_val_mrr, self.state.stale_cycles = score, 0
                else:
                    self.state.stale_cycles += 1
                if t.patience and self.state.stale_cycles >= t.patience:
                    log.info("validation MRR plateaued after %d cycles", self.state.cycle)
                    break
            if checkpoint_path and t.checkpoint_every and self.state.cycle % t.checkpoint_every == 0:
                self.save(checkpoint_path)
        if checkpoint_path:
            self.save(checkpoint_path)
        return self.state

    def _val_mrr(self):
        from .evaluation import run_eval

        report = run_eval(self.kg, self.model, self.data, n_noise=self.cfg.eval.n_noise, seed=self.seed,
                          relations=sorted(self.kg.split.val), filtered=self.cfg.eval.filtered)
        return report.overall.mrr

    # -- checkpointing ------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "manifest": {k: list(v.shape) for k, v in self.model.state_dict().items()},
            "model": self.model.state_dict(),
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "schedulers": {k: s.state_dict() for k, s in self.schedulers.items()},
            "rng": {"seed": self.seed, **self.state.counters()},
            "state": {"best_val_mrr": self.state.best_val_mrr, "stale_cycles": self.state.stale_cycles},
            "history": json.dumps(self.state.history),
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.cfg.to_flat().items()},
            "vocab": list(self.vocab.tokens),
            "train_relations": list(self.model.train_relations),
            "split": None if self.kg.split is None else self.kg.split.to_json(self.kg.relation_names),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def resume(cls, path, kg: MultimodalKG, log_path=None) -> "Trainer":
        """Rebuild a trainer from a checkpoint; ``kg`` must be the graph it was trained on."""
        ckpt = read_checkpoint(path)
        cfg = Config.from_flat(ckpt["config"])
        vocab = Vocabulary(ckpt["vocab"])
        if ckpt.get("split") is not None:
            names = kg.relation_index
            sp = ckpt["split"]
            kg = kg.with_split(RelationSplit(
                [names[n] for n in sp["train"]], [names[n] for n in sp["val"]], [names[n] for n in sp["test"]],
                ratio_u=len(sp["test"]) / kg.num_relations,
            ))
        model = MREModel(cfg, len(vocab), ckpt["train_relations"], kg.num_relations)
        load_model_state(model, ckpt)
        trainer = cls(kg, vocab, cfg, log_path=log_path, model=model)
        for k, o in trainer.optimizers.items():
            o.load_state_dict(ckpt["optimizers"][k])
        for k, s in trainer.schedulers.items():
            s.load_state_dict(ckpt["schedulers"][k])
        rng = ckpt["rng"]
        trainer.seed = int(rng["seed"])
        for k in trainer.state.counters():
            setattr(trainer.state, k, int(rng[k]))
        trainer.state.best_val_mrr = float(ckpt["state"]["best_val_mrr"])
        trainer.state.stale_cycles = int(ckpt["state"]["stale_cycles"])
        trainer.state.history = json.loads(ckpt["history"])
        return trainer


def read_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"{path} is not an MRE checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {ckpt.get('version')}, expected {CHECKPOINT_VERSION}")
    for key in ("manifest", "model", "config", "vocab", "train_relations"):
        if key not in ckpt:
            raise CorruptCheckpoint(f"checkpoint lacks '{key}'")
    return ckpt


def load_model_state(model: MREModel, ckpt: dict) -> None:
    state = ckpt["model"]
    manifest = ckpt["manifest"]
    if set(manifest) != set(state):
        raise CorruptCheckpoint("parameter names disagree with the manifest")
    for k, v in state.items():
        if list(v.shape) != list(manifest[k]):
            raise CorruptCheckpoint(f"parameter {k} has shape {list(v.shape)}, manifest says {manifest[k]}")
    expected = model.state_dict()
    if set(expected) != set(state) or any(expected[k].shape != state[k].shape for k in state):
        raise CorruptCheckpoint("checkpoint parameters do not fit the configured model")
    model.load_state_dict(state)


def load_model(path, kg: MultimodalKG | None = None):
    """(model, vocab, config) from a checkpoint, for evaluation-only use."""
    ckpt = read_checkpoint(path)
    cfg = Config.from_flat(ckpt["config"])
    vocab = Vocabulary(ckpt["vocab"])
    model = MREModel(cfg, len(vocab), ckpt["train_relations"])
    load_model_state(model, ckpt)
    model.eval()
    return model, vocab, cfg
