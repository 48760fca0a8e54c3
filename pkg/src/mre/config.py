"""Configuration dataclasses and the flat ``key = value`` config file format.

Every field of every section is addressable by its bare name, so field
names are unique across sections.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError


@dataclass
class DataConfig:
    image_size: int = 256
    patch_size: int = 16
    text_len: int = 64
    relation_text_len: int = 320
    pixel_mean: tuple = (0.5, 0.5, 0.5)
    pixel_std: tuple = (0.5, 0.5, 0.5)
    allow_missing: bool = False

    def validate(self):
        if self.image_size % self.patch_size:
            raise ValidationError("image_size must be divisible by patch_size")
        if min(self.text_len, self.relation_text_len) < 1:
            raise ValidationError("text lengths must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class LearnerConfig:
    embed_dim: int = 384
    encoder_layers: int = 12
    decoder_layers: int = 8
    heads: int = 0  # 0: embed_dim // 64
    mlp_ratio: int = 4
    mask_ratio: float = 0.75
    lambda_p: float = 1.0
    lambda_d: float = 1.0
    tau: float = 0.07
    similarity: str = "cosine"  # or "abs"
    lambda_c: float = 1.0
    lambda_r: float = 1.0
    lambda_m: float = 1.0

    def validate(self):
        if not 0 < self.mask_ratio < 1:
            raise ValidationError("mask_ratio must be in (0, 1)")
        if self.tau <= 0:
            raise ValidationError("tau must be > 0")
        if min(self.lambda_p, self.lambda_d, self.lambda_c, self.lambda_r, self.lambda_m) < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.similarity not in ("cosine", "abs"):
            raise ValidationError("similarity must be 'cosine' or 'abs'")
        if self.embed_dim % self.num_heads:
            raise ValidationError("embed_dim must be divisible by heads")

    @property
    def num_heads(self) -> int:
        return self.heads or max(1, self.embed_dim // 64)


@dataclass
class ConsolidatorConfig:
    gnn_layers: int = 2
    leaky_slope: float = 0.01
    margin: float = 1.0
    num_bases: int = 0  # 0: one full matrix per relation
    inverse_edges: bool = True
    margin_reduction: str = "sum"

    def validate(self):
        if self.margin_reduction not in ("sum", "mean"):
            raise ValidationError("margin_reduction must be 'sum' or 'mean'")


@dataclass
class GanConfig:
    noise_dim: int = 15
    cls_weight: float = 1.0  # lambda on L_cls(x_tr) in the critic loss
    critic_steps: int = 5
    gp_weight: float = 10.0
    extractor_margin: float = 0.5
    k_ref: int = 0  # 0: min(5, |T_r| // 2)
    literal_extractor_sign: bool = False
    extractor_hidden: int = 0  # 0: single linear layers
    disc_hidden: int = 0  # 0: embed_dim
    noise_per_relation: int = 4

    def validate(self):
        if self.noise_dim < 1 or self.critic_steps < 1:
            raise ValidationError("noise_dim and critic_steps must be >= 1")


@dataclass
class TrainConfig:
    seed: int = 0
    fusion_epochs: int = 1  # p
    outer_cycles: int = 1
    patience: int = 0  # 0: no early stopping
    relations_per_batch: int = 8
    fanout: int = 4
    contrastive_batch: int = 256
    lr_fusion: float = 1e-4
    lr_extractor: float = 1e-3
    lr_generator: float = 1e-4
    lr_discriminator: float = 4e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    generator_weight_decay: float = 0.0  # decoupled; shrinks directions no seen description constrains
    restart_period: int = 50
    min_lr: float = 1e-6
    extractor_steps: int = 100
    gan_steps: int = 100
    grad_clip: float = 1.0
    freeze_encoder: bool = True
    freeze_consolidator: bool = True
    detach_entity_table: bool = True
    mode_collapse_threshold: float = 1e-6
    checkpoint_every: int = 0  # outer cycles; 0: only at the end
    log_every: int = 1

    def validate(self):
        if self.fusion_epochs < 1 or self.outer_cycles < 1:
            raise ValidationError("fusion_epochs and outer_cycles must be >= 1")
        for name in ("lr_fusion", "lr_extractor", "lr_generator", "lr_discriminator"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0")


@dataclass
class EvalConfig:
    n_noise: int = 20
    filtered: bool = False
    ties: str = "optimistic"
    corrupt: str = "tail"

    def validate(self):
        if self.n_noise < 1:
            raise ValidationError("n_noise must be >= 1")
        if self.ties not in ("optimistic", "pessimistic", "mean"):
            raise ValidationError("ties must be optimistic, pessimistic or mean")
        if self.corrupt not in ("head", "tail"):
            raise ValidationError("corrupt must be 'head' or 'tail'")


SECTIONS = ("data", "learner", "consolidator", "gan", "train", "eval")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    consolidator: ConsolidatorConfig = field(default_factory=ConsolidatorConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def _locate(self, key):
        for name in SECTIONS:
            section = getattr(self, name)
            if key in {f.name for f in dataclasses.fields(section)}:
                return section
        raise ValidationError(f"unknown config key {key!r}")

    def get(self, key):
        return getattr(self._locate(key), key)

    def set(self, key, value) -> None:
        section = self._locate(key)
        hint = typing.get_type_hints(type(section))[key]
        setattr(section, key, coerce(value, hint, key))

    def update(self, pairs: dict) -> "Config":
        for k, v in pairs.items():
            self.set(k, v)
        return self

    def to_flat(self) -> dict:
        out = {}
        for name in SECTIONS:
            out.update(dataclasses.asdict(getattr(self, name)))
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "Config":
        return cls().update(flat)

    def copy(self) -> "Config":
        return Config.from_flat(self.to_flat())

    def dump(self, path) -> None:
        lines = []
        for name in SECTIONS:
            lines.append(f"# {name}")
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{k} = {v}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def coerce(value, hint, key="value"):
    if not isinstance(value, str):
        if hint is tuple and isinstance(value, (list, tuple)):
            return tuple(float(x) for x in value)
        if hint is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if hint is int and isinstance(value, bool):
            raise ValidationError(f"{key} expects an integer")
        return value
    s = value.strip()
    try:
        if hint is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if hint is int:
            return int(s)
        if hint is float:
            return float(s)
        if hint is tuple:
            return tuple(float(x) for x in s.strip("()[]").split(",") if x.strip())
    except ValueError:
        raise ValidationError(f"cannot parse {key} = {value!r} as {hint.__name__}") from None
    return s


def parse_config_text(text: str, path=None) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", path, lineno)
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Defaults, then the file at ``path``, then ``overrides`` (CLI wins)."""
    cfg = Config()
    if path is not None:
        cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8"), path))
    if overrides:
        cfg.update(overrides)
    return cfg.validate()


def small_config(**overrides) -> Config:
    """Desk-scale settings used by the synthetic benchmark and the test-suite."""
    cfg = Config()
    cfg.update(
        {
            "image_size": 32,
            "patch_size": 8,
            "text_len": 12,
            "relation_text_len": 12,
            "embed_dim": 32,
            "encoder_layers": 2,
            "decoder_layers": 1,
            "heads": 2,
            "tau": 0.2,
            "margin_reduction": "mean",
            "relations_per_batch": 4,
            "fanout": 3,
            "lr_fusion": 2e-3,
            "lr_extractor": 3e-3,
            "lr_generator": 3e-3,
            "generator_weight_decay": 0.5,
            "lr_discriminator": 1e-3,
            "fusion_epochs": 60,
            "outer_cycles": 1,
            "extractor_steps": 150,
            "gan_steps": 400,
            "critic_steps": 2,
            "restart_period": 400,
            "n_noise": 20,
        }
    )
    cfg.update(overrides)
    return cfg.validate()
