"""Experiment configuration: schema, validation, YAML I/O and dotted overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .datasets import AttributePair, CompositionSpec, SyntheticSpec
from .errors import BatchTooSmall, ConfigError, InconsistentConfig, InvalidSpec
from .losses import LossWeights

SCHEMA_VERSION = 1

VARIANTS = ("fdvae", "vae", "beta_vae", "factor_vae", "ffvae_approx")
DOWNSTREAM_INPUTS = (
    "zt_only", "zt_plus_raw_zm", "zt_plus_transformed_zm",
    "sensitive_only", "nonsensitive_only",
    "latent_removal_k1", "latent_removal_k2",
    "full",
)
DEFAULT_DOWNSTREAM = {
    "fdvae": "zt_plus_transformed_zm",
    "vae": "full",
    "beta_vae": "latent_removal_k1",
    "factor_vae": "latent_removal_k1",
    "ffvae_approx": "nonsensitive_only",
}
ALLOWED_DOWNSTREAM = {
    "fdvae": {"zt_only", "zt_plus_raw_zm", "zt_plus_transformed_zm"},
    "vae": {"full"},
    "beta_vae": {"full", "latent_removal_k1", "latent_removal_k2"},
    "factor_vae": {"full", "latent_removal_k1", "latent_removal_k2"},
    "ffvae_approx": {"sensitive_only", "nonsensitive_only"},
}


@dataclass
class Ablation:
    use_cls: bool = True
    use_adv: bool = True
    use_mal: bool = True
    downstream_input: Optional[str] = None  # None -> the variant's default


@dataclass
class TrainSchedule:
    repr_epochs: int = 20
    downstream_epochs: int = 10
    repr_lr: float = 1e-4
    downstream_lr: float = 1e-3
    disc_lr: Optional[float] = None  # None -> repr_lr
    adv_lr: Optional[float] = None  # adversary heads; None -> repr_lr
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    disc_betas: Optional[tuple] = None  # None -> betas

    @classmethod
    def full_scale(cls, dataset: str = "celeba", **kw) -> "TrainSchedule":
        epochs = {"celeba": 120, "utk": 80}[dataset]
        return cls(repr_epochs=epochs, downstream_epochs=30, repr_lr=1e-4,
                   downstream_lr=1e-6, batch_size=256, **kw)

    def validate(self) -> None:
        if self.repr_epochs < 1 or self.downstream_epochs < 1:
            raise InvalidSpec("epochs must be >= 1")
        for name in ("repr_lr", "downstream_lr", "disc_lr", "adv_lr"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise InvalidSpec(f"{name} must be > 0, got {v}")
        if self.batch_size < 2:
            raise BatchTooSmall(
                f"schedule.batch_size must be >= 2 (subspace shuffling needs B >= 2), got {self.batch_size}"
            )
        if self.optimizer != "adam":
            raise InvalidSpec(f"unsupported optimizer {self.optimizer!r}")
        for b in (self.betas, self.disc_betas):
            if b is not None and (len(b) != 2 or not all(0 <= x < 1 for x in b)):
                raise InvalidSpec(f"optimizer betas must be two values in [0, 1), got {b}")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | attribute
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    root: Optional[str] = None
    target: Optional[str] = None
    protected: Optional[str] = None
    target_positive: int = 1
    protected_positive: int = 1
    composition: Optional[CompositionSpec] = None  # None -> official partition

    def pair(self) -> AttributePair:
        return AttributePair(self.target, self.protected, self.target_positive, self.protected_positive)

    def identifier(self) -> str:
        if self.kind == "synthetic":
            return f"synthetic-rho{self.synthetic.rho:g}"
        return f"{Path(self.root).name}:{self.target}|{self.protected}"

    def validate(self) -> None:
        if self.kind == "synthetic":
            self.synthetic.validate()
        elif self.kind == "attribute":
            if not (self.root and self.target and self.protected):
                raise InvalidSpec("attribute dataset needs root, target and protected")
            self.pair()
        else:
            raise InvalidSpec(f"dataset.kind must be 'synthetic' or 'attribute', got {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "synthetic": self.synthetic.to_dict(),
            "root": self.root, "target": self.target, "protected": self.protected,
            "target_positive": self.target_positive, "protected_positive": self.protected_positive,
            "composition": None if self.composition is None else self.composition.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        _reject_unknown(d, {f.name for f in fields(cls)}, "dataset")
        if "synthetic" in d:
            d["synthetic"] = SyntheticSpec.from_dict(d["synthetic"] or {})
        if d.get("composition") is not None:
            d["composition"] = CompositionSpec.from_dict(d["composition"])
        return cls(**d)


def _reject_unknown(d: dict, known: set, section: str) -> None:
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")


@dataclass
class ExperimentConfig:
    variant: str = "fdvae"
    name: str = ""
    ablation: Ablation = field(default_factory=Ablation)
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    schema_version: int = SCHEMA_VERSION

    # -- derived ----------------------------------------------------------

    @property
    def downstream_input(self) -> str:
        return self.ablation.downstream_input or DEFAULT_DOWNSTREAM[self.variant]

    @property
    def blocks(self) -> tuple:
        """Sizes of the (t, p, m) subspaces of the 60-dim code."""
        if self.variant == "ffvae_approx":
            return (30, 30, 0)  # (non-sensitive, sensitive)
        if self.variant == "fdvae" and not self.ablation.use_mal:
            return (30, 30, 0)
        return (20, 20, 20)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        lab = self.variant
        if self.variant == "fdvae":
            parts = [p for p, on in (("cls", self.ablation.use_cls), ("adv", self.ablation.use_adv),
                                     ("mal", self.ablation.use_mal)) if on]
            lab += "[" + "+".join(parts or ["tc"]) + "]"
        if self.downstream_input != DEFAULT_DOWNSTREAM[self.variant] or self.variant == "fdvae":
            lab += f"/{self.downstream_input}"
        if self.variant == "ffvae_approx":
            lab = lab.replace("ffvae_approx", "ffvae(approx)")
        return lab

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        cfg.schedule.seed = int(seed)
        return cfg

    # -- validation -------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} unsupported (expected {SCHEMA_VERSION})")
        if self.variant not in VARIANTS:
            raise InconsistentConfig(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        di = self.downstream_input
        if di not in DOWNSTREAM_INPUTS:
            raise InconsistentConfig(f"downstream_input must be one of {DOWNSTREAM_INPUTS}, got {di!r}")
        if di not in ALLOWED_DOWNSTREAM[self.variant]:
            raise InconsistentConfig(f"downstream_input {di!r} is not valid for variant {self.variant!r}")
        if self.variant == "fdvae":
            if not self.ablation.use_mal and di != "zt_only":
                raise InconsistentConfig(f"downstream_input {di!r} needs use_mal=true")
        elif self.variant in ("vae", "beta_vae", "factor_vae"):
            if self.ablation.use_cls or self.ablation.use_adv or self.ablation.use_mal:
                raise InconsistentConfig(
                    f"variant {self.variant!r} has no attribute heads: set use_cls/use_adv/use_mal to false"
                )
        elif self.variant == "ffvae_approx":
            if self.ablation.use_adv or self.ablation.use_mal:
                raise InconsistentConfig("ffvae_approx supports use_cls only (sensitive-block predictiveness)")
        self.schedule.validate()
        self.dataset.validate()
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        return self

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "variant": self.variant,
            "ablation": asdict(self.ablation),
            "weights": asdict(self.weights),
            "schedule": {**asdict(self.schedule), "betas": list(self.schedule.betas),
                         "disc_betas": None if self.schedule.disc_betas is None
                         else list(self.schedule.disc_betas)},
            "dataset": self.dataset.to_dict(),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict, validate: bool = True) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        d = copy.deepcopy(d)
        _reject_unknown(d, {f.name for f in fields(cls)}, "config")
        try:
            if "ablation" in d:
                _reject_unknown(d["ablation"], {f.name for f in fields(Ablation)}, "ablation")
                d["ablation"] = Ablation(**d["ablation"])
            if "weights" in d:
                _reject_unknown(d["weights"], {f.name for f in fields(LossWeights)}, "weights")
                d["weights"] = LossWeights(**d["weights"])
            if "schedule" in d:
                s = d["schedule"]
                _reject_unknown(s, {f.name for f in fields(TrainSchedule)}, "schedule")
                for k in ("betas", "disc_betas"):
                    if s.get(k) is not None:
                        s[k] = tuple(float(v) for v in s[k])
                d["schedule"] = TrainSchedule(**s)
            if "dataset" in d:
                d["dataset"] = DatasetConfig.from_dict(d["dataset"])
            cfg = cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cfg.validate() if validate else cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def load(cls, path, overrides=(), validate: bool = True) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        data = apply_overrides(data, overrides)
        return cls.from_dict(data, validate=validate)

    def config_hash(self) -> str:
        """Hash of the canonical form, ignoring the seed list and run seed."""
        d = self.to_dict()
        d.pop("seeds")
        d["schedule"].pop("seed")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars.

    Keys must exist in the full default schema, so typos fail loudly.
    """
    data = copy.deepcopy(data)
    schema = ExperimentConfig().to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        path = key.strip().split(".")
        node_schema = schema
        for part in path:
            if not isinstance(node_schema, dict) or part not in node_schema:
                raise ConfigError(f"unknown override key {key!r}")
            node_schema = node_schema[part]
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = data
        for i, part in enumerate(path[:-1]):
            if not isinstance(node.get(part), dict):
                sub = schema
                for p in path[:i + 1]:
                    sub = sub[p]
                node[part] = copy.deepcopy(sub) if isinstance(sub, dict) else {}
            node = node[part]
        node[path[-1]] = value
    return data


def component_ablation_configs(base: ExperimentConfig) -> list:
    """Configs mirroring the step-by-step component ablation.

    ffvae baseline, then +cls, +adv, +mal (z_t only), +mal (z_t + raw z_m),
    +mal (z_t + transformed z_m).
    """
    rows = []

    def make(variant, use_cls, use_adv, use_mal, di):
        cfg = copy.deepcopy(base)
        cfg.variant = variant
        cfg.name = ""
        cfg.ablation = Ablation(use_cls=use_cls, use_adv=use_adv, use_mal=use_mal, downstream_input=di)
        return cfg.validate()

    rows.append(make("ffvae_approx", True, False, False, "nonsensitive_only"))
    rows.append(make("fdvae", True, False, False, "zt_only"))
    rows.append(make("fdvae", True, True, False, "zt_only"))
    rows.append(make("fdvae", True, True, True, "zt_only"))
    rows.append(make("fdvae", True, True, True, "zt_plus_raw_zm"))
    rows.append(make("fdvae", True, True, True, "zt_plus_transformed_zm"))
    return rows


def baseline_config(variant: str, base: Optional[ExperimentConfig] = None, **ablation) -> ExperimentConfig:
    """``base`` re-targeted at ``variant`` with ablation flags suited to it."""
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    cfg.variant = variant
    cfg.name = ""
    if variant == "fdvae":
        cfg.ablation = Ablation(**{"use_cls": True, "use_adv": True, "use_mal": True, **ablation})
    elif variant == "ffvae_approx":
        cfg.ablation = Ablation(**{"use_cls": True, "use_adv": False, "use_mal": False, **ablation})
    else:
        cfg.ablation = Ablation(**{"use_cls": False, "use_adv": False, "use_mal": False, **ablation})
    if variant == "beta_vae" and cfg.weights.kl_beta <= 1.0:
        cfg.weights = LossWeights(cfg.weights.alpha, cfg.weights.beta, cfg.weights.gamma, 4.0)
    return cfg.validate()
