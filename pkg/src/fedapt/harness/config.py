"""Flat experiment configuration: parse, validate, serialize, digest.

A config file is a flat YAML mapping of ``key: value``.  Unknown keys are
rejected, and every validation error names the offending field.  Budgets are
written in units of 1/255 (``train_eps: 1.0`` means eps = 1/255).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from ..adversary import AttackConfig
from ..dataset import SHIFT_KINDS, DomainShiftSpec, SyntheticSpec
from ..encoders import EncoderConfig
from ..federation import FedConfig
from ..promptgen import BEACON_SOURCES, FUSIONS, PromptConfig
from ..tensor import ConfigError

BASELINES = ("fedapt", "text_prompt_only")
ATTACKS = ("pgd", "cw")
# fields that select a run but not the experiment it belongs to
SEED_FIELDS = ("seed", "seeds")


class ConfigFieldError(ConfigError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ExperimentConfig:
    # synthetic universe
    C: int = 40
    image_size: int = 16
    channels: int = 3
    amplitude: float = 0.04
    noise_std: float = 0.03
    contrast_jitter: float = 0.3
    brightness_jitter: float = 0.05
    data_seed: int = 0
    train_per_class: int = 16
    shots: int = 8
    val_per_class: int = 1
    test_per_class: int = 5
    eval_shifts: list = field(default_factory=lambda: ["contrast:0.5"])
    # frozen backbone (desk scale; see README)
    d_text: int = 32
    d_vis: int = 48
    d_shared: int = 32
    layers_total: int = 6
    J: int = 4
    heads: int = 4
    m: int = 2
    patch_size: int = 4
    tau: float = 0.05
    token_len: int = 4
    vocab: int = 64
    pretrain_epochs: int = 4
    pretrain_per_class: int = 64
    pretrain_lr: float = 0.002
    pretrain_seed: int = 0
    # prompts and generator
    baseline: str = "fedapt"
    use_beacon: bool = True
    independent_generators: bool = False
    fusion: str = "pair_mean"
    beacon_source: str = "class_tail"
    gen_heads: int = 4
    # federation
    classes_per_client: int = 10
    participants: int | None = None
    rounds: int = 30
    local_epochs: int = 1
    batch_size: int = 16
    base_lr: float = 0.0035
    momentum: float = 0.9
    warmup_rounds: int = 1
    beta: float = 0.9
    weighted_average: bool = False
    # attacks
    train_eps: float = 1.0
    train_steps: int = 3
    eval_eps: float = 1.0
    eval_steps: int = 100
    cw_steps: int = 50
    val_steps: int = 5
    val_every: int = 1
    eval_attacks: list = field(default_factory=lambda: ["pgd"])
    # seeds
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            want = _FIELD_TYPES[f.name]
            if want is bool:
                ok = isinstance(v, bool)
            elif want is int:
                ok = isinstance(v, int) and not isinstance(v, bool)
            elif want is float:
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
                if ok:
                    object.__setattr__(self, f.name, float(v))
            elif want == "int?":
                ok = v is None or (isinstance(v, int) and not isinstance(v, bool))
            elif want is str:
                ok = isinstance(v, str)
            else:
                ok = isinstance(v, list)
            if not ok:
                raise ConfigFieldError(f"config.{f.name}", f"expected {_type_name(want)}, got {v!r}")
        positive = ("C", "image_size", "channels", "train_per_class", "shots", "val_per_class",
                    "test_per_class", "pretrain_epochs", "pretrain_per_class", "classes_per_client",
                    "local_epochs", "batch_size", "gen_heads", "rounds")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigFieldError(f"config.{name}", "must be >= 1")
        for name in ("warmup_rounds", "train_steps", "eval_steps", "cw_steps",
                     "val_steps", "val_every"):
            if getattr(self, name) < 0:
                raise ConfigFieldError(f"config.{name}", "must be >= 0")
        for name in ("train_eps", "eval_eps", "base_lr", "noise_std", "amplitude"):
            if getattr(self, name) < 0:
                raise ConfigFieldError(f"config.{name}", "must be >= 0")
        if self.shots > self.train_per_class:
            raise ConfigFieldError("config.shots", f"{self.shots} exceeds train_per_class={self.train_per_class}")
        if self.C % self.classes_per_client:
            raise ConfigFieldError("config.classes_per_client",
                                   f"C={self.C} is not a multiple of {self.classes_per_client}")
        if self.participants is not None and not 1 <= self.participants <= self.n_clients:
            raise ConfigFieldError("config.participants", f"must lie in [1, {self.n_clients}]")
        if self.baseline not in BASELINES:
            raise ConfigFieldError("config.baseline", f"must be one of {BASELINES}")
        if self.fusion not in FUSIONS:
            raise ConfigFieldError("config.fusion", f"must be one of {FUSIONS}")
        if self.beacon_source not in BEACON_SOURCES:
            raise ConfigFieldError("config.beacon_source", f"must be one of {BEACON_SOURCES}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigFieldError("config.beta", "must lie in [0, 1]")
        for i, a in enumerate(self.eval_attacks):
            if a not in ATTACKS:
                raise ConfigFieldError(f"config.eval_attacks[{i}]", f"must be one of {ATTACKS}")
        for i, s in enumerate(self.eval_shifts):
            try:
                parse_shift(s)
            except ConfigError as exc:
                raise ConfigFieldError(f"config.eval_shifts[{i}]", str(exc)) from None
        for i, s in enumerate(self.seeds):
            if not isinstance(s, int) or isinstance(s, bool):
                raise ConfigFieldError(f"config.seeds[{i}]", f"expected int, got {s!r}")
        # sub-configs enforce their own invariants; report them against this file
        for name, build in (("encoder", self.encoder_config), ("prompts", self.prompt_config),
                            ("federation", self.fed_config)):
            try:
                build()
            except ConfigError as exc:
                raise ConfigFieldError(f"config ({name})", str(exc)) from None

    # -- derived configs ----------------------------------------------------

    @property
    def n_clients(self) -> int:
        return self.C // self.classes_per_client

    def synthetic_spec(self, shift: DomainShiftSpec | None = None) -> SyntheticSpec:
        return SyntheticSpec(C=self.C, image_size=self.image_size, channels=self.channels,
                             amplitude=self.amplitude, noise_std=self.noise_std,
                             contrast_jitter=self.contrast_jitter,
                             brightness_jitter=self.brightness_jitter, seed=self.data_seed, shift=shift)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d_text=self.d_text, d_vis=self.d_vis, d_shared=self.d_shared,
                             layers_total=self.layers_total, J=self.J, heads=self.heads, m=self.m,
                             patch_size=self.patch_size, image_size=self.image_size,
                             channels=self.channels, tau=self.tau, token_len=self.token_len,
                             vocab=self.vocab)

    def prompt_config(self) -> PromptConfig:
        return PromptConfig(visual_prompts=self.baseline == "fedapt", use_beacon=self.use_beacon,
                            independent_generators=self.independent_generators, fusion=self.fusion,
                            beacon_source=self.beacon_source, gen_heads=self.gen_heads)

    def fed_config(self) -> FedConfig:
        return FedConfig(rounds=self.rounds, local_epochs=self.local_epochs, batch_size=self.batch_size,
                         base_lr=self.base_lr, momentum=self.momentum, warmup_rounds=self.warmup_rounds,
                         beta=self.beta, participants=self.participants,
                         weighted_average=self.weighted_average,
                         train_attack=AttackConfig.training(eps=self.train_eps / 255, steps=self.train_steps),
                         val_attack=AttackConfig.pgd_eval(eps=self.eval_eps / 255, steps=self.val_steps),
                         val_every=self.val_every)

    def eval_attack(self, kind: str, eps: float | None = None, steps: int | None = None) -> AttackConfig:
        """``eps`` in units of 1/255."""
        eps = (self.eval_eps if eps is None else eps) / 255
        if kind == "pgd":
            return AttackConfig.pgd_eval(eps=eps, steps=self.eval_steps if steps is None else steps)
        if kind == "cw":
            return AttackConfig.cw_eval(eps=eps, steps=self.cw_steps if steps is None else steps)
        raise ConfigError(f"unknown attack {kind!r}; expected one of {ATTACKS}")

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def pretrain_dict(self) -> dict:
        keys = ("C", "image_size", "channels", "amplitude", "noise_std", "contrast_jitter",
                "brightness_jitter", "data_seed", "pretrain_epochs", "pretrain_per_class",
                "pretrain_lr", "pretrain_seed")
        return {"data": {k: getattr(self, k) for k in keys}, "encoder": self.encoder_config().to_dict()}

    def digest(self) -> str:
        """Identity of the experiment, independent of which seed is run."""
        body = {k: v for k, v in self.to_dict().items() if k not in SEED_FIELDS}
        return _hash(body)

    def pretrain_digest(self) -> str:
        return _hash(self.pretrain_dict())

    def replace(self, **changes) -> "ExperimentConfig":
        return from_dict({**self.to_dict(), **changes})

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path


_FIELD_TYPES = {
    f.name: {"int": int, "float": float, "bool": bool, "str": str, "list": list,
             "int | None": "int?"}[f.type]
    for f in fields(ExperimentConfig)
}


def _type_name(t) -> str:
    return {"int?": "int or null"}.get(t, getattr(t, "__name__", str(t)))


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def parse_shift(text: str) -> DomainShiftSpec:
    """``"kind:magnitude"`` -> DomainShiftSpec."""
    if not isinstance(text, str) or ":" not in text:
        raise ConfigError(f"shift must look like 'kind:magnitude', got {text!r}")
    kind, mag = text.split(":", 1)
    if kind not in SHIFT_KINDS:
        raise ConfigError(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")
    try:
        magnitude = float(mag)
    except ValueError:
        raise ConfigError(f"shift magnitude {mag!r} is not a number") from None
    return DomainShiftSpec(kind, magnitude)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigFieldError("config", "top level must be a key/value mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigFieldError(f"config.{unknown[0]}", "unknown key")
    return ExperimentConfig(**data)


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigFieldError("config", f"not valid YAML: {exc}") from None
    return from_dict(data or {})


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return loads(path.read_text())
