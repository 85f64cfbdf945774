"""Experiment configuration: a TOML file mapped onto dataclasses.

Schema (every key optional)::

    seed = 0                  # master seed
    out = "runs/default"      # output directory

    [profiles.<name>]         # extra profiles, same fields as BackendProfile
    tree = "blocked"
    block_size = 8

    [data]        kind, num_classes, per_class, dims, spread, blob_gain, noise, pixel_scale, test_fraction
    [model]       arch, epochs, lr, momentum, batch, options = {...}
    [attack]      runs, num_targets, plus every AttackConfig field
    [defense]     ulps, trials, batch_sizes, formats, finetune_steps, finetune_lr, finetune_momentum, finetune_batch
    [demo]        n, fill, profiles
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import numerics as nx
from .attack import AttackConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = ""  # empty: follows the architecture
    num_classes: int = 4
    per_class: int = 200
    dims: list = field(default_factory=list)  # empty: 16 for blobs, [1, 8, 8] for images
    spread: float = 1.2
    blob_gain: float = 30.0
    noise: float = 0.3
    pixel_scale: float = 2.0 ** 14
    test_fraction: float = 0.25


@dataclass
class ModelConfig:
    arch: str = "mlp"
    epochs: int = 20
    lr: float = 0.0  # 0: architecture default
    momentum: float = 0.9
    batch: int = 32
    options: dict = field(default_factory=dict)


@dataclass
class AttackRunConfig:
    runs: int = 10
    num_targets: int = 1
    params: AttackConfig = field(default_factory=AttackConfig)


@dataclass
class DefenseConfig:
    ulps: list = field(default_factory=lambda: [0, 1, 10, 100, 1000, 10000, 100000])
    trials: int = 10
    batch_sizes: list = field(default_factory=lambda: [1, 2, 4, 8])
    formats: list = field(default_factory=lambda: ["f16", "bf16"])
    finetune_steps: list = field(default_factory=lambda: [0, 1, 2, 3])
    finetune_lr: float = 1e-4
    finetune_momentum: float = 0.9
    finetune_batch: int = 64


@dataclass
class DemoConfig:
    n: int = 100
    fill: float = 0.01
    profiles: list = field(default_factory=lambda: ["seq32", "pair32", "blk8fma", "blk16", "canonical64"])


ARCH_DEFAULTS = {
    "mlp": {"lr": 0.05, "kind": "blobs", "dims": [16], "options": {"gain_split": "first"}},
    "cnn": {"lr": 0.01, "kind": "images", "dims": [1, 8, 8],
            "options": {"pool": "flatten", "gain_split": "uniform", "inner": 32, "head": 32}},
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    profiles: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AttackRunConfig = field(default_factory=AttackRunConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    demo: DemoConfig = field(default_factory=DemoConfig)

    def __post_init__(self):
        self.resolve()

    def resolve(self):
        """Fill architecture-dependent defaults and check cross references."""
        arch = self.model.arch
        if arch not in ARCH_DEFAULTS:
            raise ConfigError(f"unknown architecture {arch!r}")
        d = ARCH_DEFAULTS[arch]
        if not self.data.kind:
            self.data.kind = d["kind"]
        if not self.data.dims:
            self.data.dims = list(d["dims"])
        if not self.model.lr:
            self.model.lr = d["lr"]
        self.model.options = {**d.get("options", {}), **self.model.options}
        for name, spec in self.profiles.items():
            try:
                prof = nx.BackendProfile.from_dict({"name": name, **spec})
            except (TypeError, ValueError, KeyError) as e:
                raise ConfigError(f"profile {name!r}: {e}") from e
            old = nx.PROFILES.get(name)
            if old is not None and not old.bit_identical_to(prof):
                raise ConfigError(f"profile {name!r} conflicts with an already registered profile")
            nx.register_profile(prof)
        names = [self.attack.params.h1, *self.attack.params.h2, *self.demo.profiles]
        for n in names:
            try:
                nx.get_profile(n)
            except KeyError as e:
                raise ConfigError(f"unknown profile {n!r}") from e
        if self.attack.runs < 0 or self.attack.num_targets < 1:
            raise ConfigError("attack.runs must be >= 0 and attack.num_targets >= 1")
        bad = [f for f in self.defense.formats if f not in ("f16", "bf16")]
        if bad:
            raise ConfigError(f"unknown downcast format(s) {bad}")
        return self

    @property
    def dims(self):
        return self.data.dims[0] if self.data.kind == "blobs" else tuple(self.data.dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"]["params"] = self.attack.params.to_dict()
        return d

    def hash(self) -> str:
        """Digest of everything that influences results (the output path excluded)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def derive_seed(self, *tags) -> int:
        """Deterministic sub-seed for a named sub-run."""
        text = ":".join(str(t) for t in (self.seed, *tags))
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}]: {e}") from e


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    sections = {}
    for key, cls in (("data", DataConfig), ("model", ModelConfig), ("defense", DefenseConfig),
                     ("demo", DemoConfig)):
        if key in raw:
            sections[key] = _build(cls, raw.pop(key), key)
    if "attack" in raw:
        a = dict(raw.pop("attack"))
        run_keys = {k: a.pop(k) for k in ("runs", "num_targets") if k in a}
        sections["attack"] = AttackRunConfig(**run_keys, params=_build(AttackConfig, a, "attack"))
    top = {k: raw.pop(k) for k in ("seed", "out", "profiles") if k in raw}
    if raw:
        raise ConfigError(f"unknown top-level key(s): {sorted(raw)}")
    try:
        return ExperimentConfig(**top, **sections)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return from_dict(raw)
