"""Seeded experiment plumbing shared by the CLI, scripts and tests."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import attack, data, engine
from .config import ExperimentConfig, ModelConfig


@dataclass
class Setup:
    cfg: ExperimentConfig
    dataset: data.Dataset
    model: engine.Model  # the clean, trained model
    test_accuracy: float


def make_config(arch: str = "mlp", seed: int = 0, **attack_kw) -> ExperimentConfig:
    cfg = ExperimentConfig(seed=seed, model=ModelConfig(arch=arch))
    if attack_kw:
        cfg.attack.params = replace(cfg.attack.params, **attack_kw)
    return cfg


def make_dataset(cfg: ExperimentConfig) -> data.Dataset:
    d = cfg.data
    return data.generate(cfg.derive_seed("data"), d.num_classes, cfg.dims, d.per_class, d.kind,
                         d.test_fraction, d.spread, d.blob_gain, d.noise, d.pixel_scale)


def make_model(cfg: ExperimentConfig, dataset: data.Dataset) -> engine.Model:
    return engine.build_model(cfg.model.arch, dataset.input_shape, dataset.num_classes,
                              seed=cfg.derive_seed("init"), input_gain=dataset.input_rms,
                              **cfg.model.options)


def train(cfg: ExperimentConfig, dataset: Optional[data.Dataset] = None) -> Setup:
    dataset = make_dataset(cfg) if dataset is None else dataset
    m = cfg.model
    res = data.train_baseline(make_model(cfg, dataset), dataset, m.epochs, m.lr, cfg.derive_seed("train"),
                              m.batch, m.momentum)
    return Setup(cfg, dataset, res.model, res.test_accuracy)


def attack_run(setup: Setup, run: int, num_targets: Optional[int] = None,
               params: Optional[attack.AttackConfig] = None) -> attack.BackdoorResult:
    """Run ``run`` of the campaign: seeded target draw, then the full attack."""
    cfg = setup.cfg
    params = cfg.attack.params if params is None else params
    k = cfg.attack.num_targets if num_targets is None else num_targets
    rng = np.random.default_rng(cfg.derive_seed("targets", k, run))
    idx, x, src = data.sample_targets(setup.model, setup.dataset, k, rng, params.h1)
    params = replace(params, seed=cfg.derive_seed("attack", run))
    res = attack.run_attack(setup.model, idx, x, src, params, setup.dataset)
    res.detail["run"] = run
    return res


def campaign(setup: Setup, runs: int, num_targets: Optional[int] = None, start: int = 0,
             **overrides) -> list[attack.BackdoorResult]:
    params = replace(setup.cfg.attack.params, **overrides)
    return [attack_run(setup, r, num_targets, params) for r in range(start, start + runs)]


def success_rate(results) -> float:
    return float(np.mean([r.success for r in results])) if results else 0.0
