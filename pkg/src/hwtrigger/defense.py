"""Countermeasures against profile-triggered backdoors.

Each defense takes a corpus of backdoor results, changes one property of the
deployment (input noise, batch size, parameter precision, a few fine-tuning
steps) and reports which backdoors still split their predictions.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine
from .attack import BackdoorResult
from .data import Dataset
from .numerics import BackendProfile, get_profile

FORMATS = ("f16", "bf16")


@dataclass
class DefenseReport:
    kind: str
    sweep: list
    outcomes: dict  # sweep value -> per-backdoor outcome in [0, 1]
    backdoor_ids: list
    info: dict = field(default_factory=dict)

    def rate(self, value) -> float:
        out = self.outcomes[value]
        return float(np.mean(out)) if len(out) else 0.0

    @property
    def rates(self) -> list[float]:
        return [self.rate(v) for v in self.sweep]

    def rows(self) -> list[tuple]:
        return [(self.kind, v, bid, o) for v in self.sweep for bid, o in zip(self.backdoor_ids, self.outcomes[v])]

    def write_csv(self, path, provenance: dict | None = None):
        provenance = provenance or {}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["defense", "sweep_value", "backdoor_id", "outcome", *provenance])
            for kind, v, bid, o in self.rows():
                w.writerow([kind, v, bid, repr(float(o)), *provenance.values()])

    def summary(self) -> dict:
        return {
            "defense": self.kind,
            "corpus_size": len(self.backdoor_ids),
            "sweep": list(self.sweep),
            "remaining_success": self.rates,
            **self.info,
        }

    def write_json(self, path, provenance: dict | None = None):
        with open(path, "w") as fh:
            json.dump({**self.summary(), **(provenance or {})}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _ids(corpus, ids):
    return list(range(len(corpus))) if ids is None else list(ids)


def fires(result: BackdoorResult, model: engine.Model | None = None, targets=None,
          batch_size: int = 1, index1: int = 0, index2: int = 0) -> bool:
    """Whether the trigger condition of ``result`` holds for every target.

    Predictions use the argmax rule of :func:`engine.predict`.  ``index1`` and
    ``index2`` are the batch slots the target occupies on the two sides.
    """
    model = result.model if model is None else model
    targets = result.targets if targets is None else np.asarray(targets, np.float32)
    p1 = engine.predict(model, targets, get_profile(result.h1), batch_size, index1)
    if result.mode == "pairwise":
        p2 = engine.predict(model, targets, get_profile(result.h2[0]), batch_size, index2)
        return bool(np.all(p1 != p2))
    src = np.asarray(result.sources)
    ok = np.all(p1 != src)
    for h in result.h2:
        ok &= np.all(engine.predict(model, targets, get_profile(h), batch_size, index2) == src)
    return bool(ok)


def undefended(corpus: Sequence[BackdoorResult]) -> float:
    return float(np.mean([fires(r) for r in corpus])) if corpus else 0.0


# --------------------------------------------------------------------------
# input perturbation

_SIGN = np.int64(0x80000000)
_MAX_FINITE = np.int64(0x7F7FFFFF)


def to_ordered(x) -> np.ndarray:
    """Map float32 values to integers whose order and spacing follow the float grid."""
    bits = np.asarray(x, np.float32).view(np.uint32).astype(np.int64)
    return np.where(bits >= _SIGN, -(bits - _SIGN), bits)


def from_ordered(n) -> np.ndarray:
    n = np.clip(np.asarray(n, np.int64), -_MAX_FINITE, _MAX_FINITE)
    bits = np.where(n < 0, -n + _SIGN, n)
    return bits.astype(np.uint32).view(np.float32)


def ulp_perturb(x, d: int, rng) -> np.ndarray:
    """Move every element by an integer number of float32 steps in ``[-d, d]``.

    A uniform draw ``u`` in [-1, 1] is scaled by ``d``, so calls with the same
    generator state and different ``d`` give nested, proportional displacements.
    """
    if d < 0:
        raise ValueError("ULP magnitude must be non-negative")
    u = rng.uniform(-1.0, 1.0, size=np.shape(x))
    steps = np.rint(u * d).astype(np.int64)
    return from_ordered(to_ordered(x) + steps)


def defend_input_perturbation(corpus: Sequence[BackdoorResult], ds: Sequence[int], trials: int = 10,
                              seed: int = 0, ids=None) -> DefenseReport:
    ds = [int(d) for d in ds]
    outcomes = {}
    for d in ds:
        per = []
        for ci, r in enumerate(corpus):
            hits = 0
            for trial in range(trials):
                rng = np.random.default_rng([seed, ci, trial])
                hits += fires(r, targets=ulp_perturb(r.targets, d, rng))
            per.append(hits / trials)
        outcomes[d] = per
    return DefenseReport("input_perturbation", ds, outcomes, _ids(corpus, ids), {"trials": trials})


# --------------------------------------------------------------------------
# batch size


def batch_outcome(result: BackdoorResult, k: int) -> float:
    """Mean trigger outcome over all (slot on h1, slot on h2) pairs of a batch of ``k`` copies."""
    if k < 1:
        raise ValueError("batch size must be >= 1")
    hits = 0
    for i in range(k):
        for j in range(k):
            hits += fires(result, batch_size=k, index1=i, index2=j)
    return hits / (k * k)


def defend_batch_size(corpus: Sequence[BackdoorResult], ks: Sequence[int], ids=None) -> DefenseReport:
    ks = [int(k) for k in ks]
    outcomes = {k: [batch_outcome(r, k) for r in corpus] for k in ks}
    return DefenseReport("batch_size", ks, outcomes, _ids(corpus, ids))


# --------------------------------------------------------------------------
# downcasting


class DowncastOverflowError(OverflowError):
    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        super().__init__(f"{len(self.indices)} parameter(s) overflow the target format: {self.indices[:10]}")


def round_bf16(x) -> np.ndarray:
    """float32 -> bfloat16 (round to nearest even), returned as float32."""
    bits = np.asarray(x, np.float32).view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) & 0xFFFF0000).astype(np.uint32)
    return rounded.view(np.float32)


def round_f16(x) -> np.ndarray:
    """float32 -> IEEE binary16 (round to nearest even), returned as float32."""
    with np.errstate(over="ignore"):
        return np.asarray(x, np.float32).astype(np.float16).astype(np.float32)


def downcast(values, fmt: str) -> np.ndarray:
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    values = np.asarray(values, np.float32)
    out = round_f16(values) if fmt == "f16" else round_bf16(values)
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise DowncastOverflowError(bad)
    return out


def downcast_model(model: engine.Model, fmt: str) -> engine.Model:
    return model.with_theta(downcast(model.theta(), fmt))


def defend_downcast(corpus: Sequence[BackdoorResult], formats: Sequence[str] = FORMATS, ids=None) -> DefenseReport:
    outcomes = {}
    changed = {}
    for fmt in formats:
        per, n_changed = [], 0
        for r in corpus:
            m = downcast_model(r.model, fmt)
            n_changed += int(np.any(m.theta().view(np.uint32) != r.model.theta().view(np.uint32)))
            per.append(float(fires(r, model=m)))
        outcomes[fmt] = per
        changed[fmt] = n_changed
    return DefenseReport("downcast", list(formats), outcomes, _ids(corpus, ids), {"models_changed": changed})


# --------------------------------------------------------------------------
# fine-tuning


def finetune(model: engine.Model, dataset: Dataset, steps: int, lr: float = 1e-4, momentum: float = 0.9,
             batch: int = 64, rng=None) -> engine.Model:
    """``steps`` SGD-with-momentum steps on random clean training batches."""
    if steps == 0 or lr == 0:
        return model
    rng = np.random.default_rng(0) if rng is None else rng
    train = dataset.train
    theta = model.theta().astype(np.float64)
    velocity = np.zeros_like(theta)
    for step in range(steps):
        idx = rng.choice(len(train), size=min(batch, len(train)), replace=False)
        logits, tape = engine.forward64(model, train.inputs[idx], theta)
        loss, g = engine.softmax_cross_entropy(logits, train.labels[idx])
        grad = engine.backward(model, tape, g)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise FloatingPointError(f"fine-tuning diverged at step {step}")
        velocity = momentum * velocity + grad
        theta = theta - lr * velocity
    out = theta.astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("fine-tuning produced non-finite parameters")
    return model.with_theta(out)


def defend_finetune(corpus: Sequence[BackdoorResult], dataset: Dataset, steps: Sequence[int] = (1, 2, 3),
                    lr: float = 1e-4, momentum: float = 0.9, batch: int = 64, seed: int = 0,
                    ids=None) -> DefenseReport:
    """Each step count is run from the backdoored model with the same batch sequence."""
    steps = [int(n) for n in steps]
    outcomes = {}
    for n in steps:
        per = []
        for ci, r in enumerate(corpus):
            m = finetune(r.model, dataset, n, lr, momentum, batch, np.random.default_rng([seed, ci]))
            per.append(float(fires(r, model=m)))
        outcomes[n] = per
    return DefenseReport("finetune", steps, outcomes, _ids(corpus, ids),
                         {"lr": lr, "momentum": momentum, "batch": batch})
