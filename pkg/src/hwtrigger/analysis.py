"""Cross-profile activation patching.

A patch point ``i`` runs layers ``0..i-1`` under one profile, hands the
activation over unchanged and finishes under the other profile.  For a
backdoored input whose prediction splits between the two profiles, the logit
difference of the two conflicting classes along ``i`` shows which layers
carry the flip.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import engine
from .numerics import get_profile


class NoSplitDecision(ValueError):
    """The two profiles agree on the prediction, so there is nothing to localize."""


def patched_forward(model: engine.Model, x, h1, h2, i: int) -> np.ndarray:
    """Logits with layers ``0..i-1`` under ``h1`` and ``i..L-1`` under ``h2``."""
    n = model.num_layers
    if not 0 <= i <= n:
        raise IndexError(f"patch point {i} outside 0..{n}")
    h1, h2 = get_profile(h1), get_profile(h2)
    x = np.asarray(x, np.float32)
    single = x.ndim == len(model.input_shape)
    h = x[None] if single else x
    h = engine.forward(model, h, h1, stop=i) if i > 0 else h
    if i < n:
        h = engine.forward(model, h, h2, start=i)
    return h[0] if single else h


def split_classes(model: engine.Model, x, h1, h2) -> tuple[int, int]:
    a = int(engine.predict(model, x, get_profile(h1)))
    b = int(engine.predict(model, x, get_profile(h2)))
    if a == b:
        raise NoSplitDecision(f"no split decision: both profiles predict class {a}")
    return a, b


def delta(model: engine.Model, x, h1, h2, i: int) -> float:
    """``logit_a - logit_b`` at patch point ``i``, where a/b are the h1/h2 predictions."""
    a, b = split_classes(model, x, h1, h2)
    y = patched_forward(model, x, h1, h2, i)
    return float(np.float32(y[a]) - np.float32(y[b]))


@dataclass
class PatchTrace:
    model_id: str
    h1: str
    h2: str
    target_id: int
    a: int
    b: int
    deltas: np.ndarray  # length L + 1, float64 copies of float32 differences

    @property
    def pair(self) -> str:
        return f"{self.h1}->{self.h2}"

    @property
    def normalized(self) -> np.ndarray:
        """Deltas scaled by their largest magnitude into [-1, 1]."""
        m = np.max(np.abs(self.deltas))
        return self.deltas / m if m > 0 else np.zeros_like(self.deltas)

    @property
    def first_differences(self) -> np.ndarray:
        return np.diff(self.deltas)

    def sign_changes(self) -> int:
        s = np.sign(self.deltas)
        s = s[s != 0]
        return int(np.sum(s[1:] != s[:-1]))


def trace(model: engine.Model, x, h1, h2, model_id: str = "", target_id: int = 0) -> PatchTrace:
    a, b = split_classes(model, x, h1, h2)
    ys = [patched_forward(model, x, h1, h2, i) for i in range(model.num_layers + 1)]
    deltas = np.array([float(np.float32(y[a]) - np.float32(y[b])) for y in ys])
    return PatchTrace(model_id, get_profile(h1).name, get_profile(h2).name, int(target_id), a, b, deltas)


def _check(traces: Sequence[PatchTrace], i: int):
    if not traces:
        raise ValueError("aggregate over an empty trace set")
    if i < 1:
        raise ValueError("aggregation starts at patch point 1")
    lengths = {len(t.deltas) for t in traces}
    pairs = {(t.h1, t.h2) for t in traces}
    if len(lengths) != 1 or len(pairs) != 1:
        raise ValueError("traces must share architecture and profile pair")
    if i >= lengths.pop():
        raise IndexError(f"patch point {i} out of range")


def aggregate_delta(traces: Sequence[PatchTrace], i: int, normalized: bool = False) -> float:
    """Sum over traces of ``|delta_i - delta_{i-1}|``."""
    traces = list(traces)
    _check(traces, i)
    total = 0.0
    for t in traces:
        d = t.normalized if normalized else t.deltas
        total += abs(d[i] - d[i - 1])
    return float(total)


def aggregate_profile(traces: Sequence[PatchTrace], normalized: bool = False) -> np.ndarray:
    """Aggregated contribution for every layer, i = 1..L."""
    traces = list(traces)
    if not traces:
        raise ValueError("aggregate over an empty trace set")
    n = len(traces[0].deltas)
    return np.array([aggregate_delta(traces, i, normalized) for i in range(1, n)])


TRACE_COLUMNS = ("model_id", "pair", "target_id", "i", "delta", "delta_normalized")


def write_traces_csv(traces: Iterable[PatchTrace], path, provenance: dict | None = None):
    """One row per (trace, patch point); ``provenance`` columns are appended to every row."""
    provenance = provenance or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(TRACE_COLUMNS) + list(provenance))
        for t in traces:
            for i, (d, dn) in enumerate(zip(t.deltas, t.normalized)):
                w.writerow([t.model_id, t.pair, t.target_id, i, repr(float(d)), repr(float(dn))]
                           + list(provenance.values()))
