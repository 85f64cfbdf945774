"""Hardware-triggered backdoor construction.

Two alternating steps:

1. *Boundary shaping*: gradient descent on a proxy loss that pulls the top
   two logits of every target together while keeping the source class on top
   and the parameters close to the clean model.
2. *Deviation refinement*: a batch of candidate models is drawn, either by
   permuting the inner dimension of a factored linear layer (same product in
   exact arithmetic, different summation order) or by flipping a few low
   mantissa bits.  The first candidate whose predictions split across the
   chosen profiles, and which keeps enough clean accuracy, is the backdoor.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import engine
from .data import Dataset, accuracy
from .numerics import BackendProfile, get_profile

MANTISSA_BITS = 16  # flips are drawn from mantissa bits 0..15

MODES = ("pairwise", "one-vs-rest")
VARIANTS = ("base", "perm", "flip", "full")


# --------------------------------------------------------------------------
# loss terms


def loss_diff(y) -> float:
    """Gap between the largest and second-largest logit."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] < 2:
        raise ValueError("loss_diff needs at least two logits")
    top2 = np.sort(y, axis=-1)[..., -2:]
    return top2[..., 1] - top2[..., 0]


def loss_class(y, t) -> float:
    """How far the best other class is above the source class (0 if ``t`` is on top)."""
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t)
    if y.shape[-1] < 2:
        raise ValueError("loss_class needs at least two logits")
    yt = np.take_along_axis(y, t[..., None], axis=-1)[..., 0]
    others = y.copy()
    np.put_along_axis(others, t[..., None], -np.inf, axis=-1)
    return np.maximum(others.max(axis=-1) - yt, 0.0)


def loss_reg(theta, theta_bar) -> float:
    d = np.asarray(theta, np.float64) - np.asarray(theta_bar, np.float64)
    return float(d @ d)


def proxy_loss(theta, theta_bar, y, t, alpha, beta, gamma) -> float:
    """alpha * L_diff + beta * L_class + gamma * L_reg, summed over targets."""
    y = np.atleast_2d(np.asarray(y, np.float64))
    t = np.atleast_1d(t)
    data = alpha * np.sum(loss_diff(y)) + beta * np.sum(loss_class(y, t))
    return float(data + gamma * loss_reg(theta, theta_bar))


def proxy_grad_logits(y, t, alpha, beta) -> np.ndarray:
    """A subgradient of the data terms of :func:`proxy_loss` w.r.t. the logits.

    Arg-max selections use the lowest index on ties, matching ``predict``.
    """
    y = np.atleast_2d(np.asarray(y, np.float64))
    t = np.atleast_1d(t)
    n, c = y.shape
    g = np.zeros_like(y)
    rows = np.arange(n)
    first = np.argmax(y, axis=1)
    rest = y.copy()
    rest[rows, first] = -np.inf
    second = np.argmax(rest, axis=1)
    g[rows, first] += alpha
    g[rows, second] -= alpha
    others = y.copy()
    others[rows, t] = -np.inf
    best_other = np.argmax(others, axis=1)
    active = others[rows, best_other] - y[rows, t] > 0
    g[rows[active], best_other[active]] += beta
    g[rows[active], t[active]] -= beta
    return g


# --------------------------------------------------------------------------
# configuration and results


@dataclass
class AttackConfig:
    beta: float = 0.1
    gamma: float = 10000.0
    steps_per_iter: int = 500
    k_bits: int = 5
    m_perm: int = 128
    m_flip: int = 128
    rho: float = 0.95
    max_iters: int = 6
    layer_mask: Optional[tuple] = None
    lr: float = 2.5e-5
    lr_final_ratio: float = 1e-8
    alpha_init: float = 1.0
    alpha_min: float = 2.0 ** -6
    alpha_max: float = 2.0 ** 6
    tau_high: float = 1e-5
    tau_low: float = 1e-9
    seed: int = 0
    h1: str = "blk8fma"
    h2: tuple = ("blk4",)
    mode: str = "pairwise"
    variant: str = "full"

    def __post_init__(self):
        if isinstance(self.h2, str):
            self.h2 = (self.h2,)
        self.h2 = tuple(self.h2)
        if self.layer_mask is not None:
            self.layer_mask = tuple(sorted(int(i) for i in self.layer_mask))
        self.validate()

    @property
    def m_candidates(self) -> int:
        return self.m_perm + self.m_flip

    def validate(self):
        if not 0 < self.rho <= 1:
            raise ValueError("rho must be in (0, 1]")
        if self.k_bits < 1:
            raise ValueError("k_bits must be >= 1")
        if self.m_perm < 0 or self.m_flip < 0:
            raise ValueError("candidate counts must be non-negative")
        if self.max_iters < 0 or self.steps_per_iter < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not self.h2:
            raise ValueError("at least one non-target profile is required")
        if self.mode == "pairwise" and len(self.h2) != 1:
            raise ValueError("pairwise mode takes exactly one non-target profile")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["h2"] = list(self.h2)
        d["layer_mask"] = None if self.layer_mask is None else list(self.layer_mask)
        return d


@dataclass
class FlipRecord:
    """Flipped (flat parameter index, bit index) pairs."""

    positions: list

    def to_list(self):
        return [[int(i), int(b)] for i, b in self.positions]


@dataclass
class BackdoorResult:
    model: engine.Model
    target_indices: list
    targets: np.ndarray
    sources: list
    predictions: dict  # profile name -> list of predicted classes per target
    success: bool
    target_success: list  # per target
    accuracy: float
    baseline_accuracy: float
    iterations: int
    mechanism: str  # "perm", "flip", "none" (shaped model alone) or "" on failure
    h1: str
    h2: tuple
    mode: str
    detail: dict = field(default_factory=dict)

    @property
    def retained(self) -> float:
        return self.accuracy / self.baseline_accuracy if self.baseline_accuracy else 0.0

    def summary(self) -> dict:
        return {
            "success": bool(self.success),
            "target_success_rate": float(np.mean(self.target_success)) if self.target_success else 0.0,
            "targets": [int(i) for i in self.target_indices],
            "sources": [int(s) for s in self.sources],
            "predictions": {k: [int(v) for v in vs] for k, vs in self.predictions.items()},
            "accuracy": self.accuracy,
            "baseline_accuracy": self.baseline_accuracy,
            "retained": self.retained,
            "iterations": self.iterations,
            "mechanism": self.mechanism,
            "h1": self.h1,
            "h2": list(self.h2),
            "mode": self.mode,
            "model_fingerprint": self.model.fingerprint(),
            **self.detail,
        }


# --------------------------------------------------------------------------
# step 1


def proxy_objective(model: engine.Model, theta, theta_bar, targets, sources, alpha: float, beta: float,
                    gamma: float, select_logits=None) -> tuple[float, np.ndarray]:
    """Summed proxy loss over the targets and its gradient in ``theta`` (float64).

    Everything runs on the canonical float64 path.  ``select_logits``, when
    given, replaces the float64 logits for picking the top-2 and source terms
    (both in the reported loss and in the gradient).
    """
    theta = np.asarray(theta, np.float64)
    y64, tape = engine.forward64(model, targets, theta)
    y = y64 if select_logits is None else np.atleast_2d(select_logits)
    g_logits = proxy_grad_logits(y, sources, alpha, beta)
    loss = proxy_loss(theta, theta_bar, y, sources, alpha, beta, gamma)
    grad = engine.backward(model, tape, g_logits) + 2.0 * gamma * (theta - theta_bar)
    return loss, grad


def _alpha_update(alpha: float, gap: float, cfg: AttackConfig) -> float:
    if gap > cfg.tau_high:
        alpha *= 2.0
    elif gap < cfg.tau_low:
        alpha /= 2.0
    return float(min(max(alpha, cfg.alpha_min), cfg.alpha_max))


def shape_boundary(model: engine.Model, theta_bar, targets, sources, cfg: AttackConfig,
                   h1: BackendProfile | str, alpha: float = 1.0) -> engine.Model:
    """Gradient descent on the summed proxy loss of all targets.

    Logits (and hence the selected top-2 / source terms) come from a forward
    pass under ``h1``; gradients from the canonical float64 path.  A float64
    master copy of the parameters is kept during the descent; the step size
    decays geometrically from ``lr`` to ``lr * lr_final_ratio`` so the iterate
    settles onto the tie instead of oscillating across it.
    """
    targets = np.asarray(targets, np.float32)
    if len(targets) == 0 or cfg.steps_per_iter == 0:
        return model
    h1 = get_profile(h1)
    sources = np.asarray(sources)
    bar64 = np.asarray(theta_bar, np.float64)
    theta = model.theta().astype(np.float64)
    mask = model.layer_mask(cfg.layer_mask)
    steps = cfg.steps_per_iter
    decay = cfg.lr_final_ratio ** (1.0 / max(steps - 1, 1))
    lr = cfg.lr
    for _ in range(steps):
        y = engine.forward(model.with_theta(theta.astype(np.float32)), targets, h1)
        _, grad = proxy_objective(model, theta, bar64, targets, sources, alpha, cfg.beta, cfg.gamma, y)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient during boundary shaping")
        theta = np.where(mask, theta - lr * grad, theta)
        lr *= decay
    out = theta.astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite parameters after boundary shaping")
    return model.with_theta(out)


# --------------------------------------------------------------------------
# step 2: candidates


def factored_layers(model: engine.Model, layer_mask=None) -> list[int]:
    return [i for i, layer in enumerate(model.layers)
            if isinstance(layer, engine.FactoredLinear) and (layer_mask is None or i in layer_mask)]


def permute_candidate(model: engine.Model, layer: int, perm) -> engine.Model:
    """Permute the inner dimension of a factored layer: w1 -> w1 P, w2 -> P^-1 w2."""
    target = model.layers[layer]
    if not isinstance(target, engine.FactoredLinear):
        raise TypeError(f"layer {layer} is {target.kind}, not a factored linear layer")
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(target.inner)):
        raise ValueError("perm must be a permutation of the inner dimension")
    return model.with_layer(layer, engine.FactoredLinear(target.w1[:, perm], target.w2[perm, :]))


def random_permutation(model: engine.Model, rng, layer_mask=None) -> tuple[engine.Model, dict]:
    layers = factored_layers(model, layer_mask)
    if not layers:
        raise ValueError("no factored linear layer available for permutation")
    li = int(layers[rng.integers(len(layers))])
    b = model.layers[li].inner
    perm = rng.permutation(b)
    while b > 1 and np.all(perm == np.arange(b)):
        perm = rng.permutation(b)
    return permute_candidate(model, li, perm), {"layer": li, "perm": perm.tolist()}


def apply_flips(model: engine.Model, record: FlipRecord) -> engine.Model:
    bits = model.theta().view(np.uint32).copy()
    for idx, bit in record.positions:
        bits[idx] ^= np.uint32(1 << int(bit))
    return model.with_theta(bits.view(np.float32))


def bitflip_candidate(model: engine.Model, k: int, rng, layer_mask=None,
                      max_tries: int = 100) -> tuple[engine.Model, FlipRecord]:
    """Flip ``k`` distinct low mantissa bits of the (masked) parameters."""
    if k < 1:
        raise ValueError("k must be >= 1")
    allowed = np.flatnonzero(model.layer_mask(layer_mask))
    if allowed.size == 0:
        raise ValueError("layer mask selects no parameters")
    slots = allowed.size * MANTISSA_BITS
    if k > slots:
        raise ValueError(f"cannot flip {k} distinct bits among {slots}")
    for _ in range(max_tries):
        picks = rng.choice(slots, size=k, replace=False)
        record = FlipRecord([(int(allowed[p // MANTISSA_BITS]), int(p % MANTISSA_BITS)) for p in picks])
        cand = apply_flips(model, record)
        if np.all(np.isfinite(cand.theta())):
            return cand, record
    raise RuntimeError("could not draw a finite bit-flip candidate")


# --------------------------------------------------------------------------
# trigger predicates


def _strict_top(logits) -> tuple[np.ndarray, np.ndarray]:
    """(arg-max, whether the maximum is unique) per row."""
    logits = np.atleast_2d(logits)
    top = np.argmax(logits, axis=1)
    n_max = np.sum(logits == logits[np.arange(len(top)), top][:, None], axis=1)
    return top, n_max == 1


def trigger_outcomes(model: engine.Model, targets, sources, h1, h2s, mode: str,
                     prefix=None, start: int = 0):
    """Per-target trigger outcome plus the per-profile predictions.

    Pairwise: strict predictions on ``h1`` and ``h2`` differ.  One-vs-rest:
    ``h1`` strictly predicts something other than the source class while every
    non-target profile strictly predicts the source class.  Exact top ties
    never count: such a split is decided by the tie-break rule, not the device.

    ``prefix(profile, start)`` may supply the activation entering layer
    ``start`` when the layers before it are known to be unchanged.
    """
    sources = np.asarray(sources)

    def logits(h):
        if prefix is None or start == 0:
            return engine.forward(model, targets, h)
        return engine.forward(model, prefix(h, start), h, start=start)

    top1, strict1 = _strict_top(logits(h1))
    preds = {get_profile(h1).name: top1}
    ok = strict1.copy()
    if mode == "pairwise":
        (h2,) = h2s
        top2, strict2 = _strict_top(logits(h2))
        preds[get_profile(h2).name] = top2
        ok &= strict2 & (top1 != top2)
    else:
        ok &= top1 != sources
        for h in h2s:
            top, strict = _strict_top(logits(h))
            preds[get_profile(h).name] = top
            ok &= strict & (top == sources)
    return ok, preds


_ACC_CHUNK = 32


class _PrefixCache:
    """Activations of a fixed model per profile, computed on first use."""

    def __init__(self, model: engine.Model, targets):
        self.model = model
        self.targets = np.asarray(targets, np.float32)
        self._acts: dict[str, list] = {}

    def __call__(self, profile, layer: int) -> np.ndarray:
        p = get_profile(profile)
        acts = self._acts.get(p.name)
        if acts is None:
            acts = [self.targets]
            for i in range(self.model.num_layers - 1):
                acts.append(engine.forward(self.model, acts[-1], p, start=i, stop=i + 1))
            self._acts[p.name] = acts
        return acts[layer]


@dataclass
class Candidate:
    model: engine.Model
    mechanism: str
    index: int
    info: dict
    start: int = 0  # first layer whose parameters differ from the source model


def candidate_rng(seed: int, iteration: int, index: int):
    return np.random.default_rng([int(seed), int(iteration), int(index)])


def iter_candidates(model: engine.Model, cfg: AttackConfig, iteration: int):
    """Deterministic candidate stream: all permutations first, then all flips."""
    if cfg.variant in ("perm", "full") and factored_layers(model, cfg.layer_mask):
        for j in range(cfg.m_perm):
            cand, info = random_permutation(model, candidate_rng(cfg.seed, iteration, j), cfg.layer_mask)
            yield Candidate(cand, "perm", j, info, info["layer"])
    if cfg.variant in ("flip", "full"):
        owner = np.empty(model.num_params, np.int64)
        for li, _, sl in model.param_slices():
            owner[sl] = li
        for j in range(cfg.m_flip):
            idx = cfg.m_perm + j
            cand, record = bitflip_candidate(model, cfg.k_bits, candidate_rng(cfg.seed, iteration, idx),
                                             cfg.layer_mask)
            first = min(owner[i] for i, _ in record.positions)
            yield Candidate(cand, "flip", idx, {"flips": record.to_list()}, first)


def refine(model: engine.Model, targets, sources, cfg: AttackConfig, dataset: Dataset,
           baseline_accuracy: float, iteration: int = 0) -> Optional[Candidate]:
    """First qualifying candidate in deterministic order, or None.

    The shaped model itself is checked first (index -1, mechanism "none").
    A candidate qualifies if the trigger fires for every target and its test
    accuracy under ``h1`` is at least ``rho * baseline_accuracy``.
    """
    h1 = get_profile(cfg.h1)
    h2s = [get_profile(h) for h in cfg.h2]
    floor = cfg.rho * baseline_accuracy

    prefix = _PrefixCache(model, targets)
    test = _PrefixCache(model, dataset.test.inputs)
    labels = dataset.test.labels
    n_test = len(labels)
    # Candidates barely move the logits, so points the shaped model gets wrong
    # (then the narrowest margins) are the likeliest errors: check them first.
    y = test(h1, model.num_layers - 1)
    y = engine.forward(model, y, h1, start=model.num_layers - 1)
    top2 = np.sort(y, axis=1)[:, -2:]
    order = np.lexsort((top2[:, 1] - top2[:, 0], np.argmax(y, axis=1) == labels))

    def accurate_enough(m, start):
        # exact verdict of accuracy(m, test, h1) >= floor, stopping once it cannot hold
        errors = 0
        for lo in range(0, n_test, _ACC_CHUNK):
            idx = order[lo:lo + _ACC_CHUNK]
            logits = engine.forward(m, test(h1, start)[idx], h1, start=start)
            errors += int(np.sum(np.argmax(logits, axis=-1) != labels[idx]))
            if (n_test - errors) / n_test < floor:
                return False
        return True

    def qualifies(m, start=0):
        ok, _ = trigger_outcomes(m, targets, sources, h1, h2s, cfg.mode, prefix, start)
        return bool(np.all(ok)) and accurate_enough(m, start)

    if qualifies(model):
        return Candidate(model, "none", -1, {})
    for cand in iter_candidates(model, cfg, iteration):
        if qualifies(cand.model, cand.start):
            return cand
    return None


def run_attack(model: engine.Model, target_indices, targets, sources, cfg: AttackConfig,
               dataset: Dataset) -> BackdoorResult:
    """Alternate boundary shaping and refinement for up to ``max_iters`` rounds."""
    targets = np.asarray(targets, np.float32)
    if targets.ndim == len(model.input_shape):
        targets = targets[None]
    sources = np.atleast_1d(np.asarray(sources))
    if len(targets) < 1:
        raise ValueError("at least one target is required")
    h1 = get_profile(cfg.h1)
    h2s = [get_profile(h) for h in cfg.h2]
    theta_bar = model.theta()
    baseline = accuracy(model, dataset.test, h1)
    alpha = cfg.alpha_init
    current = model
    found: Optional[Candidate] = None
    alphas, gaps = [], []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        current = shape_boundary(current, theta_bar, targets, sources, cfg, h1, alpha)
        gap = float(np.mean(loss_diff(engine.forward(current, targets, h1))))
        alphas.append(alpha)
        gaps.append(gap)
        found = refine(current, targets, sources, cfg, dataset, baseline, it)
        if found is not None:
            break
        alpha = _alpha_update(alpha, gap, cfg)
    final = found.model if found is not None else current
    ok, preds = trigger_outcomes(final, targets, sources, h1, h2s, cfg.mode)
    acc = accuracy(final, dataset.test, h1)
    success = found is not None
    detail = {"alphas": alphas, "gaps": gaps}
    if found is not None:
        detail["candidate_index"] = found.index
        detail.update(found.info)
    return BackdoorResult(
        model=final,
        target_indices=[int(i) for i in np.atleast_1d(target_indices)],
        targets=targets,
        sources=[int(s) for s in sources],
        predictions={k: [int(v) for v in vs] for k, vs in preds.items()},
        success=success,
        target_success=[bool(v) for v in ok],
        accuracy=acc,
        baseline_accuracy=baseline,
        iterations=it if cfg.max_iters else 0,
        mechanism=found.mechanism if found is not None else "",
        h1=h1.name,
        h2=tuple(h.name for h in h2s),
        mode=cfg.mode,
        detail=detail,
    )


def verify(result: BackdoorResult, dataset: Dataset, rho: float) -> bool:
    """Independent re-check of a successful result: split predictions and retained accuracy."""
    h1 = get_profile(result.h1)
    preds1 = engine.predict(result.model, result.targets, h1)
    if result.mode == "pairwise":
        preds2 = engine.predict(result.model, result.targets, get_profile(result.h2[0]))
        split = np.all(preds1 != preds2)
    else:
        split = np.all(preds1 != np.asarray(result.sources))
        for h in result.h2:
            split &= np.all(engine.predict(result.model, result.targets, get_profile(h)) == result.sources)
    acc = accuracy(result.model, dataset.test, h1)
    return bool(split) and acc >= rho * result.baseline_accuracy


def sources_for(model: engine.Model, targets: Sequence, profile) -> np.ndarray:
    return np.atleast_1d(engine.predict(model, np.asarray(targets, np.float32), get_profile(profile)))
