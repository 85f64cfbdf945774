"""Layers, models and the canonical gradient path.

A model is an ordered list of layers.  ``forward`` runs every reduction
through :mod:`hwtrigger.numerics` under a chosen :class:`BackendProfile`, so
its result is bit-reproducible per ``(parameters, input, profile)``.
Gradients are taken on a separate float64 path (``forward64``/``backward``)
that records the computation on a tape; it plays the role of one fixed,
high-precision device.

Flat parameter order: layers in order, tensors within a layer in the order of
``Layer.param_names``, each tensor row-major.  Bit-flip records and
checkpoints index into this view.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx

__all__ = [
    "Linear",
    "FactoredLinear",
    "Conv2d",
    "ReLU",
    "GlobalAvgPool",
    "Flatten",
    "Model",
    "ActivationError",
    "forward",
    "predict",
    "forward64",
    "backward",
    "softmax_cross_entropy",
    "build_mlp",
    "build_cnn",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
]


class ActivationError(FloatingPointError):
    def __init__(self, layer_index: int, kind: str):
        self.layer_index = layer_index
        super().__init__(f"non-finite activation after layer {layer_index} ({kind})")


class Layer:
    kind = "layer"
    param_names: tuple[str, ...] = ()

    def params(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.param_names]

    def with_params(self, params):
        new = copy.copy(self)
        for n, p in zip(self.param_names, params):
            setattr(new, n, p)
        return new

    def config(self) -> dict:
        return {}

    # profile path
    def forward(self, x, profile, batch_size=1, batch_index=0):
        raise NotImplementedError

    # canonical path
    def forward64(self, params, x):
        raise NotImplementedError

    def backward64(self, params, cache, gy):
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"
    param_names = ("weight", "bias")

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, np.float32)
        self.bias = np.asarray(bias, np.float32)

    def forward(self, x, profile, batch_size=1, batch_index=0):
        return nx.gemm(x, self.weight, profile, batch_size, batch_index) + self.bias

    def forward64(self, params, x):
        w, b = params
        return x @ w + b, x

    def backward64(self, params, x, gy):
        w, _ = params
        return gy @ w.T, [x.T @ gy, gy.sum(axis=0)]


class FactoredLinear(Layer):
    """Two consecutive linear maps ``x -> (x @ w1) @ w2`` with nothing in between."""

    kind = "factored_linear"
    param_names = ("w1", "w2")

    def __init__(self, w1, w2):
        self.w1 = np.asarray(w1, np.float32)
        self.w2 = np.asarray(w2, np.float32)
        if self.w1.shape[1] != self.w2.shape[0]:
            raise nx.ShapeError(f"factor shapes do not compose: {self.w1.shape}, {self.w2.shape}")

    @property
    def inner(self) -> int:
        return self.w1.shape[1]

    def forward(self, x, profile, batch_size=1, batch_index=0):
        z = nx.gemm(x, self.w1, profile, batch_size, batch_index)
        return nx.gemm(z, self.w2, profile, batch_size, batch_index)

    def forward64(self, params, x):
        w1, w2 = params
        z = x @ w1
        return z @ w2, (x, z)

    def backward64(self, params, cache, gy):
        w1, w2 = params
        x, z = cache
        gz = gy @ w2.T
        return gz @ w1.T, [x.T @ gz, z.T @ gy]


def _col2im(cols, x_shape, kh, kw, stride, padding):
    n, c, h, w = x_shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i: i + stride * oh: stride, j: j + stride * ow: stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


class Conv2d(Layer):
    kind = "conv2d"
    param_names = ("weight", "bias")

    def __init__(self, weight, bias, stride=1, padding=0):
        self.weight = np.asarray(weight, np.float32)
        self.bias = np.asarray(bias, np.float32)
        self.stride = int(stride)
        self.padding = int(padding)

    def config(self):
        return {"stride": self.stride, "padding": self.padding}

    def forward(self, x, profile, batch_size=1, batch_index=0):
        y = nx.conv2d(x, self.weight, profile, self.stride, self.padding, batch_size, batch_index)
        return y + self.bias[:, None, None]

    def forward64(self, params, x):
        w, b = params
        o, c, kh, kw = w.shape
        cols, oh, ow = nx.im2col(x, kh, kw, self.stride, self.padding)
        y = cols @ w.reshape(o, -1).T + b
        y = y.reshape(x.shape[0], oh, ow, o).transpose(0, 3, 1, 2)
        return y, (cols, x.shape)

    def backward64(self, params, cache, gy):
        w, _ = params
        cols, x_shape = cache
        o, c, kh, kw = w.shape
        g = gy.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g.T @ cols).reshape(w.shape)
        gx = _col2im(g @ w.reshape(o, -1), x_shape, kh, kw, self.stride, self.padding)
        return gx, [gw, g.sum(axis=0)]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, profile, batch_size=1, batch_index=0):
        return np.maximum(x, np.float32(0))

    def forward64(self, params, x):
        return np.maximum(x, 0.0), x > 0

    def backward64(self, params, mask, gy):
        return gy * mask, []


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C); the spatial sum is a profile-ordered reduction."""

    kind = "global_avg_pool"

    def forward(self, x, profile, batch_size=1, batch_index=0):
        n, c, h, w = x.shape
        s = nx.reduce_last(x.reshape(n, c, h * w), profile, batch_size, batch_index,
                           kernel="global_avg_pool")
        return s / np.float32(h * w)

    def forward64(self, params, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward64(self, params, shape, gy):
        n, c, h, w = shape
        return np.broadcast_to(gy[:, :, None, None] / (h * w), shape).copy(), []


class Flatten(Layer):
    """(N, ...) -> (N, features), row-major."""

    kind = "flatten"

    def forward(self, x, profile, batch_size=1, batch_index=0):
        return x.reshape(len(x), -1)

    def forward64(self, params, x):
        return x.reshape(len(x), -1), x.shape

    def backward64(self, params, shape, gy):
        return gy.reshape(shape), []


LAYER_KINDS = {cls.kind: cls for cls in (Linear, FactoredLinear, Conv2d, ReLU, GlobalAvgPool, Flatten)}


@dataclass
class Model:
    layers: list
    input_shape: tuple
    num_classes: int
    arch: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.layers:
            raise ValueError("a model needs at least one layer")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def param_slices(self) -> list[tuple[int, str, slice]]:
        """(layer index, tensor name, slice into the flat view) for every tensor."""
        out, off = [], 0
        for li, layer in enumerate(self.layers):
            for name in layer.param_names:
                size = getattr(layer, name).size
                out.append((li, name, slice(off, off + size)))
                off += size
        return out

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def theta(self) -> np.ndarray:
        ps = self.params()
        if not ps:
            return np.zeros(0, np.float32)
        return np.concatenate([p.reshape(-1) for p in ps]).astype(np.float32, copy=False)

    def with_theta(self, flat) -> "Model":
        flat = np.asarray(flat)
        if flat.dtype != np.float32:
            raise TypeError("the flat view must be float32")
        if flat.size != self.num_params:
            raise nx.ShapeError(f"expected {self.num_params} parameters, got {flat.size}")
        layers, off = [], 0
        for layer in self.layers:
            new = []
            for p in layer.params():
                new.append(flat[off: off + p.size].reshape(p.shape).copy())
                off += p.size
            layers.append(layer.with_params(new))
        return Model(layers, self.input_shape, self.num_classes, self.arch, dict(self.meta))

    def with_layer(self, index: int, layer: Layer) -> "Model":
        layers = list(self.layers)
        layers[index] = layer
        return Model(layers, self.input_shape, self.num_classes, self.arch, dict(self.meta))

    def layer_mask(self, layer_indices=None) -> np.ndarray:
        """Boolean flat mask selecting the parameters of the given layers (all if None)."""
        mask = np.zeros(self.num_params, dtype=bool)
        for li, _, sl in self.param_slices():
            if layer_indices is None or li in layer_indices:
                mask[sl] = True
        return mask

    def fingerprint(self) -> str:
        return hashlib.sha256(self.theta().tobytes()).hexdigest()[:16]


def _batchify(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    if x.shape == model.input_shape:
        return x[None], True
    if x.shape[1:] != model.input_shape:
        raise nx.ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x, False


def forward(model: Model, x, profile, batch_size: int = 1, batch_index=0,
            start: int = 0, stop: int | None = None) -> np.ndarray:
    """Logits of ``x`` under ``profile``.

    ``x`` is one input or a stack of independent inputs.  ``batch_size`` and
    ``batch_index`` (scalar or per input) say which slot of a batch every input
    is evaluated in.  ``start``/``stop`` run only layers ``start..stop-1`` on
    an activation (used by activation patching).
    """
    profile = nx.get_profile(profile)
    stop = model.num_layers if stop is None else stop
    if start == 0:
        h, single = _batchify(model, x)
    else:
        h = np.asarray(x, dtype=np.float32)
        single = False
    for i in range(start, stop):
        h = model.layers[i].forward(h, profile, batch_size, batch_index)
        if not np.all(np.isfinite(h)):
            raise ActivationError(i, model.layers[i].kind)
    return h[0] if single else h


def predict(model: Model, x, profile, batch_size: int = 1, batch_index=0):
    """Arg-max class; exact ties go to the lowest class index."""
    logits = forward(model, x, profile, batch_size, batch_index)
    return np.argmax(logits, axis=-1)


@dataclass
class Tape:
    params: list
    caches: list
    single: bool


def _params64(model: Model, params=None):
    if params is None:
        return [p.astype(np.float64) for p in model.params()]
    if isinstance(params, np.ndarray) and params.ndim == 1:
        out, off = [], 0
        for p in model.params():
            out.append(params[off: off + p.size].reshape(p.shape).astype(np.float64))
            off += p.size
        return out
    return [np.asarray(p, np.float64) for p in params]


def forward64(model: Model, x, params=None) -> tuple[np.ndarray, Tape]:
    """Canonical float64 forward that records a tape for :func:`backward`.

    ``params`` optionally overrides the model's parameters (flat float64 view
    or list of tensors), which lets optimisers keep a high-precision master copy.
    """
    p64 = _params64(model, params)
    x = np.asarray(x)
    single = x.shape == model.input_shape
    h = (x[None] if single else x).astype(np.float64)
    caches, off = [], 0
    for layer in model.layers:
        k = len(layer.param_names)
        h, cache = layer.forward64(p64[off: off + k], h)
        caches.append(cache)
        off += k
    return (h[0] if single else h), Tape(p64, caches, single)


def backward(model: Model, tape: Tape, grad_logits) -> np.ndarray:
    """Gradient w.r.t. the flat parameter view, given d(loss)/d(logits)."""
    g = np.asarray(grad_logits, np.float64)
    if tape.single:
        g = g[None]
    grads = []
    off = sum(len(layer.param_names) for layer in model.layers)
    for layer, cache in zip(reversed(model.layers), reversed(tape.caches)):
        k = len(layer.param_names)
        off -= k
        g, gp = layer.backward64(tape.params[off: off + k], cache, g)
        grads.append(gp)
    flat = [gg.reshape(-1) for gp in reversed(grads) for gg in gp]
    out = np.concatenate(flat) if flat else np.zeros(0)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite gradient")
    return out


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits (float64)."""
    z = np.asarray(logits, np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = z.shape[0]
    idx = np.arange(n)
    loss = -np.mean(np.log(p[idx, labels] + 1e-300))
    g = p
    g[idx, labels] -= 1.0
    return float(loss), g / n


# --------------------------------------------------------------------------
# architectures


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _balance(layers: list, input_gain: float, split=None) -> tuple[list, list]:
    """Spread ``1 / input_gain`` over the weight tensors.

    Weight tensor ``j`` is multiplied by ``input_gain ** -split[j]``.
    ``split`` sums to one; "uniform" (the default) shares the gain equally and
    "first" puts it all on the first weight tensor.  Biases by the activation scale at
    their layer, so a network initialised for unit-scale inputs sees raw inputs
    at the same activation scale.  Returns the rescaled layers and the
    per-tensor scale factors in flat order.
    """
    n_w = sum(n != "bias" for layer in layers for n in layer.param_names)
    if split is None or split == "uniform":
        split = np.full(n_w, 1.0 / max(n_w, 1))
    elif split == "first":
        split = np.eye(n_w)[0]
    elif isinstance(split, str):
        raise ValueError(f"unknown gain split {split!r}")
    split = np.asarray(split, np.float64)
    if split.shape != (n_w,) or not np.isclose(split.sum(), 1.0):
        raise ValueError(f"gain split needs {n_w} fractions summing to 1")
    factors = iter(float(input_gain) ** -split)
    act = float(input_gain)
    out, scales = [], []
    for layer in layers:
        new = []
        for name, t in zip(layer.param_names, layer.params()):
            if name == "bias":
                k = act
            else:
                k = next(factors)
                act *= k
            new.append((t.astype(np.float64) * k).astype(np.float32))
            scales.append(k)
        out.append(layer.with_params(new) if new else layer)
    return out, scales


def build_mlp(input_dim: int, num_classes: int, seed: int = 0, hidden: int = 64, inner: int = 32,
              input_gain: float = 1.0, gain_split=None) -> Model:
    """Linear -> ReLU -> FactoredLinear -> ReLU -> Linear.

    ``input_gain`` is the RMS of the raw inputs (see :func:`_balance`).
    """
    rng = np.random.default_rng(seed)
    layers = [
        Linear(_he(rng, (input_dim, hidden), input_dim), np.zeros(hidden, np.float32)),
        ReLU(),
        FactoredLinear(_he(rng, (hidden, inner), hidden), _he(rng, (inner, hidden), inner)),
        ReLU(),
        Linear(_he(rng, (hidden, num_classes), hidden) * np.float32(0.5), np.zeros(num_classes, np.float32)),
    ]
    layers, scales = _balance(layers, input_gain, gain_split)
    return Model(layers, (input_dim,), num_classes, "mlp",
                 {"hidden": hidden, "inner": inner, "seed": seed, "input_gain": float(input_gain),
                  "param_scales": scales})


def build_cnn(input_shape=(1, 8, 8), num_classes: int = 4, seed: int = 0, channels: int = 8,
              head: int = 16, inner: int = 8, input_gain: float = 1.0, gain_split=None,
              pool: str = "gap") -> Model:
    """Conv -> ReLU -> Conv -> ReLU -> pool -> FactoredLinear -> ReLU -> Linear.

    ``pool`` is "gap" (global average) or "flatten" (keep the spatial layout).
    """
    rng = np.random.default_rng(seed)
    c = input_shape[0]
    side = (input_shape[1] + 1) // 2
    feat = head if pool == "gap" else head * side * side
    if pool not in ("gap", "flatten"):
        raise ValueError(f"unknown pooling {pool!r}")
    layers = [
        Conv2d(_he(rng, (channels, c, 3, 3), c * 9), np.zeros(channels, np.float32), 1, 1),
        ReLU(),
        Conv2d(_he(rng, (head, channels, 3, 3), channels * 9), np.zeros(head, np.float32), 2, 1),
        ReLU(),
        GlobalAvgPool() if pool == "gap" else Flatten(),
        FactoredLinear(_he(rng, (feat, inner), feat), _he(rng, (inner, head), inner)),
        ReLU(),
        Linear(_he(rng, (head, num_classes), head), np.zeros(num_classes, np.float32)),
    ]
    layers, scales = _balance(layers, input_gain, gain_split)
    return Model(layers, tuple(input_shape), num_classes, "cnn",
                 {"channels": channels, "head": head, "inner": inner, "seed": seed, "pool": pool,
                  "input_gain": float(input_gain), "param_scales": scales})


def build_model(arch: str, input_shape, num_classes: int, seed: int = 0, **kw) -> Model:
    if arch == "mlp":
        (dim,) = tuple(input_shape)
        return build_mlp(dim, num_classes, seed, **kw)
    if arch == "cnn":
        return build_cnn(tuple(input_shape), num_classes, seed, **kw)
    raise ValueError(f"unknown architecture {arch!r}")


# --------------------------------------------------------------------------
# checkpoints

MANIFEST_SUFFIX = ".manifest.json"
PAYLOAD_SUFFIX = ".params.f32"


def save_checkpoint(model: Model, stem) -> tuple[Path, Path]:
    """Write ``<stem>.manifest.json`` and the little-endian f32 payload ``<stem>.params.f32``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    payload = model.theta().astype("<f4").tobytes()
    manifest = {
        "format": "hwtrigger-checkpoint/1",
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "meta": model.meta,
        "flat_order": "layers in order; tensors in listed order; row-major; little-endian float32",
        "num_params": model.num_params,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "layers": [
            {
                "kind": layer.kind,
                "config": layer.config(),
                "params": [{"name": n, "shape": list(getattr(layer, n).shape)} for n in layer.param_names],
            }
            for layer in model.layers
        ],
    }
    mpath = stem.with_name(stem.name + MANIFEST_SUFFIX)
    ppath = stem.with_name(stem.name + PAYLOAD_SUFFIX)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ppath.write_bytes(payload)
    return mpath, ppath


def load_checkpoint(stem) -> Model:
    stem = Path(stem)
    mpath = stem.with_name(stem.name + MANIFEST_SUFFIX)
    ppath = stem.with_name(stem.name + PAYLOAD_SUFFIX)
    manifest = json.loads(mpath.read_text())
    payload = ppath.read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ValueError(f"checkpoint payload {ppath} does not match its manifest")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    layers, off = [], 0
    for spec in manifest["layers"]:
        cls = LAYER_KINDS[spec["kind"]]
        tensors = []
        for p in spec["params"]:
            size = int(np.prod(p["shape"]))
            tensors.append(flat[off: off + size].reshape(p["shape"]).copy())
            off += size
        layers.append(cls(*tensors, **spec["config"]))
    if off != flat.size:
        raise ValueError("checkpoint payload size does not match the manifest shapes")
    return Model(layers, tuple(manifest["input_shape"]), manifest["num_classes"],
                 manifest["arch"], manifest.get("meta", {}))
