"""Small dense and convolutional classifiers, and ensembles of them."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache
from math import floor, prod
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PROBABILITY = "probability"
LOGIT = "logit"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``mlp``: ``input_shape`` is ``(d,)`` and ``hidden`` lists the dense widths.
    ``cnn``: ``input_shape`` is ``(C, H, W)``; each conv layer ``i`` has
    ``channels[i]`` filters of size ``kernels[i]`` (zero "same" padding,
    stride 1) followed by ReLU and an average pool of size ``pools[i]``
    (1 disables it). ``hidden`` are the dense widths after flattening.
    """

    kind: str
    input_shape: tuple
    hidden: tuple
    classes: int
    channels: tuple = ()
    kernels: tuple = ()
    pools: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        for name in ("hidden", "channels", "kernels", "pools"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.kind not in ("mlp", "cnn"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.classes < 2:
            raise ValueError("class count must be at least 2")
        if any(w < 1 for w in self.hidden + self.channels + self.kernels + self.pools + self.input_shape):
            raise ValueError("every width, kernel and pool size must be >= 1")
        if self.kind == "mlp" and len(self.input_shape) != 1:
            raise ValueError("mlp input_shape must be (d,)")
        if self.kind == "cnn":
            if len(self.input_shape) != 3:
                raise ValueError("cnn input_shape must be (C, H, W)")
            if not (len(self.channels) == len(self.kernels) == len(self.pools)) or not self.channels:
                raise ValueError("cnn needs matching non-empty channels/kernels/pools")
            _ = _layer_table(self)  # validates spatial sizes

    @property
    def input_size(self) -> int:
        return prod(self.input_shape)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "hidden": list(self.hidden),
            "classes": self.classes,
            "channels": list(self.channels),
            "kernels": list(self.kernels),
            "pools": list(self.pools),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], tuple(d["input_shape"]), tuple(d["hidden"]), int(d["classes"]),
                   tuple(d.get("channels", ())), tuple(d.get("kernels", ())), tuple(d.get("pools", ())))

    def descriptor(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def mlp(input_dim: int, hidden: Sequence[int], classes: int) -> ModelSpec:
    return ModelSpec("mlp", (input_dim,), tuple(hidden), classes)


def small_cnn(input_shape, channels, kernels, pools, hidden, classes) -> ModelSpec:
    return ModelSpec("cnn", tuple(input_shape), tuple(hidden), classes,
                     tuple(channels), tuple(kernels), tuple(pools))


@lru_cache(maxsize=None)
def _layer_table(spec: ModelSpec) -> tuple:
    """(layer kind, weight shape, bias shape, fan_in, extra) in parameter order."""
    table = []
    if spec.kind == "cnn":
        c, h, w = spec.input_shape
        for out_c, k, pool in zip(spec.channels, spec.kernels, spec.pools):
            pad = k // 2
            h, w = h + 2 * pad - k + 1, w + 2 * pad - k + 1
            if h < 1 or w < 1:
                raise ValueError(f"kernel {k} too large for the feature map")
            table.append(("conv", (out_c, c, k, k), (out_c,), c * k * k, (pad, pool)))
            if pool > 1:
                if h < pool or w < pool:
                    raise ValueError(f"pool {pool} larger than feature map {h}x{w}")
                h, w = (h - pool) // pool + 1, (w - pool) // pool + 1
            c = out_c
        fan = c * h * w
    else:
        fan = spec.input_shape[0]
    for width in spec.hidden + (spec.classes,):
        table.append(("dense", (fan, width), (width,), fan, None))
        fan = width
    return tuple(table)


def param_shapes(spec: ModelSpec) -> list[tuple]:
    """Shapes of the parameter arrays in storage order."""
    return [s for _, ws, bs, _, _ in _layer_table(spec) for s in (ws, bs)]


def param_count(spec: ModelSpec) -> int:
    """Exact number of weight and bias scalars."""
    return sum(prod(ws) + prod(bs) for _, ws, bs, _, _ in _layer_table(spec))


@dataclass
class ModelParams:
    spec: ModelSpec
    arrays: list  # [W0, b0, W1, b1, ...] as float64 arrays
    seed: int = 0

    def __post_init__(self):
        expected = param_shapes(self.spec)
        got = [tuple(a.shape) for a in self.arrays]
        if got != expected:
            raise ShapeError("params", tuple(expected), tuple(got))

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, [a.copy() for a in self.arrays], self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays])


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) % (1 << 64))


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Weights ~ N(0, 1/fan_in), zero biases; a pure function of (spec, seed)."""
    rng = _rng(seed)
    arrays = []
    for _, ws, bs, fan_in, _ in _layer_table(spec):
        arrays.append(rng.standard_normal(ws) / np.sqrt(fan_in))
        arrays.append(np.zeros(bs))
    return ModelParams(spec, arrays, int(seed))


def _as_batch(params: ModelParams, x) -> tuple[Tensor, bool]:
    spec = params.spec
    x = ad.as_tensor(x)
    shp = x.shape
    ins = spec.input_shape
    if shp == ins or (spec.kind == "cnn" and shp == (spec.input_size,)):
        return ad.reshape(x, (1,) + ins), True
    if len(shp) >= 1 and (shp[1:] == ins or (spec.kind == "cnn" and shp[1:] == (spec.input_size,))):
        if spec.kind == "cnn" and shp[1:] != ins:
            x = ad.reshape(x, (shp[0],) + ins)
        return x, False
    raise ShapeError("forward_logits", ins, shp)


def forward_logits(params: ModelParams, x, weights: Sequence[Tensor] | None = None) -> Tensor:
    """Logits for a single input or a batch.

    ``weights`` optionally supplies the parameter tensors (for gradients
    w.r.t. parameters); by default the arrays enter as constants.
    """
    h, single = _as_batch(params, x)
    ws = list(weights) if weights is not None else [Tensor(a) for a in params.arrays]
    table = _layer_table(params.spec)
    n_dense = sum(1 for layer in table if layer[0] == "dense")
    dense_seen = 0
    for li, (kind, _, _, _, extra) in enumerate(table):
        W, b = ws[2 * li], ws[2 * li + 1]
        if kind == "conv":
            pad, pool = extra
            h = ad.conv2d(h, W, stride=1, padding=pad)
            h = ad.relu(ad.add(h, ad.reshape(b, (-1, 1, 1))))
            if pool > 1:
                h = ad.avg_pool2d(h, pool)
            continue
        if h.data.ndim > 2:
            h = ad.reshape(h, (h.shape[0], -1))
        h = ad.add(ad.matmul(h, W), b)
        dense_seen += 1
        if dense_seen < n_dense:
            h = ad.relu(h)
    if single:
        h = ad.reshape(h, (params.spec.classes,))
    return h


def param_tensors(params: ModelParams) -> list[Tensor]:
    """Fresh leaf tensors over the parameter arrays, for differentiation."""
    return [Tensor(a, requires_grad=True) for a in params.arrays]


@dataclass
class Ensemble:
    members: list
    mode: str = PROBABILITY

    def __post_init__(self):
        if self.mode not in (PROBABILITY, LOGIT):
            raise ValueError(f"unknown averaging mode {self.mode!r}")
        classes = {m.spec.classes for m in self.members}
        if len(classes) > 1:
            raise ValueError(f"ensemble members disagree on class count: {sorted(classes)}")

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def classes(self) -> int:
        return self.members[0].spec.classes

    def with_mode(self, mode: str) -> "Ensemble":
        return replace(self, mode=mode)


def _mean_of(tensors: list[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = ad.add(total, t)
    return total if len(tensors) == 1 else ad.mul_scalar(total, 1.0 / len(tensors))


def ensemble_forward(ensemble: Ensemble, x, weights: Sequence[Sequence[Tensor]] | None = None,
                     mode: str | None = None) -> Tensor:
    """Mean of member softmax outputs (probability mode) or of member logits."""
    if not ensemble.members:
        raise ValueError("ensemble_forward: ensemble has no members")
    mode = mode or ensemble.mode
    if weights is None:
        weights = [None] * ensemble.k
    outs = []
    for member, w in zip(ensemble.members, weights):
        z = forward_logits(member, x, w)
        outs.append(ad.softmax(z) if mode == PROBABILITY else z)
    return _mean_of(outs)


def predict(ensemble: Ensemble, x) -> np.ndarray:
    """Argmax class per row (lowest index on ties)."""
    out = ensemble_forward(ensemble, x).data
    return np.argmax(out, axis=-1)


def _scaled(base: ModelSpec, width: int) -> ModelSpec:
    ref = base.channels[0] if base.kind == "cnn" else base.hidden[0]

    def scale(v):
        return max(1, floor(v * width / ref + 0.5))

    return replace(base, hidden=tuple(scale(v) for v in base.hidden),
                   channels=tuple(scale(v) for v in base.channels))


def width_candidates(base: ModelSpec, target_params: int) -> list[tuple[int, ModelSpec]]:
    """Uniformly rescaled variants of ``base``, from its own width upward.

    The search stops once the parameter count has passed the target.
    """
    ref = base.channels[0] if base.kind == "cnn" else (base.hidden[0] if base.hidden else 0)
    if ref == 0:
        return [(0, base)]
    out = []
    width = ref
    while True:
        spec = _scaled(base, width)
        out.append((width, spec))
        if param_count(spec) >= target_params:
            break
        width += 1
    return out


def match_width(base: ModelSpec, target_params: int) -> ModelSpec:
    """Rescale all hidden widths by a common factor to approach ``target_params``.

    Ties go to the smaller width.
    """
    best, best_gap = base, abs(param_count(base) - target_params)
    for _, spec in width_candidates(base, target_params):
        gap = abs(param_count(spec) - target_params)
        if gap < best_gap:
            best, best_gap = spec, gap
    return best
