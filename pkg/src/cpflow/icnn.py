"""Input-convex potentials and their gradient maps.

The potential is

    F(x) = softplus(w0) * |x|^2 / 2 + softplus(w1) * icnn(x)

where ``icnn`` is convex in ``x``: hidden-to-hidden weights pass through a
softplus and are divided by the fan-in, activations are convex and
non-decreasing, and every pre-activation is normalized by an ActNorm with a
positive scale. The quadratic term makes ``F`` strongly convex, so its
gradient map is a bijection of R^d.

Parameters live in a flat ``name -> ndarray`` mapping whose keys double as
checkpoint names (``layer{k}.W``, ``layer{k}.rawV``, ``out.rawv``,
``reparam.w0`` and so on).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .activations import Activation, parse_activation

__all__ = [
    "ICNNConfig",
    "PotentialParams",
    "ActNormStateError",
    "init_params",
    "potential",
    "grad_map",
    "actnorm_data_init",
    "positive_weight",
    "SOFTPLUS",
    "ACTNORM_MIN_SCALE",
]

SOFTPLUS = Activation("logistic")
ACTNORM_MIN_SCALE = 1e-3
_ZERO_VAR = 1e-12


class ActNormStateError(RuntimeError):
    """Potential evaluated before its ActNorm statistics were initialized."""


def softplus_inv(y: float) -> float:
    return y + math.log(-math.expm1(-y))


@dataclass(frozen=True)
class ICNNConfig:
    input_dim: int
    depth: int = 3
    width: int = 32
    augmented: bool = True
    activation_first: Activation = field(default_factory=lambda: Activation("gaussian", "symmetrized"))
    activation_rest: Activation = field(default_factory=lambda: Activation("gaussian"))

    def __post_init__(self):
        for name in ("input_dim", "depth", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"ICNNConfig.{name} must be positive")
        if self.augmented and self.width % 2:
            raise ValueError("an input-augmented ICNN needs an even width")
        for name in ("activation_first", "activation_rest"):
            act = getattr(self, name)
            if isinstance(act, str):
                object.__setattr__(self, name, parse_activation(act))
        if self.depth > 1 and self.activation_rest.variant == "symmetrized":
            # hidden layers compose s with convex inputs, which needs s non-decreasing
            raise ValueError("symmetrized activations are only valid on input-facing units")

    @property
    def direct_width(self) -> int:
        return self.width // 2 if self.augmented else self.width

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "depth": self.depth,
            "width": self.width,
            "augmented": self.augmented,
            "activation_first": str(self.activation_first),
            "activation_rest": str(self.activation_rest),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ICNNConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            depth=int(d["depth"]),
            width=int(d["width"]),
            augmented=bool(d["augmented"]),
            activation_first=parse_activation(str(d["activation_first"])),
            activation_rest=parse_activation(str(d["activation_rest"])),
        )


class PotentialParams:
    """All arrays of one potential, keyed by checkpoint name."""

    def __init__(self, arrays: Mapping[str, np.ndarray], actnorm_initialized: bool = False):
        self.arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        self.actnorm_initialized = actnorm_initialized

    def __getitem__(self, key):
        return self.arrays[key]

    def __setitem__(self, key, value):
        self.arrays[key] = np.array(value, dtype=np.float64)

    def keys(self):
        return self.arrays.keys()

    def copy(self) -> "PotentialParams":
        return PotentialParams(self.arrays, self.actnorm_initialized)

    def nodes(self, trainable: bool = True, prefix: str = "") -> dict[str, ad.Node]:
        make = ad.variable if trainable else ad.constant
        return {k: make(v, name=prefix + k) for k, v in self.arrays.items()}

    def effective_positive_weights(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.arrays.items():
            if k.endswith("rawV") or k == "out.rawv":
                fan_in = v.shape[-1] if v.ndim == 2 else v.shape[0]
                out[k] = SOFTPLUS(v) / fan_in
        return out


def init_params(config: ICNNConfig, seed: int) -> PotentialParams:
    """Fan-in uniform weights, positive paths near mean 1/fan_in, identity-like reparam."""
    rng = np.random.default_rng(seed)
    d, width, half = config.input_dim, config.width, config.direct_width

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    raw_one = softplus_inv(1.0)
    arrays: dict[str, np.ndarray] = {}
    for k in range(1, config.depth + 1):
        p = f"layer{k}."
        arrays[p + "W"] = uniform((half, d), d)
        if k > 1:
            arrays[p + "rawV"] = raw_one + uniform((half, width), width)
        if config.augmented:
            arrays[p + "A"] = uniform((width - half, d), d)
        arrays[p + "b"] = uniform((width,), d if k == 1 else width)
        arrays[p + "actnorm.scale"] = np.ones(width)
        arrays[p + "actnorm.shift"] = np.zeros(width)
    arrays["out.rawv"] = raw_one + uniform((width,), width)
    arrays["out.W"] = uniform((1, d), d)
    arrays["out.b"] = uniform((), d)
    arrays["reparam.w0"] = np.array(raw_one)
    arrays["reparam.w1"] = np.array(0.0)
    return PotentialParams(arrays, actnorm_initialized=False)


def positive_weight(raw: ad.Node) -> ad.Node:
    """softplus(raw) / fan_in, elementwise positive for every finite raw."""
    fan_in = raw.shape[-1]
    return ad.scale(ad.elementwise(raw, SOFTPLUS), 1.0 / fan_in)


def _rowsum(a: ad.Node) -> ad.Node:
    n = a.shape[0]
    return ad.reshape(ad.sum_to(a, (n, 1)), (n,))


def _as_nodes(params) -> Mapping[str, ad.Node]:
    if isinstance(params, PotentialParams):
        return params.nodes(trainable=False)
    return params


def _hidden(P: Mapping[str, ad.Node], config: ICNNConfig, x: ad.Node, on_preact=None) -> ad.Node:
    """Last hidden layer activations; ``on_preact`` may rewrite ActNorm nodes (init pass)."""
    half = config.direct_width
    h = None
    for k in range(1, config.depth + 1):
        p = f"layer{k}."
        pre = ad.matmul(x, ad.transpose(P[p + "W"]))
        if k > 1:
            pre = ad.add(pre, ad.matmul(h, ad.transpose(positive_weight(P[p + "rawV"]))))
        if config.augmented:
            pre = ad.concat([pre, ad.matmul(x, ad.transpose(P[p + "A"]))], axis=1)
        pre = ad.add(pre, P[p + "b"])
        if on_preact is not None:
            on_preact(k, pre.value)
        pre = ad.add(ad.mul(pre, P[p + "actnorm.scale"]), P[p + "actnorm.shift"])
        act = config.activation_first if k == 1 else config.activation_rest
        if config.augmented:
            h = ad.concat(
                [
                    ad.elementwise(ad.take(pre, 1, 0, half), act),
                    ad.elementwise(ad.take(pre, 1, half, config.width), config.activation_first),
                ],
                axis=1,
            )
        else:
            h = ad.elementwise(pre, act)
    return h


def icnn_value(params, config: ICNNConfig, x: ad.Node) -> ad.Node:
    """The convex network alone, one value per row of ``x``."""
    P = _as_nodes(params)
    h = _hidden(P, config, x)
    out = ad.matmul(h, ad.reshape(positive_weight(P["out.rawv"]), (config.width, 1)))
    out = ad.add(out, ad.matmul(x, ad.transpose(P["out.W"])))
    return ad.add(ad.reshape(out, (x.shape[0],)), P["out.b"])


def potential(params, config: ICNNConfig, x: ad.Node, graph: ad.Graph | None = None) -> ad.Node:
    """Strongly convex potential F_{w0,w1} evaluated on a batch ``x`` of shape (n, d).

    ``params`` is either a :class:`PotentialParams` (evaluated as constants)
    or a mapping of parameter nodes when parameter gradients are needed.
    Pass ``graph`` to record the nodes built by this evaluation.
    """
    if isinstance(params, PotentialParams) and not params.actnorm_initialized:
        raise ActNormStateError("ActNorm statistics are uninitialized; run actnorm_data_init first")
    if x.value.ndim != 2 or x.shape[1] != config.input_dim:
        raise ad.ShapeError("potential", x.shape, (None, config.input_dim))
    if graph is not None:
        with graph:
            return potential(params, config, x)
    P = _as_nodes(params)
    quad = ad.scale(_rowsum(ad.mul(x, x)), 0.5)
    quad = ad.mul(quad, ad.elementwise(P["reparam.w0"], SOFTPLUS))
    convex = ad.mul(icnn_value(P, config, x), ad.elementwise(P["reparam.w1"], SOFTPLUS))
    return ad.add(quad, convex)


def ensure_input(x) -> ad.Node:
    """A node that gradients w.r.t. the input can be taken against."""
    if isinstance(x, ad.Node):
        return x if x.requires_grad else ad.variable(x.value)
    return ad.variable(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def grad_map(params, config: ICNNConfig, x, create_graph: bool = True) -> tuple[ad.Node, ad.Node]:
    """The flow map f(x) = grad F(x).

    Returns ``(f, x_node)``; with ``create_graph`` ``f`` stays differentiable
    w.r.t. ``x_node`` (for Hessian-vector products) and the parameters.
    """
    x = ensure_input(x)
    F = potential(params, config, x)
    (f,) = ad.gradient(ad.total(F), [x], create_graph=create_graph)
    return f, x


def actnorm_data_init(params: PotentialParams, config: ICNNConfig, x_batch) -> PotentialParams:
    """Set every ActNorm so its batch output has zero mean and unit variance.

    No-op when already initialized. Scales are clamped to >= 1e-3 and a
    zero-variance unit keeps scale 1.
    """
    if params.actnorm_initialized:
        return params
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    if x_batch.shape[0] < 2:
        raise ValueError("ActNorm data-dependent init needs a batch of at least 2")
    params = params.copy()
    nodes = params.nodes(trainable=False)

    def hook(k, pre):
        mean = pre.mean(axis=0)
        std = pre.std(axis=0)
        scale = np.where(std > _ZERO_VAR, 1.0 / np.where(std > _ZERO_VAR, std, 1.0), 1.0)
        scale = np.maximum(scale, ACTNORM_MIN_SCALE)
        shift = -mean * scale
        params[f"layer{k}.actnorm.scale"] = scale
        params[f"layer{k}.actnorm.shift"] = shift
        nodes[f"layer{k}.actnorm.scale"] = ad.constant(scale)
        nodes[f"layer{k}.actnorm.shift"] = ad.constant(shift)

    with ad.no_grad():
        _hidden(nodes, config, ad.constant(x_batch), on_preact=hook)
    params.actnorm_initialized = True
    return params


def preactivations(params: PotentialParams, config: ICNNConfig, x_batch) -> list[np.ndarray]:
    """Post-ActNorm pre-activations per layer (diagnostics and tests)."""
    out = []
    nodes = params.nodes(trainable=False)

    def hook(k, pre):
        out.append(pre * params[f"layer{k}.actnorm.scale"] + params[f"layer{k}.actnorm.shift"])

    with ad.no_grad():
        _hidden(nodes, config, ad.constant(np.atleast_2d(x_batch)), on_preact=hook)
    return out
