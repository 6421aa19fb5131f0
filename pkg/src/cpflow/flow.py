"""Convex potential flow layers and stacks.

Density direction: data -> [ActNorm -> gradient map] x K -> standard normal.
Sampling runs the stack backwards, inverting each gradient map by convex
minimization.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .icnn import (
    ACTNORM_MIN_SCALE,
    ICNNConfig,
    PotentialParams,
    actnorm_data_init,
    ensure_input,
    init_params,
    potential,
    softplus_inv,
)
from .solvers import (
    IndefiniteError,
    SolverReport,
    StagnationError,
    conjugate_gradient,
    exact_logdet,
    lbfgs_minimize,
    rademacher,
    slq_logdet,
)

__all__ = [
    "FlowLayer",
    "FlowStack",
    "LogDensityResult",
    "SurrogateResult",
    "InversionError",
    "forward",
    "inverse",
    "stack_forward",
    "stack_inverse",
    "hessian",
    "log_density",
    "surrogate_logdet_grad_objective",
    "surrogate_from_map",
    "nll_training_loss",
    "transport_cost",
    "gaussian_ot_reference",
    "gaussian_kl_to_standard",
    "standard_normal_logpdf",
    "EXACT_MAX_DIM",
]

logger = logging.getLogger(__name__)

EXACT_MAX_DIM = 256
LOG_2PI = math.log(2.0 * math.pi)


class InversionError(RuntimeError):
    def __init__(self, message: str, residual_inf: float, x_best=None):
        super().__init__(f"{message}; residual |f(x)-y|_inf={residual_inf:.3e}")
        self.residual_inf = residual_inf
        self.x_best = x_best


@dataclass
class FlowLayer:
    config: ICNNConfig
    params: PotentialParams

    @property
    def dim(self) -> int:
        return self.config.input_dim

    @classmethod
    def random(cls, config: ICNNConfig, seed: int = 0, init_batch=None) -> "FlowLayer":
        """Fresh layer; ActNorm is initialized from ``init_batch`` or standard-normal draws."""
        params = init_params(config, seed)
        if init_batch is None:
            init_batch = np.random.default_rng(seed).standard_normal((256, config.input_dim))
        return cls(config, actnorm_data_init(params, config, init_batch))

    @classmethod
    def scaled_identity(cls, config: ICNNConfig, factor: float = 1.0) -> "FlowLayer":
        """A layer computing ``f(x) = factor * x`` (every input path zeroed)."""
        params = init_params(config, 0)
        for k in params.keys():
            if k.endswith((".W", ".A")):
                params[k] = np.zeros_like(params[k])
        params["reparam.w0"] = softplus_inv(factor)
        params.actnorm_initialized = True
        return cls(config, params)


def standard_normal_logpdf(y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    return -0.5 * (y * y).sum(axis=1) - 0.5 * y.shape[1] * LOG_2PI


# ---------------------------------------------------------------------------
# single layer


def _grad_map(params, config, x: ad.Node, create_graph=True) -> ad.Node:
    (f,) = ad.gradient(ad.total(potential(params, config, x)), [x], create_graph=create_graph)
    return f


def forward(layer: FlowLayer, x) -> np.ndarray:
    """``y = grad F(x)`` as plain values."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return _grad_map(layer.params, layer.config, ad.variable(x), create_graph=False).value


def inverse(layer: FlowLayer, y, grad_tol: float = 1e-6, max_iter: int | None = None, history: int = 10):
    """Solve ``grad F(x) = y`` by minimizing ``F(x) - y.x`` with L-BFGS from ``x = y``.

    The batch is solved jointly: the per-row objectives are independent, so
    their sum has the per-row gradients as its gradient.

    Returns ``(x, report)``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    max_iter = 500 * layer.dim if max_iter is None else max_iter

    def objective(x):
        xn = ad.variable(x)
        F = ad.total(potential(layer.params, layer.config, xn))
        (g,) = ad.gradient(F, [xn])
        return F.value - float(np.sum(y * x)), g.value - y

    try:
        x, report = lbfgs_minimize(objective, y.copy(), history=history, grad_tol=grad_tol, max_iter=max_iter)
    except StagnationError as exc:
        raise InversionError("L-BFGS stagnated", exc.report.residual_inf, exc.x_best) from exc
    if not report.converged:
        raise InversionError(f"no convergence in {max_iter} iterations", report.residual_inf, x)
    return x, report


def hessian(layer: FlowLayer, x) -> np.ndarray:
    """Dense Hessians ``(n, d, d)`` of the potential, one hvp per column."""
    x = ad.variable(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    f = _grad_map(layer.params, layer.config, x)
    return _assemble_hessian(f, x)


def _assemble_hessian(f: ad.Node, x: ad.Node) -> np.ndarray:
    n, d = x.shape
    H = np.empty((n, d, d))
    e = np.zeros((n, d))
    for j in range(d):
        e[:] = 0.0
        e[:, j] = 1.0
        H[:, :, j] = ad.gradient(ad.dot(f, ad.constant(e)), [x])[0].value
    return H


# ---------------------------------------------------------------------------
# stacks


@dataclass
class FlowStack:
    """Composition of CP-Flow layers with optional per-layer ActNorm in front.

    ActNorm ``i`` maps ``x -> scale * x + shift`` with positive ``scale``
    before layer ``i``.
    """

    layers: list[FlowLayer]
    actnorm: bool = True
    scales: list[np.ndarray] = field(default_factory=list)
    shifts: list[np.ndarray] = field(default_factory=list)
    initialized: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a FlowStack needs at least one layer")
        d = self.dim
        if self.actnorm and not self.scales:
            self.scales = [np.ones(d) for _ in self.layers]
            self.shifts = [np.zeros(d) for _ in self.layers]

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    @classmethod
    def create(cls, config: ICNNConfig, n_blocks: int, seed: int = 0, actnorm: bool = True) -> "FlowStack":
        layers = []
        for i in range(n_blocks):
            block_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            layers.append(FlowLayer(config, init_params(config, block_seed)))
        return cls(layers, actnorm=actnorm)

    @classmethod
    def identity(cls, config: ICNNConfig, n_blocks: int = 1, factor: float = 1.0, actnorm: bool = True):
        stack = cls([FlowLayer.scaled_identity(config, factor) for _ in range(n_blocks)], actnorm=actnorm)
        stack.initialized = True
        return stack

    def initialize(self, x_batch) -> "FlowStack":
        """Data-dependent ActNorm init, layer by layer; no-op once done."""
        if self.initialized:
            return self
        x = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
        for i, layer in enumerate(self.layers):
            if self.actnorm:
                std = x.std(axis=0)
                scale = np.where(std > 1e-12, 1.0 / np.where(std > 1e-12, std, 1.0), 1.0)
                self.scales[i] = np.maximum(scale, ACTNORM_MIN_SCALE)
                self.shifts[i] = -x.mean(axis=0) * self.scales[i]
                x = x * self.scales[i] + self.shifts[i]
            layer.params = actnorm_data_init(layer.params, layer.config, x)
            x = forward(layer, x)
        self.initialized = True
        return self

    # parameter plumbing -----------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if self.actnorm:
                out[f"block{i}.pre.scale"] = self.scales[i]
                out[f"block{i}.pre.shift"] = self.shifts[i]
            for k, v in layer.params.arrays.items():
                out[f"block{i}.{k}"] = v
        return out

    def set_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, v in arrays.items():
            block, key = name.split(".", 1)
            i = int(block[len("block"):])
            v = np.array(v, dtype=np.float64)
            if key == "pre.scale":
                self.scales[i] = v
            elif key == "pre.shift":
                self.shifts[i] = v
            else:
                self.layers[i].params[key] = v

    def project(self) -> None:
        """Clamp every ActNorm scale to the convexity-safe floor."""
        for i, layer in enumerate(self.layers):
            if self.actnorm:
                self.scales[i] = np.maximum(self.scales[i], ACTNORM_MIN_SCALE)
            for key in layer.params.keys():
                if key.endswith("actnorm.scale"):
                    layer.params[key] = np.maximum(layer.params[key], ACTNORM_MIN_SCALE)

    def param_nodes(self, trainable: bool = True) -> dict[str, ad.Node]:
        make = ad.variable if trainable else ad.constant
        return {k: make(v, name=k) for k, v in self.arrays().items()}

    def _check(self):
        if not self.initialized:
            raise RuntimeError("FlowStack ActNorm is uninitialized; call initialize(x_batch) first")


def _block_nodes(nodes: Mapping[str, ad.Node], i: int) -> dict[str, ad.Node]:
    prefix = f"block{i}."
    return {k[len(prefix):]: v for k, v in nodes.items() if k.startswith(prefix) and not k.startswith(prefix + "pre.")}


def stack_forward(stack: FlowStack, x, return_all: bool = False):
    """Push data to base space; ``return_all`` also returns each layer's input."""
    stack._check()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    inputs = []
    for i, layer in enumerate(stack.layers):
        if stack.actnorm:
            x = x * stack.scales[i] + stack.shifts[i]
        inputs.append(x)
        x = forward(layer, x)
    return (x, inputs) if return_all else x


def stack_inverse(stack: FlowStack, y, grad_tol: float = 1e-6, max_iter: int | None = None):
    """Map base-space points back to data space. Returns ``(x, reports)``."""
    stack._check()
    x = np.atleast_2d(np.asarray(y, dtype=np.float64))
    reports = []
    for i in reversed(range(len(stack.layers))):
        try:
            x, rep = inverse(stack.layers[i], x, grad_tol=grad_tol, max_iter=max_iter)
        except InversionError as exc:
            raise InversionError(f"layer {i}: inversion failed", exc.residual_inf, exc.x_best) from exc
        reports.append(rep)
        if stack.actnorm:
            x = (x - stack.shifts[i]) / stack.scales[i]
    return x, reports[::-1]


# ---------------------------------------------------------------------------
# log-density


@dataclass
class LogDensityResult:
    logp: np.ndarray
    logdet_terms: np.ndarray  # (n, n_layers)
    affine_logdet: float
    estimator: str
    output: np.ndarray = field(repr=False, default=None)


def log_density(
    stack: FlowStack,
    x,
    mode: str = "exact",
    probes: int = 32,
    lanczos_steps: int = 20,
    seed: int = 0,
    chunk_size: int = 2048,
) -> LogDensityResult:
    """Per-sample log-density in nats via the change of variables.

    ``mode="exact"`` assembles each Hessian from ``d`` hvps and takes a
    Cholesky log-det (``d <= 256``); ``mode="slq"`` uses stochastic Lanczos
    quadrature.
    """
    stack._check()
    if mode not in ("exact", "slq"):
        raise ValueError(f"unknown log-det mode {mode!r}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    if d != stack.dim:
        raise ValueError(f"expected {stack.dim}-dimensional inputs, got {d}")
    if mode == "exact" and d > EXACT_MAX_DIM:
        raise ValueError(f"exact log-det is limited to d <= {EXACT_MAX_DIM}; use mode='slq'")

    affine = float(sum(np.log(s).sum() for s in stack.scales)) if stack.actnorm else 0.0
    terms = np.zeros((n, len(stack.layers)))
    out = np.empty_like(x)
    for lo in range(0, n, chunk_size):
        h = x[lo : lo + chunk_size]
        for i, layer in enumerate(stack.layers):
            if stack.actnorm:
                h = h * stack.scales[i] + stack.shifts[i]
            xn = ad.variable(h)
            f = _grad_map(layer.params, layer.config, xn)
            try:
                if mode == "exact":
                    terms[lo : lo + len(h), i] = exact_logdet(_assemble_hessian(f, xn))
                else:
                    op = lambda v, f=f, xn=xn: ad.gradient(ad.dot(f, ad.constant(v)), [xn])[0].value
                    est, _ = slq_logdet(op, d, probes=probes, m=lanczos_steps, seed=seed + lo, batch=len(h))
                    terms[lo : lo + len(h), i] = est
            except IndefiniteError as exc:
                raise IndefiniteError(f"layer {i}: Hessian is not positive definite ({exc})") from exc
            h = f.value
        out[lo : lo + len(h)] = h
    logp = standard_normal_logpdf(out) + terms.sum(axis=1) + affine
    return LogDensityResult(logp, terms, affine, mode, out)


# ---------------------------------------------------------------------------
# training objective


@dataclass
class SurrogateResult:
    objective: ad.Node  # scalar; its gradient estimates grad log det H
    output: ad.Node  # the layer's output f(x), still differentiable
    x: ad.Node
    report: SolverReport
    params: Mapping[str, ad.Node] | None = None


def surrogate_from_map(f: ad.Node, x: ad.Node, r: np.ndarray, cg_atol: float, max_iter: int | None = None):
    """Surrogate ``(H z)^T r`` with ``z = stop_gradient(CG(H, r))`` for ``H = df/dx``.

    ``f`` must have been built with ``create_graph`` so that ``H z`` stays
    differentiable w.r.t. whatever ``f`` depends on.
    """

    def hv(v):
        return ad.gradient(ad.dot(f, ad.constant(v)), [x])[0].value

    z, report = conjugate_gradient(hv, r, atol=cg_atol, max_iter=max_iter)
    if not report.converged:
        warnings.warn(
            f"CG stopped at max_iter with |Hz-r|_inf={report.residual_inf:.3e} > atol={cg_atol:g}",
            RuntimeWarning,
            stacklevel=3,
        )
    (Hz,) = ad.gradient(ad.dot(f, ad.constant(z)), [x], create_graph=True)
    return ad.dot(Hz, ad.constant(r)), report


def surrogate_logdet_grad_objective(
    layer: FlowLayer,
    x,
    cg_atol: float = 1e-3,
    seed: int = 0,
    *,
    params: Mapping[str, ad.Node] | None = None,
    step: int = 0,
    layer_index: int = 0,
    rows=None,
    max_iter: int | None = None,
) -> SurrogateResult:
    """Scalar whose parameter gradient is an unbiased estimate of grad log det H.

    One Rademacher probe per row, keyed on ``(seed, step, layer_index, row)``,
    summed over the batch. Only the gradient is meaningful; the value is
    not a log-determinant.
    """
    if params is None:
        params = layer.params.nodes(trainable=True)
    x = ensure_input(x)
    n, d = x.shape
    rows = np.arange(n) if rows is None else np.asarray(rows)
    r = rademacher((seed, step, layer_index), d, rows)
    f = _grad_map(params, layer.config, x)
    obj, report = surrogate_from_map(f, x, r, cg_atol, max_iter)
    return SurrogateResult(obj, f, x, report, params)


@dataclass
class TrainingLoss:
    loss: ad.Node
    params: dict[str, ad.Node]
    reports: list[SolverReport]
    output: np.ndarray


def nll_training_loss(
    stack: FlowStack,
    x_batch,
    cg_atol: float = 1e-3,
    seed: int = 0,
    *,
    step: int = 0,
    rows=None,
    params: dict[str, ad.Node] | None = None,
    max_iter: int | None = None,
) -> TrainingLoss:
    """Batch-summed negative log-likelihood surrogate.

    Its gradient is the stochastic maximum-likelihood gradient. Its value
    replaces each log-det with the surrogate, so monitor with
    :func:`log_density` instead.
    """
    stack._check()
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    n, d = x_batch.shape
    if n == 0:
        raise ValueError("empty batch")
    if params is None:
        params = stack.param_nodes(trainable=True)
    h = ad.constant(x_batch)
    total = None
    reports = []
    for i, layer in enumerate(stack.layers):
        if stack.actnorm:
            s = params[f"block{i}.pre.scale"]
            h = ad.add(ad.mul(h, s), params[f"block{i}.pre.shift"])
            logs = ad.scale(ad.total(ad.elementwise(s, ad.LOG)), float(n))
            total = logs if total is None else ad.add(total, logs)
        res = surrogate_logdet_grad_objective(
            layer, h, cg_atol, seed, params=_block_nodes(params, i), step=step, layer_index=i, rows=rows,
            max_iter=max_iter,
        )
        reports.append(res.report)
        total = res.objective if total is None else ad.add(total, res.objective)
        h = res.output
    base = ad.scale(ad.squared_norm(h), -0.5)
    total = ad.add(total, ad.add(base, ad.constant(-0.5 * n * d * LOG_2PI)))
    return TrainingLoss(ad.neg(total), params, reports, h.value)


# ---------------------------------------------------------------------------
# optimal transport diagnostics


def transport_cost(stack: FlowStack, x_batch) -> float:
    """Mean squared distance each input travels through the whole stack."""
    x = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    y = stack_forward(stack, x)
    return float(np.mean(np.sum((x - y) ** 2, axis=1)))


def gaussian_kl_to_standard(mean, cov) -> float:
    """KL( N(mean, cov) || N(0, I) )."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    d = mean.shape[0]
    return 0.5 * (np.trace(cov) + mean @ mean - d - exact_logdet(cov))


def gaussian_ot_reference(mean, cov) -> tuple[float, Callable[[np.ndarray, np.ndarray], float]]:
    """Closed-form W2^2 from N(mean, cov) to N(0, I), plus the KL diagnostic."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    lam = np.linalg.eigvalsh(cov)
    if lam.min() <= 0:
        raise IndefiniteError("covariance is not positive definite")
    w2_sq = float(mean @ mean + np.trace(cov) + len(mean) - 2.0 * np.sqrt(lam).sum())
    return w2_sq, gaussian_kl_to_standard
