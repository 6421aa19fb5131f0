"""Minibatch maximum-likelihood training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import autodiff as ad
from ..flow import (
    EXACT_MAX_DIM,
    FlowStack,
    gaussian_kl_to_standard,
    gaussian_ot_reference,
    log_density,
    nll_training_loss,
)
from ..solvers import IndefiniteError, NumericalBreakdown
from .checkpoint import Checkpoint
from .config import TrainConfig
from .datasets import Dataset
from .optim import AdamState, NonFiniteGradient, adam_step, clip_grad_norm

__all__ = ["HISTORY_FIELDS", "History", "TrainingAborted", "build_stack", "evaluate", "train", "gaussian_baseline_nll", "moment_w2_bound"]

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "loss_proxy", "val_nll", "transport_cost", "kl_diag", "cg_iters_mean")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append({k: row.get(k, math.nan) for k in HISTORY_FIELDS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(float(v)) if k != "step" else int(v) for k, v in r.items()})


def build_stack(config: TrainConfig, dim: int) -> FlowStack:
    return FlowStack.create(config.icnn_config(dim), config.n_flows, seed=config.seed, actnorm=config.actnorm)


def gaussian_baseline_nll(train: np.ndarray, test: np.ndarray) -> float:
    """Mean test NLL of the maximum-likelihood full-covariance Gaussian."""
    mu = train.mean(axis=0)
    cov = np.atleast_2d(np.cov(train, rowvar=False, bias=True))
    d = train.shape[1]
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, (test - mu).T)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return float(np.mean(0.5 * (z * z).sum(axis=0) + 0.5 * logdet + 0.5 * d * math.log(2 * math.pi)))


def evaluate(stack: FlowStack, x: np.ndarray, config: TrainConfig, dataset: Dataset | None = None) -> dict:
    """Validation metrics: NLL, transport cost and the moment KL of the pushforward."""
    mode = config.val_mode
    if mode == "auto":
        mode = "exact" if stack.dim <= EXACT_MAX_DIM else "slq"
    res = log_density(stack, x, mode=mode, probes=config.slq_probes, lanczos_steps=config.slq_steps, seed=config.seed)
    y = res.output
    sq = np.sum((x - y) ** 2, axis=1)
    out = {
        "val_nll": float(-res.logp.mean()),
        "transport_cost": float(sq.mean()),
        "transport_cost_se": float(sq.std(ddof=1) / math.sqrt(len(sq))) if len(sq) > 1 else math.nan,
    }
    if len(y) > stack.dim:
        # KL of the moment-matched Gaussian of the pushforward to the base
        out["kl_diag"] = float(gaussian_kl_to_standard(y.mean(axis=0), np.atleast_2d(np.cov(y, rowvar=False))))
    if dataset is not None and dataset.kind == "gaussian_ot" and len(y) > stack.dim:
        out["moment_w2_bound"] = moment_w2_bound(x, y)
    return out


def moment_w2_bound(x: np.ndarray, y: np.ndarray) -> float:
    """Squared W2 between Gaussians matching the moments of ``x`` and ``y``.

    No coupling of the two samples can have a smaller mean squared
    distance, so the transport cost of any map sits above this value.
    """
    mx, my = x.mean(axis=0), y.mean(axis=0)
    sx = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
    sy = np.atleast_2d(np.cov(y, rowvar=False, bias=True))
    root = _sqrtm_psd(sx)
    cross = np.linalg.eigvalsh(root @ sy @ root)
    return float(np.sum((mx - my) ** 2) + np.trace(sx) + np.trace(sy) - 2.0 * np.sqrt(np.clip(cross, 0, None)).sum())


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    lam, q = np.linalg.eigh(a)
    return (q * np.sqrt(np.clip(lam, 0, None))) @ q.T


def _batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def train(
    stack: FlowStack,
    dataset: Dataset,
    config: TrainConfig,
    *,
    out_dir=None,
    resume: Checkpoint | None = None,
    callback: Callable[[dict], None] | None = None,
    max_steps: int | None = None,
    extra: dict | None = None,
):
    """Fit ``stack`` to ``dataset.train`` by stochastic maximum likelihood.

    Returns ``(stack, history, checkpoint)``. The trajectory is a pure
    function of ``(config, dataset)``: shuffles are keyed on
    ``(seed, epoch)`` and probes on ``(seed, step, layer, sample index)``.
    With ``out_dir`` the history CSV and checkpoints are written there.
    ``extra`` is stored verbatim in the checkpoint header.
    """
    train_x = dataset.train
    train_ids = dataset.indices("train")
    val_x = dataset.val if len(dataset.indices("val")) else train_x
    val_x = val_x[: config.val_max]
    n = len(train_x)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = schedule_steps = config.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        stack, adam, step = resume.stack, resume.adam, resume.step
        history = History(list(resume.extra.get("history", [])))
        extra = {**{k: v for k, v in resume.extra.items() if k != "history"}, **(extra or {})}
    else:
        adam, step, history = AdamState(), 0, History()
    extra = dict(extra or {})
    ckpt = Checkpoint(stack, config, adam, step, {**extra, "history": history.rows})

    def save_checkpoint():
        ckpt.step = step
        ckpt.extra = {**extra, "history": history.rows}
        if out_dir is not None:
            ckpt.save(out_dir / "checkpoint.bin")
            history.to_csv(out_dir / "history.csv")

    if total_steps == 0 or step >= total_steps:
        return stack, history, ckpt

    if not stack.initialized:
        first = _batch_order(n, config.seed, 0)[: config.batch_size]
        stack.initialize(train_x[first])

    w2_sq = None
    if dataset.kind == "gaussian_ot" and dataset.mean is not None:
        w2_sq, _ = gaussian_ot_reference(dataset.mean, dataset.cov)

    recent_loss, recent_cg = [], []
    while step < total_steps:
        epoch, b = divmod(step, steps_per_epoch)
        order = _batch_order(n, config.seed, epoch)
        idx = order[b * config.batch_size : (b + 1) * config.batch_size]
        xb = train_x[idx]

        try:
            tl = nll_training_loss(stack, xb, config.cg_atol, config.seed, step=step, rows=train_ids[idx])
        except (NumericalBreakdown, IndefiniteError) as exc:
            raise TrainingAborted(f"step {step}: {exc}") from exc
        names = list(tl.params)
        grads_nodes = ad.gradient(tl.loss, [tl.params[k] for k in names])
        m = len(xb)
        loss_value = float(tl.loss.value) / m
        if not math.isfinite(loss_value):
            raise TrainingAborted(f"non-finite loss at step {step}; last checkpoint kept")
        grads = {k: g.value / m for k, g in zip(names, grads_nodes)}
        if config.grad_clip_norm is not None:
            grads, _ = clip_grad_norm(grads, config.grad_clip_norm)
        try:
            new_params, adam = adam_step(stack.arrays(), grads, adam, config.lr_at(step, schedule_steps))
        except NonFiniteGradient as exc:
            raise TrainingAborted(f"step {step}: {exc}") from exc
        stack.set_arrays(new_params)
        stack.project()
        ckpt.adam = adam
        step += 1
        recent_loss.append(loss_value)
        recent_cg.append(np.mean([r.per_sample_iterations.mean() for r in tl.reports]))

        if step % config.log_every == 0 or step == total_steps:
            row = {"step": step, "loss_proxy": float(np.mean(recent_loss)), "cg_iters_mean": float(np.mean(recent_cg))}
            row.update(evaluate(stack, val_x, config, dataset))
            history.append(row)
            recent_loss, recent_cg = [], []
            logger.info("step %d %s", step, row)
            if callback is not None:
                callback(dict(row, w2_sq=w2_sq))
            if out_dir is not None:
                history.to_csv(out_dir / "history.csv")
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint()

    save_checkpoint()
    return stack, history, ckpt
