"""Matrix-free solvers used by the flow.

Operators are plain callables. CG and Lanczos work on a batch of
independent systems at once: the operator maps an ``(n, d)`` array to an
``(n, d)`` array and row ``i`` only ever sees system ``i``. A single
``(d,)`` vector is treated as a batch of one.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SolverReport",
    "NumericalBreakdown",
    "IndefiniteError",
    "StagnationError",
    "conjugate_gradient",
    "lbfgs_minimize",
    "hutchinson_probe",
    "rademacher",
    "lanczos",
    "slq_logdet",
    "exact_logdet",
]

logger = logging.getLogger(__name__)

Operator = Callable[[np.ndarray], np.ndarray]


class NumericalBreakdown(ArithmeticError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class IndefiniteError(np.linalg.LinAlgError):
    """The operator is not positive definite to working precision."""


class StagnationError(RuntimeError):
    def __init__(self, message: str, x_best: np.ndarray, report: "SolverReport"):
        super().__init__(message)
        self.x_best = x_best
        self.report = report


@dataclass
class SolverReport:
    call_type: str
    iterations: int = 0
    residual_inf: float = math.inf
    converged: bool = False
    hvp_calls: int = 0
    per_sample_iterations: np.ndarray | None = field(default=None, repr=False)

    CSV_FIELDS = ("call_type", "iterations", "hvp_calls", "residual_inf", "converged")

    def csv_row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.CSV_FIELDS}

    @classmethod
    def to_csv(cls, reports) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cls.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.csv_row())
        return buf.getvalue()


def _batched(v):
    v = np.asarray(v, dtype=np.float64)
    return (v[None, :], True) if v.ndim == 1 else (v, False)


def conjugate_gradient(H: Operator, v, atol: float = 1e-3, max_iter: int | None = None):
    """Solve ``H z = v`` from ``z = 0`` for SPD ``H``.

    Each row stops at the first iterate with ``|H z - v|_inf < atol``. The
    residual is the recursively updated one, which equals ``H z - v`` up to
    rounding.

    Returns
    -------
    z : ndarray, same shape as ``v``
    report : SolverReport
        ``per_sample_iterations`` holds the iterate count of each row.
    """
    if atol <= 0:
        raise ValueError("atol must be positive")
    b, single = _batched(v)
    n, d = b.shape
    max_iter = d if max_iter is None else max_iter
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    z = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = np.einsum("ij,ij->i", r, r)
    res = np.abs(r).max(axis=1)
    active = res >= atol
    iters = np.zeros(n, dtype=int)
    calls = 0
    while active.any() and calls < max_iter:
        Hp = np.asarray(H(p[0] if single else p), dtype=np.float64).reshape(n, d)
        calls += 1
        pHp = np.einsum("ij,ij->i", p, Hp)
        if not np.all(np.isfinite(Hp[active])) or np.any(pHp[active] <= 0):
            raise NumericalBreakdown("CG curvature is non-positive or non-finite", calls)
        alpha = np.where(active, rr / np.where(active, pHp, 1.0), 0.0)
        z += alpha[:, None] * p
        r -= alpha[:, None] * Hp
        rr_new = np.einsum("ij,ij->i", r, r)
        if not np.all(np.isfinite(rr_new)):
            raise NumericalBreakdown("CG residual is non-finite", calls)
        iters += active
        res = np.abs(r).max(axis=1)
        beta = np.where(active, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        p = np.where(active[:, None], r + beta[:, None] * p, 0.0)
        rr = rr_new
        active = active & (res >= atol)

    report = SolverReport(
        "cg",
        iterations=int(iters.max(initial=0)),
        residual_inf=float(res.max(initial=0.0)),
        converged=bool(not active.any()),
        hvp_calls=calls,
        per_sample_iterations=iters,
    )
    return (z[0] if single else z), report


def lbfgs_minimize(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    history: int = 10,
    grad_tol: float = 1e-6,
    max_iter: int = 500,
    c1: float = 1e-4,
    shrink: float = 0.5,
    max_shrinks: int = 50,
):
    """L-BFGS with the two-loop recursion and Armijo backtracking.

    ``objective(x)`` returns ``(value, gradient)`` for an ``x`` of any
    shape. Stops when ``|grad|_inf <= grad_tol``.
    """
    if history < 1:
        raise ValueError("history must be >= 1")
    x = np.array(x0, dtype=np.float64)
    shape = x.shape
    x = x.ravel()

    def fg(x):
        f, g = objective(x.reshape(shape))
        return float(f), np.asarray(g, dtype=np.float64).ravel()

    f, g = fg(x)
    calls = 1
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    report = SolverReport("lbfgs", residual_inf=float(np.abs(g).max(initial=0.0)), hvp_calls=calls)
    it = 0
    while report.residual_inf > grad_tol and it < max_iter:
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            q *= min(1.0, 1.0 / max(np.abs(g).sum(), 1e-300))
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            b = (y @ q) / (y @ s)
            q += (a - b) * s
        p = -q
        slope = g @ p
        if not slope < 0:
            S.clear()
            Y.clear()
            p = -g * min(1.0, 1.0 / max(np.abs(g).sum(), 1e-300))
            slope = g @ p

        step = 1.0
        slack = 16 * np.finfo(float).eps * abs(f)
        for _ in range(max_shrinks):
            x_new = x + step * p
            f_new, g_new = fg(x_new)
            calls += 1
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope + slack:
                break
            step *= shrink
        else:
            report.iterations, report.hvp_calls = it, calls
            raise StagnationError(
                f"line search failed after {max_shrinks} shrinks; |grad|_inf={report.residual_inf:.3e}",
                x.reshape(shape).copy(),
                report,
            )
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * (s @ s):
            S.append(s)
            Y.append(y)
            if len(S) > history:
                del S[0], Y[0]
        x, f, g = x_new, f_new, g_new
        it += 1
        report.residual_inf = float(np.abs(g).max(initial=0.0))

    report.iterations = it
    report.hvp_calls = max(calls, it)
    report.converged = report.residual_inf <= grad_tol
    return x.reshape(shape), report


# ---------------------------------------------------------------------------
# probes

def _splitmix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _key(*parts) -> np.ndarray:
    h = np.zeros((), dtype=np.uint64)
    for p in parts:
        p = np.asarray(p)
        if p.dtype != np.uint64:
            p = p.astype(np.int64).astype(np.uint64)
        h = _splitmix64(_splitmix64(h) ^ p)
    return h


def rademacher(key_parts, d: int, rows=None) -> np.ndarray:
    """Counter-based Rademacher draws.

    Entry ``(i, j)`` is the low bit of ``splitmix64(key(key_parts, rows[i]) ^ j)``
    mapped to +-1, so each row depends only on its own key. ``rows=None``
    gives a single ``(d,)`` vector.
    """
    base = _key(*key_parts)
    keys = np.atleast_1d(base if rows is None else _key(base, np.asarray(rows)))
    cols = np.arange(d, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _splitmix64(_splitmix64(keys[:, None]) ^ cols[None, :]) >> np.uint64(63)
    out = 1.0 - 2.0 * bits.astype(np.float64)
    return out[0] if rows is None else out


def hutchinson_probe(seed: int, d: int) -> np.ndarray:
    """One i.i.d. +-1 vector, reproducible from ``seed``."""
    return rademacher((seed,), d)


# ---------------------------------------------------------------------------
# log-determinants


def lanczos(H: Operator, v0: np.ndarray, m: int, breakdown_tol: float = 1e-12):
    """Batched Lanczos with full reorthogonalization.

    Returns ``(alpha, beta, steps)``: diagonals ``(n, m)``, off-diagonals
    ``(n, m-1)`` and the number of steps each row completed before its
    Krylov space became invariant.
    """
    n, d = v0.shape
    Q = np.zeros((n, m, d))
    alpha = np.zeros((n, m))
    beta = np.zeros((n, max(m - 1, 0)))
    steps = np.full(n, m)
    norm0 = np.linalg.norm(v0, axis=1)
    q = v0 / norm0[:, None]
    live = np.ones(n, dtype=bool)
    calls = 0
    for j in range(m):
        Q[:, j] = q
        w = np.asarray(H(q), dtype=np.float64).reshape(n, d)
        calls += 1
        a = np.einsum("ij,ij->i", q, w)
        alpha[:, j] = np.where(live, a, alpha[:, j])
        if j == m - 1:
            break
        for _ in range(2):
            coeff = np.einsum("ikd,id->ik", Q[:, : j + 1], w)
            w = w - np.einsum("ik,ikd->id", coeff, Q[:, : j + 1])
        b = np.linalg.norm(w, axis=1)
        scale = np.maximum(np.abs(alpha[:, : j + 1]).max(axis=1), 1.0)
        stop = live & (b <= breakdown_tol * scale)
        steps[stop] = j + 1
        live &= ~stop
        beta[:, j] = np.where(live, b, 0.0)
        q = np.where(live[:, None], w / np.where(b > 0, b, 1.0)[:, None], 0.0)
        if not live.any():
            break
    return alpha, beta, steps, calls


def _quadrature_logdet(alpha, beta, steps, norm_sq):
    n, m = alpha.shape
    T = np.zeros((n, m, m))
    idx = np.arange(m)
    diag = np.where(idx[None, :] < steps[:, None], alpha, 1.0)
    T[:, idx, idx] = diag
    if m > 1:
        T[:, idx[:-1], idx[1:]] = beta
        T[:, idx[1:], idx[:-1]] = beta
    theta, U = np.linalg.eigh(T)
    if np.any(theta <= 0):
        raise IndefiniteError("non-positive Ritz value in Lanczos quadrature")
    tau2 = U[:, 0, :] ** 2
    return norm_sq * np.einsum("ik,ik->i", tau2, np.log(theta))


def slq_logdet(H: Operator, dim: int, probes: int = 32, m: int = 20, seed: int = 0, batch: int | None = None):
    """Stochastic Lanczos quadrature estimate of ``log det H``.

    With ``batch=n`` the operator acts on ``(n, dim)`` arrays holding ``n``
    independent SPD systems and one estimate per row is returned.
    Probe ``k`` row ``i`` uses the Rademacher key ``(seed, k, i)``; results
    are summed in probe order, so the estimate does not depend on the
    order probes are evaluated in.
    """
    m = min(m, dim)
    if m < 1:
        raise ValueError("need at least one Lanczos step")
    rows = np.arange(1 if batch is None else batch)
    per_probe = []
    calls = 0
    for k in range(probes):
        v = rademacher((seed, k), dim, rows)
        alpha, beta, steps, c = lanczos(H if batch is not None else (lambda q: H(q[0])[None]), v, m)
        calls += c
        per_probe.append((k, _quadrature_logdet(alpha, beta, steps, np.einsum("ij,ij->i", v, v))))
    per_probe.sort(key=lambda t: t[0])
    est = np.zeros(len(rows))
    for _, e in per_probe:
        est = est + e
    est /= probes
    report = SolverReport("slq", iterations=m, residual_inf=0.0, converged=True, hvp_calls=calls)
    return (float(est[0]) if batch is None else est), report


def exact_logdet(H) -> np.ndarray | float:
    """``log det`` of an SPD matrix (or a stack of them) via Cholesky."""
    H = np.asarray(H, dtype=np.float64)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteError(f"Cholesky failed: {exc}") from None
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    out = 2.0 * np.log(diag).sum(axis=-1)
    return float(out) if out.ndim == 0 else out
