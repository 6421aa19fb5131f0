from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamState", "NonFiniteGradient", "adam_step", "clip_grad_norm"]


class NonFiniteGradient(FloatingPointError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"non-finite gradient for {', '.join(self.names[:5])}; Adam step rejected")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam update. Returns ``(new_params, state)``.

    ``state`` is updated in place. A non-finite gradient rejects the whole
    step and leaves params and state untouched.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(bad)
    for k, g in grads.items():
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {k} {np.shape(params[k])}")
    b1, b2 = betas
    t = state.step + 1
    out = dict(params)
    for k, g in grads.items():
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        state.m[k], state.v[k] = np.asarray(m, dtype=np.float64), np.asarray(v, dtype=np.float64)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    state.step = t
    return out, state


def clip_grad_norm(grads, max_norm: float):
    """Rescale all gradients together so their global 2-norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads, total
    c = max_norm / total
    return {k: g * c for k, g in grads.items()}, total
