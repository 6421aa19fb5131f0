"""Softplus-type activations.

Each base function is the convolution of ReLU with a zero-mean density, so
its first derivative is that density's CDF and its second derivative the
density itself. Higher derivatives are available too because the autodiff
engine differentiates a Hessian-vector product with respect to weights,
which needs the third.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import hermite_e, polynomial
from scipy.special import expit, ndtr

__all__ = ["Activation", "parse_activation", "relu"]

BASES = ("logistic", "gaussian", "laplace")
VARIANTS = ("plain", "symmetrized", "offset")

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def relu(x):
    return np.maximum(x, 0.0)


def _logistic_poly(order: int) -> np.ndarray:
    # d^k/dx^k sigmoid(x) written as a polynomial in sigmoid(x)
    coef = np.array([0.0, 1.0])
    dsig = np.array([0.0, 1.0, -1.0])
    for _ in range(order - 1):
        coef = polynomial.polymul(polynomial.polyder(coef), dsig)
    return coef


def _logistic(x: np.ndarray, order: int) -> np.ndarray:
    if order == 0:
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = expit(x)
    if order == 1:
        return sig
    return polynomial.polyval(sig, _logistic_poly(order))


def _gaussian(x: np.ndarray, order: int) -> np.ndarray:
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    if order == 0:
        # x*Phi(x) + phi(x), written as relu(x) + s(-|x|) so the ReLU part is exact
        t = np.abs(x)
        return np.maximum(x, 0.0) + np.maximum(pdf - t * ndtr(-t), 0.0)
    if order == 1:
        return ndtr(x)
    k = order - 2
    coef = np.zeros(k + 1)
    coef[k] = (-1.0) ** k
    return hermite_e.hermeval(x, coef) * pdf


def _laplace(x: np.ndarray, order: int) -> np.ndarray:
    e = np.exp(-np.abs(x))
    if order == 0:
        return np.maximum(x, 0.0) + 0.5 * e
    if order == 1:
        return np.where(x < 0, 0.5 * e, 1.0 - 0.5 * e)
    # derivatives of the density away from the kink at 0
    return (-np.sign(x)) ** (order - 2) * 0.5 * e


_BASE_FNS = {"logistic": _logistic, "gaussian": _gaussian, "laplace": _laplace}


@dataclass(frozen=True)
class Activation:
    """A softplus-type activation ``s`` with an optional variant and gain.

    ``gain=a`` evaluates ``s(a*x)/a``. The symmetrized variant subtracts
    ``x/2`` (derivative range (-1/2, 1/2)); the offset variant subtracts
    ``s(0)`` so the activation passes through the origin.
    """

    base: str = "gaussian"
    variant: str = "plain"
    gain: float = 1.0

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"unknown activation base {self.base!r}; expected one of {BASES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown activation variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.gain > 0 or not math.isfinite(self.gain):
            raise ValueError(f"activation gain must be positive, got {self.gain}")

    @property
    def name(self) -> str:
        return str(self)

    def __str__(self):
        return f"{self.base}+{self.variant}@gain={self.gain:g}"

    def derivative(self, x, order: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        a = self.gain
        out = _BASE_FNS[self.base](a * x, order)
        if order != 1:
            out = out * a ** (order - 1)
        if self.variant == "symmetrized":
            if order == 0:
                out = out - 0.5 * x
            elif order == 1:
                out = out - 0.5
        elif self.variant == "offset" and order == 0:
            out = out - _BASE_FNS[self.base](np.zeros(()), 0) / a
        return out

    def __call__(self, x):
        return self.derivative(x, 0)

    def deriv(self, x):
        return self.derivative(x, 1)

    def deriv2(self, x):
        return self.derivative(x, 2)

    @property
    def twice_differentiable(self) -> bool:
        return self.base != "laplace"


_PATTERN = re.compile(r"^(?P<base>[a-z]+)(?:\+(?P<variant>[a-z]+))?(?:@gain=(?P<gain>[^@+]+))?$")


def parse_activation(text: str) -> Activation:
    """Parse the canonical encoding, e.g. ``"gaussian+symmetrized@gain=1"``.

    The variant and gain parts are optional.
    """
    m = _PATTERN.match(text.strip())
    if m is None:
        raise ValueError(f"malformed activation spec {text!r}")
    gain = float(m["gain"]) if m["gain"] is not None else 1.0
    return Activation(m["base"], m["variant"] or "plain", gain)
