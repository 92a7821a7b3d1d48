"""Scalar sinh-arcsinh bijections used as per-state innovation flows.

A layer maps ``x -> sinh(delta * asinh(x) + gamma)`` with skew ``gamma`` and
tail weight ``delta = softplus(tau) + DELTA_FLOOR``.  Layers compose in
order; the inverse runs them backwards.  The Tensor functions here are the
ones the prior differentiates through; :func:`flow_forward` and
:func:`flow_inverse_with_logdet` are numpy conveniences on top of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

DELTA_FLOOR = 1e-3


def tau_from_delta(delta):
    """Inverse of ``softplus(tau) + DELTA_FLOOR``."""
    d = np.asarray(delta, dtype=float) - DELTA_FLOOR
    if np.any(d <= 0):
        raise ValueError(f"tail weight must exceed {DELTA_FLOOR}")
    return np.where(d > 30, d, np.log(np.expm1(np.minimum(d, 30))))


@dataclass
class FlowParams:
    """Per-layer skew and raw tail-weight for one scalar flow."""

    gamma: np.ndarray = field(default_factory=lambda: np.zeros(1))
    tau: np.ndarray = field(default_factory=lambda: tau_from_delta(np.ones(1)))

    def __post_init__(self):
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        self.tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        if self.gamma.shape != self.tau.shape or self.gamma.ndim != 1 or self.gamma.size < 1:
            raise ValueError("gamma and tau must be equal-length 1-d arrays with L >= 1")

    @classmethod
    def identity(cls, layers: int = 1) -> "FlowParams":
        return cls(np.zeros(layers), tau_from_delta(np.ones(layers)))

    @classmethod
    def from_delta(cls, gamma, delta) -> "FlowParams":
        return cls(gamma, tau_from_delta(delta))

    @property
    def delta(self) -> np.ndarray:
        t = self.tau
        return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t))) + DELTA_FLOOR

    @property
    def layers(self) -> int:
        return self.gamma.size


def tail_weight(tau) -> dc.Tensor:
    return dc.softplus(tau) + DELTA_FLOOR


def forward(eps, layers) -> dc.Tensor:
    """Push ``eps`` through ``layers`` = [(gamma, tau), ...] in order."""
    x = dc.as_tensor(eps)
    for gamma, tau in layers:
        x = dc.sinh(tail_weight(tau) * dc.asinh(x) + gamma)
    return x


def inverse_with_logdet(u, layers) -> tuple[dc.Tensor, dc.Tensor]:
    """Return ``f^{-1}(u)`` and ``log|d f^{-1}(u) / du|``.

    ``gamma``/``tau`` in each layer must broadcast against ``u`` along
    trailing axes.
    """
    y = dc.as_tensor(u)
    logdet = None
    for gamma, tau in reversed(layers):
        delta = tail_weight(tau)
        z = (dc.asinh(y) - gamma) / delta
        term = dc.logcosh(z) - dc.log(delta) - 0.5 * dc.log(1.0 + dc.square(y))
        logdet = term if logdet is None else logdet + term
        y = dc.sinh(z)
    return y, logdet


def _layers(params: FlowParams):
    return [(params.gamma[i], params.tau[i]) for i in range(params.layers)]


def flow_forward(params: FlowParams, eps):
    """numpy forward map; accepts scalars or arrays."""
    with dc.no_grad():
        return forward(np.asarray(eps, dtype=float), _layers(params)).value


def flow_inverse_with_logdet(params: FlowParams, u):
    """numpy inverse map and log-Jacobian of the inverse."""
    with dc.no_grad():
        eps, logdet = inverse_with_logdet(np.asarray(u, dtype=float), _layers(params))
        return eps.value, logdet.value
