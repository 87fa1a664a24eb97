"""Time-dependent vector fields with Jacobian-vector products and divergences.

Points are arrays of shape ``(n, D)`` (a batch) or ``(D,)``; ``t`` is a scalar.
Every field exposes

* ``evaluate(t, x)``: the velocity ``u_t(x)``,
* ``jvp(t, x, v)``: ``(du/dx) v``,
* ``divergence(t, x)``: the trace of ``du/dx``,

and optionally the second-order quantities needed to propagate the
push-forward score without a score oracle: ``div((du/dx) v)`` exactly, or the
quadratic form ``eps^T d/dx[(du/dx) v] eps`` for Hutchinson estimation.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from .errors import DomainError, UnsupportedCapabilityError
from .numerics import rademacher

FD_STEP = 1e-6


class FlowField(ABC):
    """Base contract. Subclasses must implement ``evaluate``.

    The defaults fall back to central finite differences for ``jvp`` and to a
    basis-vector sum for ``divergence``; analytic fields override both.
    """

    dim: int
    score_source = None  # a DiffusedTarget when the field has a known marginal

    @abstractmethod
    def evaluate(self, t, x):
        ...

    def __call__(self, t, x):
        return self.evaluate(t, x)

    def jvp(self, t, x, v):
        x = np.asarray(x, dtype=float)
        v = np.broadcast_to(v, x.shape)
        scale = np.maximum(1.0, np.linalg.norm(x, axis=-1, keepdims=True))
        h = FD_STEP * scale / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-300)
        return (self.evaluate(t, x + h * v) - self.evaluate(t, x - h * v)) / (2.0 * h)

    def divergence(self, t, x):
        x = np.asarray(x, dtype=float)
        total = np.zeros(x.shape[:-1])
        for i in range(x.shape[-1]):
            e = np.zeros(x.shape[-1])
            e[i] = 1.0
            total = total + self.jvp(t, x, e)[..., i]
        return total

    def evaluate_with_divergence(self, t, x):
        return self.evaluate(t, x), self.divergence(t, x)

    def evaluate_full(self, t, x):
        """``(u, div u, score)``; requires a score source."""
        u, div = self.evaluate_with_divergence(t, x)
        return u, div, self.score_source.score(t, x)

    @property
    def has_second_order(self) -> bool:
        return False

    def second_order_divergence(self, t, x, v):
        """``div_x((du/dx) v)`` with ``v`` held fixed."""
        raise UnsupportedCapabilityError(f"{type(self).__name__} has no second-order divergence")

    def second_order_quadform(self, t, x, v, eps):
        """``eps^T J eps`` where ``J`` is the Jacobian of ``x -> (du/dx) v``."""
        raise UnsupportedCapabilityError(f"{type(self).__name__} has no second-order derivative")


class PFODEField(FlowField):
    """Probability-flow drift ``u_t(x) = f(t) x - g(t)^2 / 2 * score_t(x)``."""

    def __init__(self, schedule, target):
        self.schedule = schedule
        self.target = target
        self.score_source = target.bind(schedule)
        self.dim = target.dim

    def evaluate(self, t, x):
        f, g2 = self.schedule.drift_coeffs(t)
        return f * x - (0.5 * g2) * self.target.score(self.schedule, t, x)

    def evaluate_full(self, t, x):
        f, g2 = self.schedule.drift_coeffs(t)
        score, lap = self.target.score_and_laplacian(self.schedule, t, x)
        return f * x - (0.5 * g2) * score, f * self.dim - (0.5 * g2) * lap, score

    def evaluate_with_divergence(self, t, x):
        u, div, _ = self.evaluate_full(t, x)
        return u, div

    def jvp(self, t, x, v):
        f, g2 = self.schedule.drift_coeffs(t)
        return f * np.broadcast_to(v, np.shape(x)) - (0.5 * g2) * self.target.score_hvp(self.schedule, t, x, v)

    def divergence(self, t, x):
        f, g2 = self.schedule.drift_coeffs(t)
        return f * self.dim - (0.5 * g2) * self.target.laplacian_log_density(self.schedule, t, x)

    @property
    def has_second_order(self) -> bool:
        return True

    def second_order_divergence(self, t, x, v):
        # f v is constant in x, so only the score term contributes
        _, g2 = self.schedule.drift_coeffs(t)
        return -(0.5 * g2) * self.target.laplacian_grad_dot(self.schedule, t, x, v)

    def second_order_quadform(self, t, x, v, eps):
        _, g2 = self.schedule.drift_coeffs(t)
        return -(0.5 * g2) * self.target.third_derivative(self.schedule, t, x, v, eps, eps)


class LinearField(FlowField):
    """``u_t(x) = A(t) x + c(t)``; ``A`` and ``c`` may be constants or callables of t."""

    def __init__(self, A, c=None):
        self._A = A
        self._c = c
        A0 = np.asarray(A(1.0) if callable(A) else A, dtype=float)
        if A0.ndim != 2 or A0.shape[0] != A0.shape[1]:
            raise DomainError(f"A must be square, got shape {A0.shape}")
        self.dim = A0.shape[0]

    def matrix(self, t):
        return np.asarray(self._A(t) if callable(self._A) else self._A, dtype=float)

    def offset(self, t):
        if self._c is None:
            return 0.0
        return np.asarray(self._c(t) if callable(self._c) else self._c, dtype=float)

    def evaluate(self, t, x):
        return np.asarray(x) @ self.matrix(t).T + self.offset(t)

    def jvp(self, t, x, v):
        return np.broadcast_to(np.asarray(v) @ self.matrix(t).T, np.shape(x)).copy()

    def divergence(self, t, x):
        return np.full(np.shape(x)[:-1], np.trace(self.matrix(t)))

    @property
    def has_second_order(self) -> bool:
        return True

    def second_order_divergence(self, t, x, v):
        return np.zeros(np.shape(x)[:-1])

    def second_order_quadform(self, t, x, v, eps):
        return np.zeros(np.shape(x)[:-1])


def pf_ode_field(schedule, target) -> PFODEField:
    return PFODEField(schedule, target)


def _check_probes(n_probes):
    if int(n_probes) < 1:
        raise DomainError(f"need at least one probe, got {n_probes}")
    return int(n_probes)


def hutchinson_divergence(field, t, x, rng, n_probes: int = 1):
    """Rademacher estimate of ``div u_t(x)`` averaged over ``n_probes`` probes.

    ``rng`` may be one generator or one generator per batch row.
    """
    n_probes = _check_probes(n_probes)
    x = np.asarray(x, dtype=float)
    total = np.zeros(x.shape[:-1])
    for _ in range(n_probes):
        eps = rademacher(rng, x.shape)
        total = total + np.einsum("...d,...d->...", eps, field.jvp(t, x, eps))
    return total / n_probes


def second_order_divergence(field, t, x, v, rng=None, n_probes: int = 1, exact: bool = False):
    """``div((du/dx) v)``: exact when ``exact`` is set, else a Rademacher estimate."""
    if exact:
        return field.second_order_divergence(t, x, v)
    if not field.has_second_order:
        raise UnsupportedCapabilityError(f"{type(field).__name__} has no second-order derivative")
    n_probes = _check_probes(n_probes)
    if rng is None:
        raise DomainError("a random generator is required for the Hutchinson estimate")
    x = np.asarray(x, dtype=float)
    total = np.zeros(x.shape[:-1])
    for _ in range(n_probes):
        eps = rademacher(rng, x.shape)
        total = total + field.second_order_quadform(t, x, v, eps)
    return total / n_probes
