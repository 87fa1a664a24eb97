"""Isotropic Gaussian-mixture data distributions with closed-form diffused quantities.

Under the forward kernel ``N(alpha_t x_0, sigma_t^2 I)`` a mixture
``sum_k pi_k N(mu_k, s^2 I)`` stays a mixture with means ``alpha_t mu_k`` and
common variance ``alpha_t^2 s^2 + sigma_t^2``. Every derivative of
``log p_t`` used elsewhere (score, Hessian-vector products, Laplacian, the
gradient of the Laplacian and the full third-derivative contraction) follows
from the responsibilities ``w_k(x)`` and the scaled offsets
``a_k = (alpha_t mu_k - x) / var``:

    score      S   = sum_k w_k a_k
    Hessian    H   = sum_k w_k a_k a_k^T - S S^T - I / var
    Laplacian  L   = sum_k w_k |a_k|^2 - |S|^2 - D / var

All evaluations run in log-space; arrays of points have shape ``(..., D)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DomainError, UndefinedDensityError

APPC3_MEANS = ((-0.3502, -0.6207), (-0.4828, 1.0680), (-0.7789, 0.7565))
APPC3_S2 = 0.005
APPC3_LATENTS = {"z1": (1.3166, -0.2252), "z2": (-0.1504, -0.2165)}


@dataclass(frozen=True)
class DiffusedComponentParams:
    alpha: float
    var: float  # alpha^2 s^2 + sigma^2


@dataclass(frozen=True)
class _Eval:
    """Per-point intermediate quantities shared by the derivative formulas."""

    w: np.ndarray  # (..., K) responsibilities
    a: np.ndarray  # (..., K, D) scaled offsets (alpha mu_k - x) / var
    score: np.ndarray  # (..., D)
    var: float
    log_p: np.ndarray  # (...)


def _dot(u, v):
    return np.einsum("...d,...d->...", u, v)


@dataclass(frozen=True, eq=False)
class GaussianMixtureTarget:
    """Mixture ``sum_k weights[k] N(means[k], s2 I)``; ``s2 = 0`` gives point masses."""

    weights: np.ndarray
    means: np.ndarray
    s2: float = 0.0
    name: str = field(default="custom")

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        if mu.ndim != 2 or mu.shape[0] != w.shape[0]:
            raise ConfigError(f"means shape {mu.shape} does not match {w.shape[0]} weights")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must be positive and sum to 1")
        if not self.s2 >= 0:
            raise ConfigError(f"component variance must be >= 0, got {self.s2}")
        if self.s2 == 0 and mu.shape[0] > 1:
            gaps = np.linalg.norm(mu[:, None] - mu[None], axis=-1)
            if np.any(gaps[np.triu_indices(len(mu), 1)] == 0):
                raise ConfigError("point-mass components must have distinct means")
        w.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "s2", float(self.s2))
        object.__setattr__(self, "_log_w", np.log(w))

    # -- construction ------------------------------------------------------

    @classmethod
    def gaussian(cls, mean, s2: float = 1.0):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(np.ones(1), mean[None], s2, name="gaussian")

    @classmethod
    def preset(cls, name: str):
        if name.lower() == "appc3":
            return cls(np.full(3, 1.0 / 3.0), np.array(APPC3_MEANS), APPC3_S2, name="appC3")
        raise ConfigError(f"unknown target preset {name!r}")

    @classmethod
    def from_config(cls, cfg):
        if isinstance(cfg, str):
            return cls.preset(cfg)
        if "preset" in cfg:
            return cls.preset(cfg["preset"])
        missing = {"weights", "means"} - set(cfg)
        if missing:
            raise ConfigError(f"target config missing {sorted(missing)}")
        weights = np.asarray(cfg["weights"], dtype=float)
        return cls(weights / weights.sum() if cfg.get("normalize") else weights,
                   np.asarray(cfg["means"], dtype=float), float(cfg.get("s2", 0.0)))

    def to_config(self) -> dict:
        if self.name == "appC3":
            return {"preset": "appC3"}
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "s2": self.s2}

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    # -- core evaluation -----------------------------------------------------

    def component_params(self, schedule, t) -> DiffusedComponentParams:
        if t == 0:
            if self.s2 == 0:
                raise UndefinedDensityError("point-mass data distribution has no density at t=0")
            return DiffusedComponentParams(1.0, self.s2)
        alpha, sigma = schedule.alpha_sigma(t)
        return DiffusedComponentParams(alpha, alpha * alpha * self.s2 + sigma * sigma)

    def _evaluate(self, schedule, t, x) -> _Eval:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DomainError(f"points have dimension {x.shape[-1]}, target has {self.dim}")
        p = self.component_params(schedule, t)
        d = p.alpha * self.means - x[..., None, :]
        sq = _dot(d, d)
        log_terms = self._log_w - 0.5 * sq / p.var
        log_norm = logsumexp(log_terms, axis=-1, keepdims=True)
        w = np.exp(log_terms - log_norm)
        w /= w.sum(axis=-1, keepdims=True)  # logsumexp rounding grows with |log_terms|
        a = d / p.var
        score = np.einsum("...k,...kd->...d", w, a)
        log_p = log_norm[..., 0] - 0.5 * self.dim * np.log(2.0 * np.pi * p.var)
        return _Eval(w, a, score, p.var, log_p)

    def score_and_laplacian(self, schedule, t, x):
        """``(score, lap log p)`` from one mixture evaluation."""
        e = self._evaluate(schedule, t, x)
        return e.score, self._laplace_ratio(e, self.dim) - _dot(e.score, e.score)

    def responsibilities(self, schedule, t, x):
        return self._evaluate(schedule, t, x).w

    def log_density(self, schedule, t, x):
        return self._evaluate(schedule, t, x).log_p

    def score(self, schedule, t, x):
        return self._evaluate(schedule, t, x).score

    @staticmethod
    def _hvp(e: _Eval, v):
        av = np.einsum("...kd,...d->...k", e.a, v)
        first = np.einsum("...k,...k,...kd->...d", e.w, av, e.a)
        return first - e.score * _dot(e.score, v)[..., None] - v / e.var

    def score_hvp(self, schedule, t, x, v):
        """Hessian of ``log p_t`` at ``x`` applied to ``v``."""
        e = self._evaluate(schedule, t, x)
        return self._hvp(e, np.broadcast_to(v, e.score.shape))

    def hessian(self, schedule, t, x):
        """Dense Hessian, shape ``(..., D, D)``; intended for small D."""
        e = self._evaluate(schedule, t, x)
        outer = np.einsum("...k,...ki,...kj->...ij", e.w, e.a, e.a)
        return outer - e.score[..., :, None] * e.score[..., None, :] - np.eye(self.dim) / e.var

    @staticmethod
    def _laplace_ratio(e: _Eval, dim):
        # Delta p / p for the mixture
        return np.einsum("...k,...k->...", e.w, np.einsum("...kd,...kd->...k", e.a, e.a)) - dim / e.var

    def laplace_ratio(self, schedule, t, x):
        """``Delta p_t / p_t`` at ``x``."""
        return self._laplace_ratio(self._evaluate(schedule, t, x), self.dim)

    def laplacian_log_density(self, schedule, t, x):
        e = self._evaluate(schedule, t, x)
        return self._laplace_ratio(e, self.dim) - _dot(e.score, e.score)

    def laplacian_grad_dot(self, schedule, t, x, v):
        """Directional derivative of ``Delta log p_t`` along ``v``."""
        e = self._evaluate(schedule, t, x)
        v = np.broadcast_to(v, e.score.shape)
        sq = np.einsum("...kd,...kd->...k", e.a, e.a)
        a_minus_s_v = np.einsum("...kd,...d->...k", e.a, v) - _dot(e.score, v)[..., None]
        term = np.einsum("...k,...k,...k->...", e.w, sq, a_minus_s_v)
        return term - 2.0 * _dot(e.score, v) / e.var - 2.0 * _dot(e.score, self._hvp(e, v))

    def third_derivative(self, schedule, t, x, u, v, w):
        """Third derivative tensor of ``log p_t`` contracted with ``u``, ``v``, ``w``."""
        e = self._evaluate(schedule, t, x)
        shape = e.score.shape
        u, v, w = (np.broadcast_to(z, shape) for z in (u, v, w))
        au = np.einsum("...kd,...d->...k", e.a, u)
        av = np.einsum("...kd,...d->...k", e.a, v)
        aw_centered = np.einsum("...kd,...d->...k", e.a, w) - _dot(e.score, w)[..., None]
        moment = np.einsum("...k,...k,...k,...k->...", e.w, aw_centered, au, av)
        su, sv = _dot(e.score, u), _dot(e.score, v)
        hw = self._hvp(e, w)
        return (
            moment
            - (_dot(w, u) * sv + su * _dot(w, v)) / e.var
            - _dot(hw, u) * sv
            - su * _dot(hw, v)
        )

    # -- sampling ----------------------------------------------------------

    def sample_components(self, rng: np.random.Generator, n: int):
        if n < 1:
            raise DomainError(f"sample count must be >= 1, got {n}")
        return rng.choice(self.n_components, size=n, p=self.weights)

    def sample_data(self, rng: np.random.Generator, n: int):
        labels = self.sample_components(rng, n)
        return self.means[labels] + np.sqrt(self.s2) * rng.standard_normal((n, self.dim))

    def sample_diffused(self, schedule, t, rng: np.random.Generator, n: int):
        alpha, sigma = schedule.alpha_sigma(t)
        x0 = self.sample_data(rng, n)
        return alpha * x0 + sigma * rng.standard_normal((n, self.dim))

    def bind(self, schedule) -> "DiffusedTarget":
        return DiffusedTarget(self, schedule)


@dataclass(frozen=True)
class DiffusedTarget:
    """A target paired with a schedule, exposing ``(t, x)`` signatures as a score source."""

    target: GaussianMixtureTarget
    schedule: object

    @property
    def dim(self):
        return self.target.dim

    def log_density(self, t, x):
        return self.target.log_density(self.schedule, t, x)

    def score(self, t, x):
        return self.target.score(self.schedule, t, x)

    def score_hvp(self, t, x, v):
        return self.target.score_hvp(self.schedule, t, x, v)

    def laplacian(self, t, x):
        return self.target.laplacian_log_density(self.schedule, t, x)

    def laplacian_grad_dot(self, t, x, v):
        return self.target.laplacian_grad_dot(self.schedule, t, x, v)

    def third_derivative(self, t, x, u, v, w):
        return self.target.third_derivative(self.schedule, t, x, u, v, w)
