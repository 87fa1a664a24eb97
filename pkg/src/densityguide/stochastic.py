"""Stochastic density guidance.

Noise is injected only orthogonally to the score, ``phi P dW`` with
``P = I - s s^T`` and ``s`` the unit score, so it cannot move ``log p_t``
to first order. The Ito correction it does produce, ``-phi^2/2 tr(P H P)``
with ``tr(P H P) = lap log p - R`` and ``R = s^T H s``, is cancelled in the
drift:

    u~ = u + [b + div u + phi^2/2 (lap log p - R)] / |score|^2 * score

The approximate drift drops ``R``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateScoreError, DomainError
from .fields import FlowField
from .guidance import _check_score
from .integrators import TimeGrid, _as_batch, _initial_log_p, _Recorder, _fail, _phi_values
from .numerics import standard_normal


class ScoreProjection:
    """``P = I - s s^T`` for unit score directions, applied without forming the matrix."""

    def __init__(self, score):
        score = np.asarray(score, dtype=float)
        norm = np.linalg.norm(score, axis=-1, keepdims=True)
        if np.any(norm == 0):
            raise DegenerateScoreError("projection needs a nonzero score")
        self.unit = score / norm

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        return v - self.unit * np.einsum("...d,...d->...", self.unit, v)[..., None]

    def matrix(self):
        """Dense ``P``, shape ``(..., D, D)``."""
        d = self.unit.shape[-1]
        return np.eye(d) - self.unit[..., :, None] * self.unit[..., None, :]


def score_projection(score) -> ScoreProjection:
    return ScoreProjection(score)


def rayleigh_quotient(target, schedule, t, x):
    """``s^T H s`` with ``s`` the unit score and ``H`` the Hessian of ``log p_t``."""
    score = target.score(schedule, t, x)
    sq = np.einsum("...d,...d->...", score, score)
    if np.any(sq == 0):
        raise DegenerateScoreError("Rayleigh quotient needs a nonzero score", where=t)
    hs = target.score_hvp(schedule, t, x, score)
    return np.einsum("...d,...d->...", score, hs) / sq


@dataclass(frozen=True)
class NoiseWindow:
    lsnr_lo: float
    lsnr_hi: float
    r: float

    def __post_init__(self):
        if not self.lsnr_lo < self.lsnr_hi:
            raise DomainError(f"noise window needs lsnr_lo < lsnr_hi, got ({self.lsnr_lo}, {self.lsnr_hi})")
        if self.r < 0:
            raise DomainError(f"noise multiplier must be >= 0, got {self.r}")


class NoiseWindowPolicy:
    """``phi(t) = r g(t)`` while log-SNR(t) lies in a window ``[lo, hi)``, else 0."""

    def __init__(self, windows=()):
        self.windows = tuple(w if isinstance(w, NoiseWindow) else NoiseWindow(*w) for w in windows)
        ordered = sorted(self.windows, key=lambda w: w.lsnr_lo)
        for a, b in zip(ordered, ordered[1:]):
            if b.lsnr_lo < a.lsnr_hi:
                raise DomainError("noise windows overlap")

    @classmethod
    def constant(cls, r: float):
        return cls([NoiseWindow(-np.inf, np.inf, r)])

    @classmethod
    def from_config(cls, items):
        return cls([NoiseWindow(float(w["lsnr_lo"]), float(w["lsnr_hi"]), float(w["r"])) for w in items])

    def to_config(self):
        return [{"lsnr_lo": w.lsnr_lo, "lsnr_hi": w.lsnr_hi, "r": w.r} for w in self.windows]

    def multiplier(self, schedule, t) -> float:
        lam = schedule.log_snr(t)
        for w in self.windows:
            if w.lsnr_lo <= lam < w.lsnr_hi:
                return w.r
        return 0.0

    def phi(self, schedule):
        def fn(t):
            r = self.multiplier(schedule, t)
            return 0.0 if r == 0.0 else r * np.sqrt(schedule.drift_coeffs(t)[1])

        return fn

    @property
    def is_zero(self) -> bool:
        return all(w.r == 0 for w in self.windows)


class SDGDrift(FlowField):
    """Drift ``u~`` of the score-orthogonal guided SDE for a fixed noise scale ``phi(t)``."""

    def __init__(self, base, b, phi, exact_rayleigh: bool = True, window=None):
        self.base = base
        self.target = base.target
        self.schedule = base.schedule
        self.score_source = base.score_source
        self.dim = base.dim
        self.b = b
        self.phi = phi if callable(phi) else (lambda t, _c=float(phi): _c)
        self.exact_rayleigh = exact_rayleigh
        self.window = window

    def active(self, t) -> bool:
        return self.window is None or self.window[0] <= t <= self.window[1]

    def parts(self, t, x):
        """``(u, div u, score, laplacian, R)`` at ``(t, x)``; R is 0 for the approximate drift."""
        u, div, score = self.base.evaluate_full(t, x)
        lap = self.target.laplacian_log_density(self.schedule, t, x)
        if self.exact_rayleigh:
            sq = np.einsum("...d,...d->...", score, score)
            hs = self.target.score_hvp(self.schedule, t, x, score)
            rq = np.einsum("...d,...d->...", score, hs) / sq
        else:
            rq = np.zeros(np.shape(x)[:-1])
        return u, div, score, lap, rq

    def evaluate(self, t, x):
        return self.evaluate_parts(t, x)[0]

    def evaluate_parts(self, t, x):
        u, div, score, lap, rq = self.parts(t, x)
        ph = float(self.phi(t))
        if not self.active(t):
            if ph != 0.0:
                raise DomainError("noise requested outside the guidance window")
            return u, (u, div, score, lap, rq, ph)
        _check_score(score, self.schedule.alpha_sigma(t)[1], self.dim, t)
        sq = np.einsum("...d,...d->...", score, score)
        numer = self.b(t, x) + div
        if ph != 0.0:
            numer = numer + 0.5 * ph * ph * (lap - rq)
        return u + (numer / sq)[..., None] * score, (u, div, score, lap, rq, ph)


def sdg_drift(base, b, phi, exact_rayleigh: bool = True, window=None) -> SDGDrift:
    return SDGDrift(base, b, phi, exact_rayleigh, window)


def sample_sdg(
    base,
    b,
    noise_policy: NoiseWindowPolicy,
    x_T,
    grid: TimeGrid,
    rng,
    *,
    exact_rayleigh: bool = True,
    window=None,
    log_p_T=None,
    keep_path: bool = False,
    seed=None,
):
    """Euler-Maruyama for ``dx = u~ dt + phi P dW`` with density tracking.

    The density channel integrates ``-div u + score . (u~ - u)`` plus the Ito
    term ``-phi^2/2 (lap log p - R)`` of the projected noise, which together
    equal ``b`` when ``R`` is exact. With the approximate drift the tracked
    channel still records the exact Ito term, so its value reflects the true
    density change rather than ``b``.
    """
    phi_fn = noise_policy.phi(base.schedule)
    drift = SDGDrift(base, b, phi_fn, exact_rayleigh, window)
    x, batched = _as_batch(x_T)
    times = grid.times
    phis = _phi_values(phi_fn, times)
    log_p = _initial_log_p(base, times[0], x, log_p_T)
    meta = {"method": "sdg-euler-maruyama", "exact_rayleigh": exact_rayleigh,
            "noise_policy": noise_policy.to_config(), "spacing": grid.spacing}
    rec = _Recorder(grid, x, log_p, keep_path)
    for i in range(grid.steps):
        t, t_next = times[i], times[i + 1]
        dt = t_next - t
        u_tilde, (u, div, score, lap, rq_used, _) = drift.evaluate_parts(t, x)
        rate = -div + np.einsum("...d,...d->...", score, u_tilde - u)
        ph = phis[i]
        if ph == 0.0:
            x_new = x + u_tilde * dt
        else:
            if drift.exact_rayleigh:
                rq = rq_used
            else:
                hs = base.target.score_hvp(base.schedule, t, x, score)
                rq = np.einsum("...d,...d->...", score, hs) / np.einsum("...d,...d->...", score, score)
            eps = standard_normal(rng, x.shape)
            x_new = x + u_tilde * dt + ph * np.sqrt(-dt) * ScoreProjection(score)(eps)
            rate = rate - 0.5 * ph * ph * (lap - rq)
        log_p_new = log_p + rate * dt
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(log_p_new))):
            _fail(rec, "sdg", i, grid.steps, batched, seed, meta)
        x, log_p = x_new, log_p_new
        rec.push(t_next, x, log_p)
    return rec.build("sdg", grid.steps, batched, seed, meta)
