"""Deterministic density guidance.

A guided field ``u~`` is the closest field to the PF-ODE drift ``u`` (in the
Euclidean sense, pointwise) whose off-policy log-density rate equals a
prescribed ``b_t(x)``:

    u~ = u + (div u + b) / |score|^2 * score

The rate ``b`` comes either from an empirical table of log-density quantiles
(explicit matching) or from the Gaussian limit of the normalized Laplacian
statistic (implicit matching), which collapses into a rescaling of the score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import DegenerateScoreError, DomainError
from .fields import FlowField, PFODEField
from .integrators import TimeGrid, integrate_ode, track_density_offpolicy
from .numerics import inverse_normal_cdf

SMOOTHING_WINDOW = 9
SCORE_TOL = 1e-8
QUANTILE_METHOD = "hazen"


def constrained_min_shift(y, v, a):
    """Closest point to ``y`` on the hyperplane ``{x : x . v = a}``."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    vv = np.einsum("...d,...d->...", v, v)
    if np.any(vv == 0):
        raise DegenerateScoreError("constraint direction is zero")
    coef = (a - np.einsum("...d,...d->...", v, y)) / vv
    return y + np.asarray(coef)[..., None] * v


def _check_score(score, sigma, dim, t):
    norm = np.linalg.norm(sigma * score, axis=-1)
    bad = norm < SCORE_TOL * np.sqrt(dim)
    if np.any(bad):
        raise DegenerateScoreError(
            f"score vanishes at t={t} (|sigma score| = {norm[bad].min():.3e})",
            where=(t, np.flatnonzero(bad)),
        )


@dataclass(frozen=True)
class GuidanceSpec:
    """How the target log-density rate is chosen and when guidance is on.

    Attributes:
        mode: ``"explicit"``, ``"implicit"`` or ``"custom"``.
        q: Quantile level in (0, 1) for explicit/implicit modes.
        c: Target final log-density (explicit mode; resolved to a level
            through the quantile table).
        window: Active interval ``(t_lo, t_hi)``; ``None`` means always on.
        phi_scale: Multiplier on ``g`` for the noise scale used with b.
    """

    mode: str = "implicit"
    q: float | None = 0.5
    c: float | None = None
    window: tuple | None = None
    phi_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("explicit", "implicit", "custom"):
            raise DomainError(f"unknown guidance mode {self.mode!r}")
        if self.q is not None and not 0.0 < self.q < 1.0:
            raise DomainError(f"quantile level must lie in (0, 1), got {self.q}")
        if self.mode == "implicit" and self.q is None:
            raise DomainError("implicit guidance needs a quantile level")
        if self.mode == "explicit" and (self.q is None) == (self.c is None):
            raise DomainError("explicit guidance needs exactly one of q and c")
        if self.window is not None:
            lo, hi = self.window
            if not lo < hi:
                raise DomainError(f"window needs t_lo < t_hi, got {self.window}")
        if self.phi_scale < 0:
            raise DomainError("phi_scale must be >= 0")

    def active(self, t) -> bool:
        if self.window is None:
            return True
        lo, hi = self.window
        return lo <= t <= hi


def default_window(schedule):
    """Guidance on from log-SNR 1 up to T (the high-noise part of sampling)."""
    return (schedule.inv_log_snr(1.0), schedule.T)


class GuidedField(FlowField):
    """``u + (div u + b) / |score|^2 * score`` inside the window, ``u`` outside."""

    def __init__(self, base: PFODEField, b, window=None, score_source=None):
        self.base = base
        self.b = b
        self.window = window
        self.score_source = base.score_source if score_source is None else score_source
        self.dim = base.dim

    def active(self, t) -> bool:
        return self.window is None or self.window[0] <= t <= self.window[1]

    def evaluate(self, t, x):
        if not self.active(t):
            return self.base.evaluate(t, x)
        u, div, score = self.base.evaluate_full(t, x)
        _check_score(score, self.base.schedule.alpha_sigma(t)[1], self.dim, t)
        sq = np.einsum("...d,...d->...", score, score)
        coef = (div + self.b(t, x)) / sq
        return u + coef[..., None] * score


def guided_field(fld, b, window=None, score_source=None) -> GuidedField:
    return GuidedField(fld, b, window, score_source)


# -- implicit quantile matching ------------------------------------------------


def implicit_offset(schedule, q, dim):
    """``sqrt(2D) * Phi^-1(q)``, the normalized-Laplacian quantile."""
    return np.sqrt(2.0 * dim) * inverse_normal_cdf(q)


def b_implicit(schedule, target, q, dim=None):
    """Rate ``b = -div u - g^2/2 * sqrt(2D) Phi^-1(q) / sigma^2``."""
    dim = target.dim if dim is None else dim
    base = PFODEField(schedule, target)
    z = implicit_offset(schedule, q, dim)

    def rate(t, x):
        _, g2 = schedule.drift_coeffs(t)
        sigma = schedule.alpha_sigma(t)[1]
        return -base.divergence(t, x) - 0.5 * g2 * z / sigma**2

    return rate


class DGODEField(FlowField):
    """PF-ODE with the score rescaled by ``eta = 1 + sqrt(2D) Phi^-1(q) / |sigma score|^2``."""

    def __init__(self, schedule, target, q, window="default"):
        self.schedule = schedule
        self.target = target
        self.q = q
        self.base = PFODEField(schedule, target)
        self.score_source = self.base.score_source
        self.dim = target.dim
        self.z = implicit_offset(schedule, q, self.dim)
        self.window = default_window(schedule) if window == "default" else window

    def active(self, t) -> bool:
        return self.window is None or self.window[0] <= t <= self.window[1]

    def eta(self, t, x):
        score = self.target.score(self.schedule, t, x)
        sigma = self.schedule.alpha_sigma(t)[1]
        return 1.0 + self.z / np.einsum("...d,...d->...", sigma * score, sigma * score)

    def evaluate(self, t, x):
        if not self.active(t) or self.z == 0.0:
            return self.base.evaluate(t, x)
        f, g2 = self.schedule.drift_coeffs(t)
        score = self.target.score(self.schedule, t, x)
        sigma = self.schedule.alpha_sigma(t)[1]
        _check_score(score, sigma, self.dim, t)
        eta = 1.0 + self.z / np.einsum("...d,...d->...", sigma * score, sigma * score)
        return f * x - (0.5 * g2) * (eta[..., None] * score)


def dg_ode_field(schedule, target, q, window="default") -> DGODEField:
    return DGODEField(schedule, target, q, window)


# -- explicit quantile matching ------------------------------------------------


@dataclass(frozen=True)
class QuantileTable:
    """Empirical log-density quantiles ``phi_t(q)`` on a decreasing time grid.

    ``values[i, j]`` is the level ``levels[j]`` quantile at ``times[i]``.
    """

    times: np.ndarray
    levels: np.ndarray
    values: np.ndarray
    n_samples: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        if levels.ndim != 1 or np.any(np.diff(levels) <= 0):
            raise DomainError("quantile levels must be strictly increasing")
        if np.any((levels <= 0) | (levels >= 1)):
            raise DomainError("quantile levels must lie in (0, 1)")
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (np.size(self.times), levels.size):
            raise DomainError(f"table shape {vals.shape} does not match grid and levels")

    def column(self, q) -> np.ndarray:
        """``phi_t(q)`` at every node; linear in q between stored levels."""
        if not self.levels[0] <= q <= self.levels[-1]:
            raise DomainError(f"level {q} outside table range [{self.levels[0]}, {self.levels[-1]}]")
        j = np.searchsorted(self.levels, q)
        if j < self.levels.size and self.levels[j] == q:
            return self.values[:, j].copy()
        lo, hi = self.levels[j - 1], self.levels[j]
        w = (q - lo) / (hi - lo)
        return (1.0 - w) * self.values[:, j - 1] + w * self.values[:, j]

    def level_for_final(self, c) -> float:
        """Level whose final-node quantile equals ``c`` (inverse of ``column(q)[-1]``)."""
        final = self.values[-1]
        if not final[0] <= c <= final[-1]:
            raise DomainError(f"target log-density {c} outside table range [{final[0]}, {final[-1]}]")
        if np.any(np.diff(final) <= 0):
            raise DomainError("final-node quantiles are not strictly increasing; cannot invert")
        return float(np.interp(c, final, self.levels))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", *[f"q{lvl:g}" for lvl in self.levels]])
            for t, row in zip(self.times, self.values):
                writer.writerow([repr(float(t)), *[repr(float(v)) for v in row]])


def estimate_quantile_table(
    fld,
    grid: TimeGrid,
    n_samples: int,
    levels,
    rng,
    *,
    prior=None,
    values: str = "tracked",
) -> QuantileTable:
    """Decode ``n_samples`` prior draws and take per-node log-density quantiles.

    Args:
        fld: PF-ODE field with an analytic score source.
        prior: ``prior(rng, n)`` returning latents at ``grid.times[0]``;
            defaults to exact draws from the field's marginal at T.
        values: ``"tracked"`` uses the integrated density channel;
            ``"analytic"`` evaluates the closed-form ``log p_t`` at each node.
    """
    if n_samples < 2:
        raise DomainError(f"need at least two samples, got {n_samples}")
    levels = np.asarray(levels, dtype=float)
    if prior is None:
        src = fld.score_source
        x_T = src.target.sample_diffused(src.schedule, grid.times[0], rng, n_samples)
    else:
        x_T = np.asarray(prior(rng, n_samples), dtype=float)
    traj = integrate_ode(fld, x_T, grid)
    if values == "tracked":
        lp = traj.log_p
    elif values == "analytic":
        lp = np.stack([fld.score_source.log_density(t, x) for t, x in zip(traj.times, traj.states)])
    else:
        raise DomainError(f"unknown table value source {values!r}")
    table = np.quantile(lp, levels, axis=1, method=QUANTILE_METHOD).T
    meta = {"quantile_method": QUANTILE_METHOD, "values": values, "spacing": grid.spacing}
    return QuantileTable(grid.times.copy(), levels, table, n_samples, meta)


def smooth_centered(values, window: int = SMOOTHING_WINDOW):
    """Centered moving average whose window shrinks symmetrically near the ends.

    The first and last entries are left unchanged, so differences of the
    smoothed sequence still telescope to ``values[-1] - values[0]``.
    """
    values = np.asarray(values, dtype=float)
    if window < 1 or window % 2 == 0:
        raise DomainError(f"smoothing window must be a positive odd integer, got {window}")
    half = window // 2
    n = values.size
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(n)
    radius = np.minimum(np.minimum(idx, n - 1 - idx), half)
    out = (csum[idx + radius + 1] - csum[idx - radius]) / (2 * radius + 1)
    out[[0, -1]] = values[[0, -1]]  # exact, not via cumsum rounding
    return out


class PiecewiseRate:
    """x-independent rate, constant on each grid interval ``(t_{i+1}, t_i]``.

    ``rates`` has shape ``(steps,)``, or ``(steps, n)`` to give each batch row
    its own schedule of rates.
    """

    def __init__(self, times, rates):
        self.times = np.asarray(times, dtype=float)
        self.rates = np.asarray(rates, dtype=float)
        if self.rates.shape[0] != self.times.size - 1:
            raise DomainError("need one rate per grid interval")
        self._ascending = self.times[::-1]

    def interval(self, t) -> int:
        # index i with t_{i+1} < t <= t_i, clipped to the grid
        k = np.searchsorted(self._ascending, t, side="left")
        i = self.times.size - 1 - k
        return int(np.clip(i, 0, self.rates.size - 1))

    def __call__(self, t, x):
        return np.broadcast_to(self.rates[self.interval(t)], np.shape(x)[:-1]).copy()

    def integral(self):
        """``integral of b dt`` from T down to t_end."""
        return np.tensordot(np.diff(self.times), self.rates, axes=(0, 0))


def smoothed_path(table: QuantileTable, q, window: int = SMOOTHING_WINDOW, times=None):
    """Smoothed ``phi_t(q)`` at the table nodes, or interpolated (linearly in t) onto ``times``."""
    phi = table.column(q)
    if window > 1:
        phi = smooth_centered(phi, window)
    if times is None:
        return phi
    times = np.asarray(times, dtype=float)
    lo, hi = table.times[-1], table.times[0]
    if np.any(times < lo - 1e-15) or np.any(times > hi + 1e-15):
        raise DomainError(f"requested times leave the table range [{lo}, {hi}]")
    return np.interp(times, table.times[::-1], phi[::-1])


def b_explicit(table: QuantileTable, q, window: int = SMOOTHING_WINDOW, grid=None) -> PiecewiseRate:
    """Rate following ``phi_t(q)``: differences of the smoothed quantile path.

    ``q`` may be a sequence, giving one rate schedule per batch row. With
    ``grid`` the smoothed path is first interpolated onto that grid, so the
    rates integrate exactly to the path increment on the sampling grid.
    """
    times = table.times if grid is None else grid.times
    levels = np.atleast_1d(np.asarray(q, dtype=float))
    phis = np.stack([smoothed_path(table, lvl, window, None if grid is None else times) for lvl in levels], axis=1)
    rates = np.diff(phis, axis=0) / np.diff(times)[:, None]
    return PiecewiseRate(times, rates[:, 0] if np.ndim(q) == 0 else rates)


def latent_on_level(source, t, x_T, level):
    """Rescale ``x_T`` along its ray so that ``log p_t(x) = level``.

    The search assumes log-density decreases along the ray beyond the mode,
    which holds at high noise where ``p_T`` is close to an isotropic Gaussian.
    """
    x_T = np.asarray(x_T, dtype=float)
    norm = np.linalg.norm(x_T)
    if norm == 0:
        raise DegenerateScoreError("cannot rescale a zero latent")
    direction = x_T / norm

    def gap(r):
        return float(source.log_density(t, r * direction)) - level

    if gap(0.0) < 0:
        raise DomainError(f"level {level} is above the density along the ray")
    hi = max(norm, 1.0)
    while gap(hi) > 0:
        hi *= 2.0
        if hi > 1e8:
            raise DomainError(f"level {level} not reached along the ray")
    r = optimize.brentq(gap, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    return r * direction


def explicit_quantile_sample(base: PFODEField, table: QuantileTable, q, x_T, *, grid=None,
                             window: int = SMOOTHING_WINDOW, keep_path: bool = False):
    """Guided decode following ``phi_t(q)`` for one or several levels.

    Each latent is rescaled along its ray onto ``phi_T(q)`` and decoded with
    ``b_explicit`` on ``grid`` (the table grid by default). ``x_T`` is one
    latent shared by all levels or one latent per level.

    Returns:
        ``(trajectory, targets)`` with ``targets = phi_{t_end}(q)`` per level.
    """
    grid = TimeGrid(table.times, "table") if grid is None else grid
    levels = np.atleast_1d(np.asarray(q, dtype=float))
    x_T = np.asarray(x_T, dtype=float)
    latents = np.broadcast_to(x_T, (levels.size, base.dim)) if x_T.ndim == 1 else x_T
    if latents.shape[0] != levels.size:
        raise DomainError("need one latent per level or a single shared latent")
    starts = np.array([
        latent_on_level(base.score_source, grid.times[0], z, smoothed_path(table, lvl, window, grid.times[:1])[0])
        for z, lvl in zip(latents, levels)
    ])
    rate = b_explicit(table, levels, window, grid)
    targets = np.array([smoothed_path(table, lvl, window, grid.times[-1:])[0] for lvl in levels])
    traj = track_density_offpolicy(base, GuidedField(base, rate), starts, grid, keep_path=keep_path,
                                   metadata={"q": levels, "mode": "explicit", "window": window})
    if np.ndim(q) == 0:
        return traj, float(targets[0])
    return traj, targets
