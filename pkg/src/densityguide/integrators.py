"""Reverse-time ODE/SDE integration with a coupled log-density channel.

Integration runs from ``t_0 = T`` down to ``t_N = t_end`` with negative steps.
Alongside the state, a scalar per trajectory tracks ``log p_t(x_t)``:

* ODE:        d log p = -div u dt
* off-policy: d log p = (-div u + score . (u_actual - u)) dt
* SDE:        d log p = F dt + phi score . dW,
              F = -div u - phi^2/2 (lap log p + |score|^2)

The SDE state update and the density update consume the same Gaussian draws,
which is what keeps the density channel exact pathwise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, IntegrationError
from .numerics import rademacher, standard_normal

DEFAULT_T_END_FRACTION = 1e-3


@dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing times ``T = t_0 > t_1 > ... > t_N = t_end``."""

    times: np.ndarray
    spacing: str = "custom"

    def __post_init__(self):
        ts = np.asarray(self.times, dtype=float)
        if ts.ndim != 1 or ts.size < 1:
            raise DomainError("time grid needs at least one node")
        if ts.size > 1 and not np.all(np.diff(ts) < 0):
            raise DomainError("time grid must be strictly decreasing")
        if ts[-1] < 0:
            raise DomainError(f"grid end {ts[-1]} is negative")
        ts.setflags(write=False)
        object.__setattr__(self, "times", ts)

    @classmethod
    def uniform(cls, schedule, steps: int, t_end: float | None = None):
        t_end = DEFAULT_T_END_FRACTION * schedule.T if t_end is None else t_end
        _check_steps(steps, t_end, schedule.T)
        return cls(np.linspace(schedule.T, t_end, steps + 1), "uniform-t")

    @classmethod
    def log_snr_uniform(cls, schedule, steps: int, t_end: float | None = None):
        t_end = DEFAULT_T_END_FRACTION * schedule.T if t_end is None else t_end
        _check_steps(steps, t_end, schedule.T)
        if steps == 0:
            return cls(np.array([schedule.T]), "uniform-log-snr")
        lams = np.linspace(schedule.log_snr(schedule.T), schedule.log_snr(t_end), steps + 1)
        ts = np.array([schedule.inv_log_snr(lam) for lam in lams[1:-1]])
        return cls(np.concatenate([[schedule.T], ts, [t_end]]), "uniform-log-snr")

    @classmethod
    def build(cls, schedule, steps: int, t_end: float | None = None, spacing: str = "log-snr"):
        if spacing in ("log-snr", "uniform-log-snr"):
            return cls.log_snr_uniform(schedule, steps, t_end)
        if spacing in ("t", "uniform", "uniform-t"):
            return cls.uniform(schedule, steps, t_end)
        raise DomainError(f"unknown grid spacing {spacing!r}")

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])


def _check_steps(steps, t_end, T):
    if steps < 0:
        raise DomainError(f"step count must be >= 0, got {steps}")
    if steps > 0 and not 0 <= t_end < T:
        raise DomainError(f"t_end must lie in [0, T), got {t_end}")


@dataclass
class DensityTrajectory:
    """States and tracked log-densities at the recorded grid nodes.

    ``states`` has shape ``(nodes, n, D)`` and ``log_p`` shape ``(nodes, n)``.
    With ``keep_path=False`` only the first and last nodes are recorded.
    """

    times: np.ndarray
    states: np.ndarray
    log_p: np.ndarray
    integrator: str
    steps: int
    seed: object = None
    metadata: dict = field(default_factory=dict)
    batched: bool = True

    @property
    def final_state(self):
        return self.states[-1] if self.batched else self.states[-1, 0]

    @property
    def final_log_p(self):
        return self.log_p[-1] if self.batched else self.log_p[-1, 0]

    @property
    def initial_state(self):
        return self.states[0] if self.batched else self.states[0, 0]

    def to_csv(self, path, sample: int = 0):
        """One row per recorded node for one batch member: ``t, x_1..x_D, log_p``."""
        dim = self.states.shape[-1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", *[f"x{i}" for i in range(dim)], "log_p"])
            for t, x, lp in zip(self.times, self.states[:, sample], self.log_p[:, sample]):
                writer.writerow([repr(float(t)), *[repr(float(v)) for v in x], repr(float(lp))])

    def summary(self) -> dict:
        return {
            "integrator": self.integrator,
            "steps": self.steps,
            "t_start": float(self.times[0]),
            "t_end": float(self.times[-1]),
            "seed": self.seed,
            "final_state": np.asarray(self.final_state).tolist(),
            "final_log_p": np.asarray(self.final_log_p).tolist(),
            "metadata": _jsonable(self.metadata),
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return repr(obj)


class _Recorder:
    def __init__(self, grid, x, log_p, keep_path):
        self.keep_path = keep_path
        self.times = [grid.times[0]]
        self.states = [x.copy()]
        self.log_p = [np.array(log_p, dtype=float)]
        self.last = (grid.times[0], x, log_p)

    def push(self, t, x, log_p):
        if self.keep_path:
            self.times.append(t)
            self.states.append(x.copy())
            self.log_p.append(np.array(log_p, dtype=float))
        self.last = (t, x, log_p)

    def build(self, name, steps, batched, seed=None, metadata=None):
        times, states, log_p = list(self.times), list(self.states), list(self.log_p)
        if not self.keep_path and steps > 0:
            t, x, lp = self.last
            times.append(t)
            states.append(x.copy())
            log_p.append(np.array(lp, dtype=float))
        return DensityTrajectory(
            np.asarray(times, dtype=float), np.stack(states), np.stack(log_p),
            name, steps, seed, dict(metadata or {}), batched,
        )


def _as_batch(x_T):
    x = np.array(x_T, dtype=float)
    if x.ndim == 1:
        return x[None], False
    if x.ndim != 2:
        raise DomainError(f"latents must have shape (D,) or (n, D), got {x.shape}")
    return x, True


def _initial_log_p(fld, t0, x, log_p_T):
    if log_p_T is not None:
        return np.broadcast_to(np.asarray(log_p_T, dtype=float), x.shape[:1]).copy()
    if fld.score_source is None:
        raise DomainError("field has no density source; pass log_p_T explicitly")
    return fld.score_source.log_density(t0, x)


def _fail(rec, name, i, steps, batched, seed, metadata):
    traj = rec.build(name, i, batched, seed, metadata)
    raise IntegrationError(f"non-finite state or log-density at step {i + 1} of {steps}", traj)


def _divergence(fld, t, x, mode, rng, n_probes):
    if mode == "exact":
        return fld.divergence(t, x)
    if mode == "hutchinson":
        n_probes = int(n_probes)
        if n_probes < 1:
            raise DomainError(f"need at least one probe, got {n_probes}")
        total = np.zeros(x.shape[:-1])
        for _ in range(n_probes):
            eps = rademacher(rng, x.shape)
            total = total + np.einsum("...d,...d->...", eps, fld.jvp(t, x, eps))
        return total / n_probes
    raise DomainError(f"unknown divergence mode {mode!r}")


def integrate_ode(
    fld,
    x_T,
    grid: TimeGrid,
    *,
    method: str = "euler",
    divergence: str = "exact",
    rng=None,
    n_probes: int = 1,
    log_p_T=None,
    keep_path: bool = True,
    metadata: dict | None = None,
) -> DensityTrajectory:
    """Integrate ``dx = u dt`` and ``d log p = -div u dt`` over ``grid``.

    Args:
        fld: A ``FlowField``.
        x_T: Starting state(s) at ``grid.times[0]``, shape ``(D,)`` or ``(n, D)``.
        grid: Decreasing time grid.
        method: ``"euler"`` or ``"heun"`` (experimental: Heun on the state and
            the trapezoidal rule on the divergence).
        divergence: ``"exact"`` or ``"hutchinson"`` (fresh Rademacher probes
            every evaluation, drawn from ``rng``).
        log_p_T: Initial log-density; defaults to the field's analytic
            marginal at the first node.
        keep_path: Record every node, or only the endpoints.

    Raises:
        IntegrationError: On a non-finite state; ``.trajectory`` holds the
            nodes up to the last finite one.
    """
    if method not in ("euler", "heun"):
        raise DomainError(f"unknown ODE method {method!r}")
    if divergence == "hutchinson" and rng is None:
        raise DomainError("Hutchinson divergence needs a random generator")
    x, batched = _as_batch(x_T)
    times = grid.times
    log_p = _initial_log_p(fld, times[0], x, log_p_T)
    meta = {"divergence": divergence, "method": method, "spacing": grid.spacing, **(metadata or {})}
    if method == "heun":
        meta["experimental"] = True
    rec = _Recorder(grid, x, log_p, keep_path)
    name = f"ode-{method}"
    for i in range(grid.steps):
        t, t_next = times[i], times[i + 1]
        dt = t_next - t
        if divergence == "exact":
            u, div = fld.evaluate_with_divergence(t, x)
        else:
            u = fld.evaluate(t, x)
            div = _divergence(fld, t, x, divergence, rng, n_probes)
        if method == "euler":
            x_new = x + u * dt
            log_p_new = log_p + (-div) * dt
        else:
            x_pred = x + u * dt
            u2 = fld.evaluate(t_next, x_pred)
            div2 = _divergence(fld, t_next, x_pred, divergence, rng, n_probes)
            x_new = x + 0.5 * (u + u2) * dt
            log_p_new = log_p + (-0.5 * (div + div2)) * dt
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(log_p_new))):
            _fail(rec, name, i, grid.steps, batched, None, meta)
        x, log_p = x_new, log_p_new
        rec.push(t_next, x, log_p)
    return rec.build(name, grid.steps, batched, None, meta)


def track_density_offpolicy(
    field_marginal,
    field_actual,
    x_T,
    grid: TimeGrid,
    *,
    log_p_T=None,
    keep_path: bool = True,
    metadata: dict | None = None,
) -> DensityTrajectory:
    """Move the state with ``field_actual`` while tracking the marginal density of ``field_marginal``.

    Uses Euler steps and the marginal field's exact divergence and score.
    """
    source = field_marginal.score_source
    if source is None:
        raise DomainError("the marginal field needs a score source for off-policy tracking")
    x, batched = _as_batch(x_T)
    times = grid.times
    log_p = _initial_log_p(field_marginal, times[0], x, log_p_T)
    meta = {"divergence": "exact", "method": "euler", "spacing": grid.spacing, **(metadata or {})}
    rec = _Recorder(grid, x, log_p, keep_path)
    for i in range(grid.steps):
        t, t_next = times[i], times[i + 1]
        dt = t_next - t
        u, div, score = field_marginal.evaluate_full(t, x)
        u_act = field_actual.evaluate(t, x)
        rate = -div + np.einsum("...d,...d->...", score, u_act - u)
        x_new = x + u_act * dt
        log_p_new = log_p + rate * dt
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(log_p_new))):
            _fail(rec, "ode-offpolicy", i, grid.steps, batched, None, meta)
        x, log_p = x_new, log_p_new
        rec.push(t_next, x, log_p)
    return rec.build("ode-offpolicy", grid.steps, batched, None, meta)


def _phi_values(phi, times):
    if callable(phi):
        vals = np.array([float(phi(t)) for t in times[:-1]])
    else:
        vals = np.broadcast_to(np.asarray(phi, dtype=float), times[:-1].shape).copy()
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise DomainError("noise scale phi must be finite and >= 0 on the grid")
    return vals


def integrate_sde(
    fld,
    phi,
    x_T,
    grid: TimeGrid,
    rng,
    *,
    score_source=None,
    log_p_T=None,
    keep_path: bool = True,
    seed=None,
    metadata: dict | None = None,
) -> DensityTrajectory:
    """Euler-Maruyama for ``dx = (u - phi^2/2 score) dt + phi dW`` with density tracking.

    Args:
        fld: The PF-ODE field ``u``.
        phi: Noise scale, a callable of t or a constant. Steps with
            ``phi == 0`` reduce to plain Euler ODE steps (no draws).
        rng: One generator, or one generator per trajectory.
        score_source: Supplies score and Laplacian of ``log p_t``; defaults to
            the field's own.
    """
    source = fld.score_source if score_source is None else score_source
    if source is None:
        raise DomainError("SDE integration needs a score source")
    x, batched = _as_batch(x_T)
    times = grid.times
    phis = _phi_values(phi, times)
    log_p = _initial_log_p(fld, times[0], x, log_p_T)
    meta = {"method": "euler-maruyama", "spacing": grid.spacing, **(metadata or {})}
    rec = _Recorder(grid, x, log_p, keep_path)
    for i in range(grid.steps):
        t, t_next = times[i], times[i + 1]
        dt = t_next - t
        u, div = fld.evaluate_with_divergence(t, x)
        ph = phis[i]
        if ph == 0.0:
            x_new = x + u * dt
            log_p_new = log_p + (-div) * dt
        else:
            score = source.score(t, x)
            lap = source.laplacian(t, x)
            eps = standard_normal(rng, x.shape)
            sq = np.einsum("...d,...d->...", score, score)
            half_phi2 = 0.5 * ph * ph
            noise = ph * np.sqrt(-dt) * eps
            x_new = x + (u - half_phi2 * score) * dt + noise
            drift_lp = -div - half_phi2 * lap - half_phi2 * sq
            log_p_new = log_p + drift_lp * dt + np.einsum("...d,...d->...", score, noise)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(log_p_new))):
            _fail(rec, "sde-euler-maruyama", i, grid.steps, batched, seed, meta)
        x, log_p = x_new, log_p_new
        rec.push(t_next, x, log_p)
    return rec.build("sde-euler-maruyama", grid.steps, batched, seed, meta)
