"""Prior guidance and score-alignment checks.

Decoding is a deterministic map ``x_T -> x_0``. Moving ``x_T`` along the
prior score and pushing that direction through the decoder Jacobian gives the
push-forward vector ``v_t = (dx_t/dx_T) score_T(x_T)``. When
``v_0 . score_0(x_0) >= 0`` a small step along the prior score raises the
decoded log-density; that sign is what ``sa_verify`` reports.

Without access to ``score_0`` the same quantity ``omega_t = v_t . score_t(x_t)``
can be propagated from its value at T with

    d omega = -div((du/dx) v) dt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateScoreError, DomainError, IntegrationError
from .integrators import TimeGrid, _as_batch
from .numerics import chi2_quantile, rademacher
from .targets import APPC3_LATENTS

ALIGNMENT_LOG_SNR = 1.0


def prior_guidance_latent(x_T, scale=None, *, quantile=None, sigma_T: float = 1.0):
    """Rescale latents along the prior score of an isotropic Gaussian prior.

    Args:
        x_T: Latent(s), shape ``(D,)`` or ``(n, D)``.
        scale: Multiplicative factor applied directly.
        quantile: Alternatively, choose the new norm so that
            ``|x|^2 / sigma_T^2`` equals the ``quantile`` level of chi^2(D).
        sigma_T: Prior standard deviation.
    """
    x_T = np.asarray(x_T, dtype=float)
    if (scale is None) == (quantile is None):
        raise DomainError("give exactly one of scale and quantile")
    if scale is not None:
        return scale * x_T
    norms = np.linalg.norm(x_T, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateScoreError("zero latent has no direction to rescale along")
    target = sigma_T * np.sqrt(chi2_quantile(quantile, x_T.shape[-1]))
    return x_T * (target / norms)


def appc3_latent(name: str, sigma_T: float = 1.0, scale: float = 1.0):
    """The two reference latents of the three-component mixture, scaled by ``sigma_T``."""
    return scale * sigma_T * np.asarray(APPC3_LATENTS[name], dtype=float)


def alignment_grid(schedule, steps: int, endpoint: str = "log-snr-1", spacing: str = "log-snr"):
    """Grid from T to the verification endpoint.

    ``endpoint="log-snr-1"`` stops where log-SNR equals 1; ``"data"`` stops
    at the default data-side ``t_end``.
    """
    if endpoint == "log-snr-1":
        t_end = schedule.inv_log_snr(ALIGNMENT_LOG_SNR)
    elif endpoint == "data":
        t_end = None
    else:
        raise DomainError(f"unknown endpoint {endpoint!r}")
    return TimeGrid.build(schedule, steps, t_end, spacing)


@dataclass
class SAReport:
    """Result of one batch of score-alignment verification.

    ``alignment`` is ``v_end . score_end(x_end)`` (None without a score);
    ``omega`` the score-free estimate of the same quantity (None if not run).
    Per-node arrays live in ``diagnostics``.
    """

    x_T: np.ndarray
    x_end: np.ndarray
    v_end: np.ndarray
    t_end: float
    alignment: np.ndarray | None = None
    omega: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def fraction_aligned(self) -> float:
        values = self.alignment if self.alignment is not None else self.omega
        return float(np.mean(values >= 0))


def sensitivity_decode(fld, x_T, grid: TimeGrid, v_T=None, keep_path: bool = False):
    """Euler-integrate ``dx = u dt`` jointly with ``dv = (du/dx) v dt``.

    ``v_T`` defaults to the field's score at the first node.

    Returns:
        ``(x_end, v_end)``, plus the per-node ``(xs, vs)`` when ``keep_path``.
    """
    x, batched = _as_batch(x_T)
    if v_T is None:
        if fld.score_source is None:
            raise DomainError("v_T is required when the field has no score source")
        v = fld.score_source.score(grid.times[0], x)
    else:
        v = np.array(np.broadcast_to(v_T, x.shape), dtype=float)
    xs, vs = [x], [v]
    times = grid.times
    for i in range(grid.steps):
        dt = times[i + 1] - times[i]
        u = fld.evaluate(times[i], x)
        jv = fld.jvp(times[i], x, v)
        x, v = x + u * dt, v + jv * dt
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise IntegrationError(f"non-finite sensitivity state at step {i + 1}")
        if keep_path:
            xs.append(x)
            vs.append(v)
    out = (x, v) if batched else (x[0], v[0])
    if keep_path:
        return out + (np.stack(xs), np.stack(vs))
    return out


def sa_verify(
    fld,
    x_T,
    grid: TimeGrid,
    *,
    score_source="field",
    score_free: bool = True,
    divergence: str = "exact",
    rng=None,
    n_probes: int = 1,
    prior_score=None,
) -> SAReport:
    """Check score alignment along decoded trajectories.

    Args:
        fld: Field to decode with (must provide ``jvp``; the score-free
            channel also needs second-order derivatives).
        x_T: Latent(s).
        grid: Decreasing grid ending at the verification time.
        score_source: ``"field"`` uses the field's analytic score source,
            ``None`` skips the score-based check, or pass any object with
            ``score(t, x)``.
        score_free: Also integrate the ``omega`` channel.
        divergence: ``"exact"`` or ``"hutchinson"`` for the second-order
            divergence in the omega channel (fresh probes every step).
        prior_score: ``prior_score(x)`` giving the score at T; defaults to
            the score source at the first node.
    """
    if score_source == "field":
        score_source = fld.score_source
    if divergence not in ("exact", "hutchinson"):
        raise DomainError(f"unknown divergence mode {divergence!r}")
    if score_free and divergence == "hutchinson" and rng is None:
        raise DomainError("Hutchinson estimation needs a random generator")
    x, batched = _as_batch(x_T)
    times = grid.times
    if prior_score is not None:
        v = np.asarray(prior_score(x), dtype=float)
    elif score_source is not None:
        v = score_source.score(times[0], x)
    elif fld.score_source is not None:
        v = fld.score_source.score(times[0], x)
    else:
        raise DomainError("a prior score is required to initialize the push-forward vector")
    omega = np.einsum("nd,nd->n", v, v)
    x0 = x.copy()
    omega_path = [omega.copy()]
    align_path = [omega.copy()] if score_source is not None else None
    for i in range(grid.steps):
        t = times[i]
        dt = times[i + 1] - t
        u = fld.evaluate(t, x)
        jv = fld.jvp(t, x, v)
        if score_free:
            if divergence == "exact":
                sod = fld.second_order_divergence(t, x, v)
            else:
                sod = np.zeros(x.shape[0])
                for _ in range(int(n_probes)):
                    sod = sod + fld.second_order_quadform(t, x, v, rademacher(rng, x.shape))
                sod = sod / int(n_probes)
            omega = omega - sod * dt
            omega_path.append(omega.copy())
        x, v = x + u * dt, v + jv * dt
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise IntegrationError(f"non-finite sensitivity state at step {i + 1}")
        if align_path is not None:
            align_path.append(np.einsum("nd,nd->n", v, score_source.score(times[i + 1], x)))
    diagnostics = {"times": times.copy(), "divergence": divergence}
    alignment = None
    if align_path is not None:
        diagnostics["alignment_path"] = np.stack(align_path)
        alignment = align_path[-1]
    if score_free:
        diagnostics["omega_path"] = np.stack(omega_path)
    report = SAReport(
        x0, x, v, float(times[-1]),
        alignment=alignment,
        omega=omega if score_free else None,
        diagnostics=diagnostics,
    )
    if not batched:
        report.x_T, report.x_end, report.v_end = x0[0], x[0], v[0]
    return report
