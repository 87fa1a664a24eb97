"""Small numerical helpers: normal quantiles, chi-square quantiles, seeding."""

from __future__ import annotations

import numpy as np
from scipy import special, stats

from .errors import DomainError


def inverse_normal_cdf(q):
    """Standard normal quantile function.

    Accepts scalars or arrays; every entry must lie strictly inside (0, 1).
    """
    q_arr = np.asarray(q, dtype=float)
    if np.any(~np.isfinite(q_arr)) or np.any((q_arr <= 0.0) | (q_arr >= 1.0)):
        raise DomainError(f"quantile level must lie in (0, 1), got {q!r}")
    out = special.ndtri(q_arr)
    return float(out) if out.ndim == 0 else out


def chi2_quantile(q: float, dof: int) -> float:
    if not 0.0 < q < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {q!r}")
    if dof < 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {dof}")
    return float(stats.chi2.ppf(q, dof))


def spawn_generators(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-item generators derived from one seed.

    Item ``i`` always gets the same stream regardless of how items are later
    grouped into batches or workers.
    """
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def standard_normal(rng, shape) -> np.ndarray:
    """Draw standard normals from one generator or from one generator per batch row.

    With a sequence of generators, row ``i`` of the leading axis comes from
    ``rng[i]``; the remaining axes are drawn in one call per row.
    """
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    rows = list(rng)
    if len(rows) != shape[0]:
        raise ValueError(f"got {len(rows)} generators for a batch of {shape[0]}")
    return np.stack([g.standard_normal(shape[1:]) for g in rows])


def rademacher(rng, shape) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return 2.0 * rng.integers(0, 2, size=shape) - 1.0
    rows = list(rng)
    if len(rows) != shape[0]:
        raise ValueError(f"got {len(rows)} generators for a batch of {shape[0]}")
    return np.stack([2.0 * g.integers(0, 2, size=shape[1:]) - 1.0 for g in rows])
