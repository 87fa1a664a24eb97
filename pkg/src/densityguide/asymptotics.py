"""Normalized-Laplacian statistic and its Gaussian limit.

For a point ``x`` drawn from ``p_t`` the statistic

    h(x) = sigma_t^2 (lap log p_t(x) + |score_t(x)|^2) / sqrt(2D)

approaches N(0, 1) as D grows for the target families studied here. For
point-mass mixtures it reduces to

    h(x) = (sum_k w_k(x) |x - mu_k|^2 / sigma^2 - D) / sqrt(2D)

with responsibilities ``w_k``, which avoids any D x D object and is what the
large-D experiments evaluate.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError

MIN_NORMALITY_SAMPLES = 20
LINDEBERG_LIMIT = 0.05


def h_statistic(target, schedule, t, x):
    """Closed-form ``h`` using the mixture's ``Delta p / p``."""
    sigma = schedule.alpha_sigma(t)[1]
    return sigma**2 * target.laplace_ratio(schedule, t, x) / np.sqrt(2.0 * target.dim)


def h_point_mass(x, means, sigma: float, weights=None, chunk: int = 2048):
    """Responsibility-weighted ``h`` for ``sum_k w_k N(mu_k, sigma^2 I)`` (mu_k already diffused)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    means = np.asarray(means, dtype=float)
    n, dim = x.shape
    log_w = np.full(means.shape[0], -np.log(means.shape[0])) if weights is None else np.log(weights)
    mu_sq = np.einsum("kd,kd->k", means, means)
    out = np.empty(n)
    for lo in range(0, n, chunk):
        xb = x[lo:lo + chunk]
        sq = np.einsum("nd,nd->n", xb, xb)[:, None] - 2.0 * xb @ means.T + mu_sq[None, :]
        sq = np.maximum(sq, 0.0) / sigma**2
        logits = log_w - 0.5 * sq
        resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        out[lo:lo + chunk] = (np.einsum("nk,nk->n", resp, sq) - dim) / np.sqrt(2.0 * dim)
    return out


@dataclass(frozen=True)
class NormalityResult:
    statistic: float
    pvalue: float
    skew_z: float
    kurtosis_z: float
    degenerate: bool = False


def _skew_z(b1, n):
    y = b1 * np.sqrt((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0)))
    beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0) / (
        (n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0)
    )
    w2 = -1.0 + np.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / np.sqrt(0.5 * np.log(w2))
    alpha = np.sqrt(2.0 / (w2 - 1.0))
    ya = y / alpha
    return delta * np.log(ya + np.sqrt(ya * ya + 1.0))


def _kurtosis_z(b2, n):
    mean = 3.0 * (n - 1.0) / (n + 1.0)
    var = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0) ** 2 * (n + 3.0) * (n + 5.0))
    x = (b2 - mean) / np.sqrt(var)
    root_beta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0)) * np.sqrt(
        6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0))
    )
    a = 6.0 + 8.0 / root_beta1 * (2.0 / root_beta1 + np.sqrt(1.0 + 4.0 / root_beta1**2))
    term1 = 1.0 - 2.0 / (9.0 * a)
    denom = 1.0 + x * np.sqrt(2.0 / (a - 4.0))
    if denom == 0:
        return np.inf if x < 0 else -np.inf
    term2 = np.sign(denom) * np.cbrt((1.0 - 2.0 / a) / abs(denom))
    return (term1 - term2) / np.sqrt(2.0 / (9.0 * a))


def normality_test(samples) -> NormalityResult:
    """Omnibus normality test combining skewness and kurtosis z-scores.

    ``K^2 = Z_skew^2 + Z_kurt^2`` is referred to chi^2 with two degrees of
    freedom. Constant samples give ``p = 0`` with ``degenerate=True``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < MIN_NORMALITY_SAMPLES:
        raise DomainError(f"normality test needs at least {MIN_NORMALITY_SAMPLES} samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise DomainError("samples must be finite")
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 <= (np.finfo(float).eps * max(1.0, abs(x.mean()))) ** 2:
        return NormalityResult(np.inf, 0.0, np.inf, np.inf, degenerate=True)
    b1 = np.mean(d**3) / m2**1.5
    b2 = np.mean(d**4) / m2**2
    zs = float(_skew_z(b1, float(n)))
    zk = float(_kurtosis_z(b2, float(n)))
    k2 = zs * zs + zk * zk
    return NormalityResult(k2, float(np.exp(-0.5 * k2)), zs, zk)


@dataclass(frozen=True)
class MomentReport:
    mean: float
    variance: float
    pvalue: float
    statistic: float
    n: int


def _moments(h) -> MomentReport:
    res = normality_test(h)
    return MomentReport(float(np.mean(h)), float(np.var(h, ddof=1)), res.pvalue, res.statistic, int(h.size))


def _cell_rng(seed, *keys):
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def mixture_h_samples(rng, n_components: int, dim: int, sigma: float, n_samples: int, chunk: int = 2048):
    """Draw a random point-mass mixture and ``h`` at ``n_samples`` noisy samples.

    Means ``mu_k ~ N(0, sigma^2 I)``; samples ``x = mu_k + sigma eps`` with a
    uniformly chosen component. Returns ``(h, labels)``.
    """
    if min(n_components, dim, n_samples) < 1 or sigma <= 0:
        raise DomainError("mixture experiment parameters must be positive")
    means = sigma * rng.standard_normal((n_components, dim))
    labels = rng.integers(0, n_components, size=n_samples)
    h = np.empty(n_samples)
    for lo in range(0, n_samples, chunk):
        lab = labels[lo:lo + chunk]
        x = means[lab] + sigma * rng.standard_normal((lab.size, dim))
        h[lo:lo + chunk] = h_point_mass(x, means, sigma, chunk=chunk)
    return h, labels


@dataclass(frozen=True)
class MixtureCell:
    dim: int
    sigma: float
    seed: int
    repeat: int
    mean: float
    variance: float
    pvalue: float


def _run_cell(args):
    n_components, dim, sigma, n_samples, seed, i_dim, i_sigma, rep = args
    rng = _cell_rng(seed, i_dim, i_sigma, rep)
    h, _ = mixture_h_samples(rng, n_components, dim, sigma, n_samples)
    m = _moments(h)
    return MixtureCell(dim, sigma, seed, rep, m.mean, m.variance, m.pvalue)


@dataclass(frozen=True)
class MixtureSummary:
    dim: int
    sigma: float
    median_mean: float
    median_variance: float
    median_pvalue: float
    min_pvalue: float
    max_pvalue: float
    repeats: int


def summarize_cells(cells) -> list[MixtureSummary]:
    out = []
    keys = sorted({(c.dim, c.sigma) for c in cells})
    for dim, sigma in keys:
        group = [c for c in cells if c.dim == dim and c.sigma == sigma]
        p = np.array([c.pvalue for c in group])
        out.append(MixtureSummary(
            dim, sigma,
            float(np.median([c.mean for c in group])),
            float(np.median([c.variance for c in group])),
            float(np.median(p)), float(p.min()), float(p.max()), len(group),
        ))
    return out


def mixture_normality_experiment(
    n_components: int = 128,
    dims=(64, 128, 256, 512, 1024, 2048, 4096),
    sigmas=(0.5, 1.0, 10.0),
    n_samples: int = 16384,
    seed: int = 0,
    repeats: int = 5,
    workers: int = 1,
):
    """Per-cell moments and normality p-values of ``h`` over a (D, sigma) grid.

    Each (D, sigma, repeat) cell draws its own mixture from a generator keyed
    on ``(seed, D index, sigma index, repeat)``, so results do not depend on
    ``workers``.

    Returns:
        ``(cells, summaries)``: raw per-repeat cells and per-(D, sigma)
        medians with p-value ranges.
    """
    jobs = [
        (n_components, int(d), float(s), n_samples, seed, i, j, r)
        for i, d in enumerate(dims)
        for j, s in enumerate(sigmas)
        for r in range(repeats)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(job) for job in jobs]
    return cells, summarize_cells(cells)


def chi2_case_check(dim: int, n: int, rng) -> MomentReport:
    """``h`` for a single point mass: ``(chi^2_D - D) / sqrt(2D)``."""
    if dim < 1 or n < 1:
        raise DomainError("dim and n must be >= 1")
    h = (rng.chisquare(dim, size=n) - dim) / np.sqrt(2.0 * dim)
    if n < MIN_NORMALITY_SAMPLES:
        return MomentReport(float(np.mean(h)), float(np.var(h, ddof=1)) if n > 1 else float("nan"),
                            float("nan"), float("nan"), n)
    return _moments(h)


@dataclass(frozen=True)
class NonisotropicReport:
    mean: float
    variance: float
    pvalue: float
    max_weight: float
    condition_satisfied: bool
    n: int


def nonisotropic_h(spectrum, eps_sq):
    """``sum_i lam_i (eps_i^2 - 1) / (sqrt(2) |lam|)`` for squared standard normals ``eps_sq``."""
    lam = np.asarray(spectrum, dtype=float)
    return (eps_sq - 1.0) @ lam / (np.sqrt(2.0) * np.linalg.norm(lam))


def nonisotropic_case_check(spectrum, n: int, rng, chunk: int = 4096) -> NonisotropicReport:
    """Quadratic-form ``h`` for a Gaussian with covariance eigenvalues ``spectrum``.

    ``condition_satisfied`` reports whether the largest share
    ``max lam^2 / sum lam^2`` is at most 0.05.
    """
    lam = np.asarray(spectrum, dtype=float)
    if lam.ndim != 1 or lam.size < 1 or np.any(lam <= 0):
        raise DomainError("spectrum must be a non-empty vector of positive values")
    if n < MIN_NORMALITY_SAMPLES:
        raise DomainError(f"need at least {MIN_NORMALITY_SAMPLES} samples")
    h = np.empty(n)
    for lo in range(0, n, chunk):
        m = min(chunk, n - lo)
        h[lo:lo + m] = nonisotropic_h(lam, rng.standard_normal((m, lam.size)) ** 2)
    share = float(np.max(lam**2) / np.sum(lam**2))
    m = _moments(h)
    return NonisotropicReport(m.mean, m.variance, m.pvalue, share, share <= LINDEBERG_LIMIT, n)


def as_rows(items):
    return [asdict(it) for it in items]
