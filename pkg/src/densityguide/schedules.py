"""Forward-process noise schedules.

A schedule fixes the Gaussian perturbation kernel
``p_t(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I)`` on ``t in (0, T]`` together with
the drift ``f = d log alpha / dt`` and squared diffusion
``g^2 = 2 sigma^2 d log(sigma / alpha) / dt`` of the matching linear SDE.

Three families are provided:

* ``vp``: variance preserving, ``alpha^2 + sigma^2 = 1`` with log-SNR linear in t.
* ``ve``: variance exploding, ``alpha = 1`` and geometric ``sigma``.
* ``fm``: flow matching / rectified flow, ``alpha + sigma = 1`` with linear ``sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import expit

from .errors import ConfigError, DomainError

KINDS = ("vp", "ve", "fm")


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable schedule description.

    Attributes:
        kind: One of ``"vp"``, ``"ve"``, ``"fm"``.
        T: Terminal time.
        lsnr_max: VP log-SNR as t -> 0.
        lsnr_min: VP log-SNR at t = T.
        sigma_min: VE noise level as t -> 0.
        sigma_max: VE noise level at T; for FM the value of sigma at T
            (must be < 1 so that alpha_T > 0).
    """

    kind: str = "vp"
    T: float = 1.0
    lsnr_max: float = 10.0
    lsnr_min: float = -10.0
    sigma_min: float = 0.01
    sigma_max: float = 50.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if not self.T > 0:
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        if self.kind == "vp" and not self.lsnr_max > self.lsnr_min:
            raise ConfigError("VP schedule needs lsnr_max > lsnr_min")
        if self.kind == "ve" and not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("VE schedule needs 0 < sigma_min < sigma_max")
        if self.kind == "fm" and not 0 < self.sigma_max < 1:
            raise ConfigError("FM schedule needs 0 < sigma_max < 1")

    # -- construction -------------------------------------------------------

    @classmethod
    def vp(cls, T=1.0, lsnr_max=10.0, lsnr_min=-10.0):
        return cls("vp", T=T, lsnr_max=lsnr_max, lsnr_min=lsnr_min)

    @classmethod
    def ve(cls, T=1.0, sigma_min=0.01, sigma_max=50.0):
        return cls("ve", T=T, sigma_min=sigma_min, sigma_max=sigma_max)

    @classmethod
    def fm(cls, T=1.0, sigma_max=0.999):
        return cls("fm", T=T, sigma_max=sigma_max)

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        cfg = dict(cfg)
        kind = str(cfg.pop("kind", "vp")).lower()
        allowed = {
            "vp": {"T", "lsnr_max", "lsnr_min"},
            "ve": {"T", "sigma_min", "sigma_max"},
            "fm": {"T", "sigma_max"},
        }.get(kind)
        if allowed is None:
            raise ConfigError(f"unknown schedule kind {kind!r}")
        extra = set(cfg) - allowed
        if extra:
            raise ConfigError(f"unexpected keys for {kind} schedule: {sorted(extra)}")
        factory = {"vp": cls.vp, "ve": cls.ve, "fm": cls.fm}[kind]
        return factory(**{k: float(v) for k, v in cfg.items()})

    def to_config(self) -> dict:
        if self.kind == "vp":
            return {"kind": "vp", "T": self.T, "lsnr_max": self.lsnr_max, "lsnr_min": self.lsnr_min}
        if self.kind == "ve":
            return {"kind": "ve", "T": self.T, "sigma_min": self.sigma_min, "sigma_max": self.sigma_max}
        return {"kind": "fm", "T": self.T, "sigma_max": self.sigma_max}

    # -- evaluation ---------------------------------------------------------

    def _check_time(self, t, *, closed_left=False):
        t_arr = np.asarray(t, dtype=float)
        lo_ok = t_arr >= 0.0 if closed_left else t_arr > 0.0
        if not np.all(np.isfinite(t_arr) & lo_ok & (t_arr <= self.T)):
            raise DomainError(f"time {t!r} outside (0, {self.T}]")
        return t_arr

    def _lsnr_slope(self):
        return (self.lsnr_min - self.lsnr_max) / self.T

    def alpha_sigma(self, t):
        """Return ``(alpha_t, sigma_t)`` for ``t in (0, T]``."""
        t = self._check_time(t)
        if self.kind == "vp":
            lam = self.lsnr_max + self._lsnr_slope() * t
            alpha, sigma = np.sqrt(expit(lam)), np.sqrt(expit(-lam))
        elif self.kind == "ve":
            sigma = self.sigma_min * (self.sigma_max / self.sigma_min) ** (t / self.T)
            alpha = np.ones_like(sigma)
        else:
            sigma = self.sigma_max * t / self.T
            alpha = 1.0 - sigma
        if np.ndim(alpha) == 0:
            return float(alpha), float(sigma)
        return alpha, sigma

    def drift_coeffs(self, t):
        """Return ``(f, g^2)`` at ``t``.

        Analytic one-sided values are returned at ``t = T``, which the
        reverse-time integrators evaluate on their first step.
        """
        t = self._check_time(t)
        if self.kind == "vp":
            lam = self.lsnr_max + self._lsnr_slope() * t
            sigma2 = expit(-lam)
            slope = self._lsnr_slope()
            f = 0.5 * sigma2 * slope
            g2 = -sigma2 * slope
        elif self.kind == "ve":
            rate = np.log(self.sigma_max / self.sigma_min) / self.T
            sigma = self.sigma_min * (self.sigma_max / self.sigma_min) ** (t / self.T)
            f = np.zeros_like(sigma)
            g2 = 2.0 * sigma**2 * rate
        else:
            c = self.sigma_max / self.T
            sigma = c * t
            alpha = 1.0 - sigma
            f = -c / alpha
            g2 = 2.0 * sigma * c / alpha
        if np.ndim(f) == 0:
            return float(f), float(g2)
        return f, g2

    def log_snr(self, t):
        t = self._check_time(t)
        if self.kind == "vp":
            out = self.lsnr_max + self._lsnr_slope() * t
        else:
            alpha, sigma = self.alpha_sigma(t)
            out = 2.0 * (np.log(alpha) - np.log(sigma))
        return float(out) if np.ndim(out) == 0 else out

    def log_snr_range(self):
        """Attained log-SNR interval ``(lambda(T), lim_{t->0} lambda(t))``."""
        if self.kind == "vp":
            hi = self.lsnr_max
        elif self.kind == "ve":
            hi = -2.0 * np.log(self.sigma_min)
        else:
            hi = np.inf
        return self.log_snr(self.T), hi

    def inv_log_snr(self, lam: float) -> float:
        """Time at which the log-SNR equals ``lam`` (root bracketing on the monotone map)."""
        lo_lam, hi_lam = self.log_snr_range()
        if not (np.isfinite(lam) and lo_lam <= lam < hi_lam):
            raise DomainError(f"log-SNR {lam} outside attained range [{lo_lam}, {hi_lam})")
        if lam == lo_lam:
            return self.T
        left = self.T * 1e-12
        while self.log_snr(left) <= lam:
            left *= 1e-12
            if left < 1e-290 * self.T:
                raise DomainError(f"log-SNR {lam} not attained at representable times")
        return float(
            optimize.brentq(lambda t: self.log_snr(t) - lam, left, self.T, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        )

    @property
    def prior_sigma(self) -> float:
        """Noise level of the terminal Gaussian used to draw latents."""
        return self.alpha_sigma(self.T)[1]
