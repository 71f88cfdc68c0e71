"""Variance-preserving diffusion algebra.

Convention: t=0 is clean data, t=1 is (almost) pure noise. The marginal of
the forward process is N(alpha_t x_0, sigma_t^2 I) with

    log alpha_t = -1/4 t^2 (beta1 - beta0) - 1/2 t beta0
    sigma_t     = sqrt(1 - alpha_t^2)

Everything here is float64 and side-effect free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Raised for out-of-domain times or malformed grids."""


def _check_unit(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0) or math.isnan(t):
        raise ScheduleError(f"time {t!r} outside [0, 1]")
    return t


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta VP schedule."""

    beta0: float = 0.1
    beta1: float = 20.0

    def __post_init__(self):
        if not (0.0 < self.beta0 < self.beta1):
            raise ScheduleError(f"need 0 < beta0 < beta1, got {self.beta0}, {self.beta1}")

    def beta(self, t: float) -> float:
        return self.beta0 + t * (self.beta1 - self.beta0)

    def log_alpha(self, t: float) -> float:
        t = _check_unit(t)
        return -0.25 * t * t * (self.beta1 - self.beta0) - 0.5 * t * self.beta0

    def alpha(self, t: float) -> float:
        return math.exp(self.log_alpha(t))

    def sigma(self, t: float) -> float:
        # -expm1(2 log a) == 1 - a^2 without cancellation near t=0
        return math.sqrt(-math.expm1(2.0 * self.log_alpha(t)))

    def log_snr(self, t: float) -> float:
        t = _check_unit(t)
        if t == 0.0:
            raise ScheduleError("log-SNR is infinite at t=0 (sigma=0)")
        la = self.log_alpha(t)
        return la - 0.5 * math.log(-math.expm1(2.0 * la))

    def alpha_sigma(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised ``(alpha, sigma)`` for an array of times."""
        t = np.asarray(t, dtype=np.float64)
        if np.any((t < 0) | (t > 1)) or np.any(np.isnan(t)):
            raise ScheduleError("times outside [0, 1]")
        la = -0.25 * t * t * (self.beta1 - self.beta0) - 0.5 * t * self.beta0
        return np.exp(la), np.sqrt(-np.expm1(2.0 * la))

    def time_from_log_snr(self, lam: float) -> float:
        """Inverse of :meth:`log_snr` (solves the quadratic in t)."""
        # alpha^2 = sigmoid(2 lam)  =>  log alpha = -1/2 softplus(-2 lam)
        x = -2.0 * lam
        softplus = max(x, 0.0) + math.log1p(math.exp(-abs(x)))
        la = -0.5 * softplus
        a = 0.25 * (self.beta1 - self.beta0)
        b = 0.5 * self.beta0
        return (-b + math.sqrt(b * b - 4.0 * a * la)) / (2.0 * a)

    def drift_diffusion(self, t: float) -> tuple[float, float]:
        """Return ``(f, g2)`` with f = d log(alpha)/dt and g2 = d sigma^2/dt - 2 f sigma^2."""
        t = _check_unit(t)
        f = -0.5 * self.beta(t)
        a2 = math.exp(2.0 * self.log_alpha(t))
        # sigma^2 = 1 - a^2  =>  d sigma^2/dt = -2 f a^2
        dsigma2 = -2.0 * f * a2
        g2 = dsigma2 - 2.0 * f * (1.0 - a2)
        return f, g2


# Named configurations. "low_beta" keeps (0.002, 1); its alpha(1) ~ 0.78 does
# not reach a unit-Gaussian prior, so it is not the default.
SCHEDULES = {
    "vp": NoiseSchedule(0.1, 20.0),
    "low_beta": NoiseSchedule(0.002, 1.0),
}


def alpha(s: NoiseSchedule, t: float) -> float:
    return s.alpha(t)


def sigma(s: NoiseSchedule, t: float) -> float:
    return s.sigma(t)


def log_snr(s: NoiseSchedule, t: float) -> float:
    return s.log_snr(t)


def drift_diffusion(s: NoiseSchedule, t: float) -> tuple[float, float]:
    return s.drift_diffusion(t)


@dataclass(frozen=True)
class TimeGrid:
    epsilon: float
    T: float
    N: int
    rho: float
    times: np.ndarray = field(repr=False, compare=False)

    def __len__(self) -> int:
        return self.N

    def __getitem__(self, i):
        return self.times[i]


def karras_grid(epsilon: float = 0.002, T: float = 1.0, N: int = 50, rho: float = 7.0) -> TimeGrid:
    """rho-warped grid t_i = (eps^(1/rho) + (i-1)/(N-1) (T^(1/rho) - eps^(1/rho)))^rho."""
    if not (0.0 < epsilon < T):
        raise ScheduleError(f"need 0 < epsilon < T, got {epsilon}, {T}")
    if int(N) != N or N < 2:
        raise ScheduleError(f"need integer N >= 2, got {N}")
    if not rho > 0:
        raise ScheduleError(f"need rho > 0, got {rho}")
    N = int(N)
    lo, hi = epsilon ** (1.0 / rho), T ** (1.0 / rho)
    frac = np.arange(N, dtype=np.float64) / (N - 1)
    times = (lo + frac * (hi - lo)) ** rho
    # pin the endpoints; the power can round them by an ulp
    times[0], times[-1] = epsilon, T
    if not np.all(np.diff(times) > 0):
        raise ScheduleError("grid is not strictly increasing (N too large for rho?)")
    times.setflags(write=False)
    return TimeGrid(float(epsilon), float(T), N, float(rho), times)


def skip_coeffs(t, eta: float = 0.5):
    """Boundary-preserving skip coefficients ``(c_skip, c_out)``.

    Works on scalars and arrays; c_skip(0)=1 and c_out(0)=0 exactly.
    """
    s = 10.0 * np.asarray(t, dtype=np.float64)
    denom = s * s + eta * eta
    c_skip = eta * eta / denom
    c_out = s / np.sqrt(denom)
    if np.ndim(c_skip) == 0:
        return float(c_skip), float(c_out)
    return c_skip, c_out


def perturb(x_eps: np.ndarray, t: float, z: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """alpha_t x_eps + sigma_t z."""
    x_eps, z = np.asarray(x_eps), np.asarray(z)
    if x_eps.shape != z.shape:
        raise ValueError(f"shape mismatch: {x_eps.shape} vs {z.shape}")
    return s.alpha(t) * x_eps + s.sigma(t) * z


def dpmpp_step(x_t: np.ndarray, t: float, t_prev: float, x0_hat: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """First-order data-prediction step from ``t`` down to ``t_prev``."""
    if not (0.0 < t_prev < t <= 1.0):
        raise ScheduleError(f"need 0 < t_prev < t <= 1, got t_prev={t_prev}, t={t}")
    h = s.log_snr(t_prev) - s.log_snr(t)
    ratio = s.sigma(t_prev) / s.sigma(t)
    return ratio * x_t - s.alpha(t_prev) * math.expm1(-h) * x0_hat


def dpmpp_coeffs(t: np.ndarray, t_prev: np.ndarray, s: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised coefficients ``(a, b)`` so that the step is ``a*x_t + b*x0_hat``."""
    t = np.asarray(t, dtype=np.float64)
    t_prev = np.asarray(t_prev, dtype=np.float64)
    if np.any(~((0.0 < t_prev) & (t_prev < t) & (t <= 1.0))):
        raise ScheduleError("need 0 < t_prev < t <= 1 elementwise")
    al, sl = s.alpha_sigma(t)
    ap, sp = s.alpha_sigma(t_prev)
    h = (np.log(ap) - np.log(sp)) - (np.log(al) - np.log(sl))
    return sp / sl, -ap * np.expm1(-h)
