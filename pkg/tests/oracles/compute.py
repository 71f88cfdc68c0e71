"""Independent oracles for the derived test values.

Nothing here imports the package.  Run it to regenerate the constants that
tests/oracle_values.py freezes:

    python3 tests/oracles/compute.py
"""

import math

import mpmath as mp
import numpy as np

mp.mp.dps = 50


def rk4_log_alpha(beta0, beta1, t_end=1.0, steps=10_000):
    # d(log a)/dt = -1/2 (beta0 + t (beta1 - beta0)),  log a(0) = 0
    f = lambda t: -0.5 * (beta0 + t * (beta1 - beta0))
    y, h = 0.0, t_end / steps
    for k in range(steps):
        t = k * h
        k1 = f(t)
        k2 = f(t + h / 2)
        k3 = f(t + h / 2)
        k4 = f(t + h)
        y += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def karras_mp(eps, T, N, rho, i):
    """1-based i, 50-digit arithmetic."""
    eps, T, rho = mp.mpf(eps), mp.mpf(T), mp.mpf(rho)
    lo, hi = eps ** (1 / rho), T ** (1 / rho)
    return (lo + mp.mpf(i - 1) / (N - 1) * (hi - lo)) ** rho


def exact_posterior_mp(x, t, data, beta0, beta1):
    la = -mp.mpf(1) / 4 * t * t * (beta1 - beta0) - mp.mpf(1) / 2 * t * beta0
    a = mp.e ** la
    s2 = 1 - a * a
    w = [mp.e ** (-sum((xi - a * di) ** 2 for xi, di in zip(x, d)) / (2 * s2)) for d in data]
    Z = sum(w)
    return [sum(wj * d[k] for wj, d in zip(w, data)) / Z for k in range(len(x))]


def expected_pair_distance(d):
    # E||x - y|| for x, y ~ N(0, I_d): sqrt(2) * E[chi_d]
    return math.sqrt(2.0) * math.sqrt(2.0) * math.gamma((d + 1) / 2) / math.gamma(d / 2)


def frechet_analytic(mu1, var1, mu2, var2):
    # diagonal covariances
    mu1, var1, mu2, var2 = map(np.asarray, (mu1, var1, mu2, var2))
    return float(((mu1 - mu2) ** 2).sum() + (var1 + var2 - 2 * np.sqrt(var1 * var2)).sum())


if __name__ == "__main__":
    print("log_alpha_rk4(0.1, 20) =", repr(rk4_log_alpha(0.1, 20.0)))
    print("log_alpha_rk4(0.002, 1) =", repr(rk4_log_alpha(0.002, 1.0)))
    print("log_alpha_rk4(0.1, 20, t=0.5) =", repr(rk4_log_alpha(0.1, 20.0, 0.5, 5000)))
    la = rk4_log_alpha(0.1, 20.0, 0.5, 5000)
    print("log_snr(0.5) =", repr(la - 0.5 * math.log(1 - math.exp(2 * la))))
    print("karras(0.002,1,50,7)[25] =", mp.nstr(karras_mp(0.002, 1, 50, 7, 25), 30))
    print("c_skip(0.002) =", repr(0.25 / (0.0004 + 0.25)))
    rng = np.random.default_rng(7)
    data = rng.normal(size=(3, 4)).tolist()
    x = rng.normal(size=4).tolist()
    print("posterior data =", data)
    print("posterior x =", x)
    post = exact_posterior_mp([mp.mpf(v) for v in x], mp.mpf("0.3"), [[mp.mpf(v) for v in d] for d in data],
                              mp.mpf("0.1"), mp.mpf(20))
    print("posterior(t=0.3) =", [float(v) for v in post])
    print("E||x-y|| d=3 =", repr(expected_pair_distance(3)))
    print("frechet diag =", frechet_analytic([0, 0], [1, 4], [1, 0.5], [2, 1]))
