"""Walk one latent down the 50-point grid with the exact one-point denoiser.

With a single training point the probability-flow trajectory is known in
closed form, so every DPM-Solver++ step can be checked against it.  The
many-step Euler oracle is shown for comparison.
"""

import numpy as np

from mlct.oracle import exact_denoiser, pf_ode_euler_sample
from mlct.schedule import NoiseSchedule, dpmpp_step, karras_grid

s = NoiseSchedule()
grid = karras_grid(0.002, 1.0, 50, 7.0)
rng = np.random.default_rng(0)
x_star = rng.uniform(-1, 1, 6)
x_T = rng.standard_normal(6)


def closed(t):
    return s.alpha(t) * x_star + s.sigma(t) / s.sigma(1.0) * (x_T - s.alpha(1.0) * x_star)


x = x_T.copy()
print(" i       t      |x - closed form|")
for i in range(grid.N - 1, 0, -1):
    t, t_prev = grid.times[i], grid.times[i - 1]
    x = dpmpp_step(x, t, t_prev, exact_denoiser(x, t, [x_star], s), s)
    if i % 8 == 1:
        print(f"{i:2d}  {t_prev:.5f}   {np.abs(x - closed(t_prev)).max():.2e}")

den = lambda y, t: exact_denoiser(y, t, [x_star], s)
for steps in (25, 50, 100, 200, 400):
    raw = pf_ode_euler_sample(den, s, steps, seed=0, x_T=x_T, denoise_final=False)
    print(f"Euler {steps:3d} steps: |x(eps) - closed form| = {np.abs(raw - closed(0.002)).max():.2e}")
