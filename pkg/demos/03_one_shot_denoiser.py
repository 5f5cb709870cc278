"""One-shot denoising under the forward diffusion observation model.

Given Gaussian corruption of scale sigma, the matching timestep satisfies
(1 - alpha_bar_t) / alpha_bar_t = sigma^2 and the noisy input is scaled
by sqrt(alpha_bar_t).  The analytic denoiser then returns the exact
posterior mean of the clean point under the data's mixture prior, which
no other single-step estimator can beat in mean squared error.
"""

import math

import numpy as np

from smoothcert import (
    CosineSchedule,
    RngStream,
    analytic_denoiser,
    default_geometry,
    denoise_once,
    find_timestep,
    noise_and_scale,
    sample_id,
)

schedule = CosineSchedule.create()
spec = default_geometry()
clean = sample_id(spec, 5000, RngStream(0)).points

for sigma in (0.12, 0.25, 0.5):
    t = find_timestep(schedule, sigma)
    ab = schedule.alpha_bar[t]
    x_t, _ = noise_and_scale(clean, sigma, schedule, RngStream(1))
    est = denoise_once(analytic_denoiser(spec), x_t, t, schedule)
    mse = ((est - clean) ** 2).sum(axis=1).mean()
    noop = ((x_t / math.sqrt(ab) - clean) ** 2).sum(axis=1).mean()
    print(f"sigma {sigma:4}: timestep {t:3} (alpha_bar {ab:.4f}) | "
          f"posterior-mean MSE {mse:.4f} vs unscale-only {noop:.4f}")

# the posterior mean blends the observation with the nearest components
t = find_timestep(schedule, 0.5)
ab = math.sqrt(schedule.alpha_bar[t])
y = np.array([2.6, 0.4])
out = denoise_once(analytic_denoiser(spec), ab * y, t, schedule)
print(f"\nobservation {y} is pulled toward the nearest blob: {np.round(out, 3)}")
