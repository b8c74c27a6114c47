"""How the accountant turns a noise level into a privacy guarantee.

Walks through the numerical privacy-loss-distribution accountant: the cost of
one Gaussian release, the effect of subsampling and composition, noise
calibration, and splitting one noise budget between two Gaussian mechanisms.

Run with ``python3 demos/02_privacy_accounting.py``.
"""
# %%
import math

from sparsedp import privacy_accountant as pa

# %% A single full-batch release is the classic Gaussian mechanism, which has
# a closed form we can check against.
for sigma in (0.5, 1.0, 2.0):
  print(f"sigma={sigma}: numeric delta(1) = {pa.delta_for(sigma, 1.0, 1, 1.0):.6f}"
        f"  closed form = {pa.gaussian_delta(sigma, 1.0):.6f}")

# %% Subsampling with rate gamma and running many steps.
delta = 1e-5
for steps in (100, 1_000, 10_000):
  eps = pa.epsilon_for(1.0, 0.01, steps, delta)
  print(f"sigma=1, gamma=0.01, T={steps:>6}: epsilon = {eps:.3f}")

# %% Calibration finds the smallest noise multiplier that meets a target.
sigma = pa.calibrate_sigma(1.0, delta, gamma=0.02, steps=500)
print(f"sigma for (1, 1e-5) at gamma=0.02, T=500: {sigma:.4f}")

# %% Two Gaussian releases per step cost the same as one with the composed
# multiplier, so a total noise level can be split at any ratio.
s1, s2 = pa.split_sigma(sigma, ratio=1.5)
print(f"split into sigma1={s1:.3f}, sigma2={s2:.3f}; "
      f"recomposed = {pa.compose_gaussian_sigmas(s1, s2):.4f}")
print(f"epsilon of the split pair: {pa.adafest_budget(s1, s2, 0.02, 500, delta):.4f}"
      f" (target 1.0)")
print(f"equal sigmas: pair {pa.adafest_budget(sigma, sigma, 0.02, 500, delta):.4f}"
      f" = single at sigma/sqrt(2) "
      f"{pa.epsilon_for(sigma / math.sqrt(2), 0.02, 500, delta):.4f}")
