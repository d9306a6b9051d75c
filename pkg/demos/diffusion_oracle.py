"""Reverse diffusion with the true noise recovers x0; forward noising hits the marginals."""
import numpy as np

from inbetween.diffusion import default_schedule, forward_noise, sample

rng = np.random.default_rng(0)
x0 = rng.uniform(-1, 1, size=(8, 16, 16, 12))

for T in (2, 10, 50):
    s = default_schedule(T)

    def oracle(x, t):
        ab = s.alpha_bar(t)
        return (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)

    err = np.abs(sample(oracle, x0.shape, s, np.random.default_rng(T)) - x0).max()
    print(f"T={T:3d}  alpha_bar_T={s.alpha_bar(T):.2e}  oracle-sampler max error {err:.1e}")

s = default_schedule(50)
x = forward_noise(np.ones(200_000), 25, rng.standard_normal(200_000), s)
print(f"x_25 from x0=1: mean {x.mean():.4f} (expect {np.sqrt(s.alpha_bar(25)):.4f}), var {x.var():.4f} (expect {1 - s.alpha_bar(25):.4f})")
