"""Discrete Frechet distance and the motion metric on a ground-truth clip."""
import numpy as np

from inbetween.controlgen import Trajectory
from inbetween.metrics import discrete_frechet, held_out_scenes, motion_metric

a = [(0, 0), (1, 0), (2, 0), (3, 0)]
print("identical curves:", discrete_frechet(a, a))
print("shifted by (0, 2):", discrete_frechet(a, [(x, y + 2) for x, y in a]))
print("reversed:", discrete_frechet(a, a[::-1]))

# the true clip follows its own path, so it scores well against it and badly against the reverse
for truth in held_out_scenes(5):
    traj = Trajectory.from_points(truth.trajectories[-1])
    fwd = motion_metric(truth.clip, traj)
    rev = motion_metric(truth.clip, traj.reversed())
    print(f"ground-truth clip: vs commanded {fwd:.2f} px, vs reversed {rev:.2f} px")
