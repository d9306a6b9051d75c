"""Sprite scene -> Horn-Schunck flow -> moving region, trajectories and sparse controls.

Writes demos/out/flow_and_controls.png.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from inbetween.controlgen import auto_trajectories, motion_region, render_sparse_controls
from inbetween.media import random_scene_spec, render_scene
from inbetween.optflow import estimate_flow, flow_to_color

OUT = Path(__file__).parent / "out"

rng = np.random.default_rng(3)
truth = render_scene(random_scene_spec(rng, max_sprites=1, kinds=("linear",), background_pattern=0.1))
frames = truth.clip.frames

flow = estimate_flow(frames[0], frames[1])
inside = truth.masks[0][0]
epe = np.hypot(*(flow - truth.flows[0])[inside].T).mean()
print(f"sprite-interior endpoint error: {epe:.3f} px")

region = motion_region(frames[0], frames[1], flow)
iou = (region & inside).sum() / max((region | inside).sum(), 1)
print(f"moving-region IoU vs true sprite: {iou:.2f}")

trajs = auto_trajectories(frames[0], frames[-1], count=3, frames=len(frames))
true_move = truth.trajectories[0][-1] - truth.trajectories[0][0]
for tr in trajs:
    print("trajectory from", np.round(tr.xy[0], 1), "moves", np.round(tr.xy[-1] - tr.xy[0], 1), " sprite moves", np.round(true_move, 1))
controls = render_sparse_controls(trajs, frames.shape[1:3] + (len(frames),))

OUT.mkdir(exist_ok=True)
fig, ax = plt.subplots(2, 4, figsize=(10, 5))
for a in ax.flat:
    a.axis("off")
ax[0, 0].imshow(frames[0]), ax[0, 0].set_title("frame 0")
ax[0, 1].imshow(frames[-1]), ax[0, 1].set_title("last frame")
ax[0, 2].imshow(flow_to_color(flow, 4.0)), ax[0, 2].set_title("HS flow 0->1")
ax[0, 3].imshow(region, cmap="gray"), ax[0, 3].set_title(f"moving region (IoU {iou:.2f})")
for i, k in enumerate((1, 3, 5, 7)):
    ax[1, i].imshow(controls[k]), ax[1, i].set_title(f"controls, frame {k}")
fig.tight_layout()
fig.savefig(OUT / "flow_and_controls.png", dpi=100)
print("wrote", OUT / "flow_and_controls.png")
