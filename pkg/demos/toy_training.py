"""Short keyframes-only training run, then sampling on held-out scenes.

Usage: python demos/toy_training.py [steps] [corpus_size]
Writes demos/out/toy_training.png (rows: truth, generated; columns: frames).
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from inbetween.controlgen import CurriculumStage
from inbetween.metrics import commanded_bundle, held_out_scenes
from inbetween.model import generate
from inbetween.train import TrainConfig, make_corpus, new_state, train_stage

OUT = Path(__file__).parent / "out"
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
size = int(sys.argv[2]) if len(sys.argv) > 2 else 64

cfg = TrainConfig()
corpus = make_corpus(size)
state = new_state(cfg)
train_stage(state, CurriculumStage.KEYFRAMES_ONLY, corpus, cfg, steps=steps)
losses = np.array([loss for *_, loss in state.curve])
print(f"loss: first-50 mean {losses[:50].mean():.4f}, last-50 mean {losses[-50:].mean():.4f}")

truths = held_out_scenes(3)
state.model.eval()
clips = generate(state.model, [commanded_bundle(t, cfg.condition) for t in truths], cfg.schedule, seed=0)
for t, g in zip(truths, clips):
    mse = ((g.frames - t.clip.frames)[1:-1] ** 2).mean()
    fade = np.linspace(0, 1, len(g.frames))[:, None, None, None]
    blend = (1 - fade) * t.clip.frames[0] + fade * t.clip.frames[-1]
    print(f"interior MSE {mse:.4f} (cross-fade {((blend - t.clip.frames)[1:-1] ** 2).mean():.4f})")

OUT.mkdir(exist_ok=True)
f = len(clips[0].frames)
fig, ax = plt.subplots(2 * len(truths), f, figsize=(f * 1.2, 2.6 * len(truths)))
for i, (t, g) in enumerate(zip(truths, clips)):
    for k in range(f):
        ax[2 * i, k].imshow(t.clip.frames[k])
        ax[2 * i + 1, k].imshow(np.clip(g.frames[k], 0, 1))
for a in ax.flat:
    a.axis("off")
fig.tight_layout()
fig.savefig(OUT / "toy_training.png", dpi=80)
print("wrote", OUT / "toy_training.png")
