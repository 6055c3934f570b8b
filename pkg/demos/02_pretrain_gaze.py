"""
Pretraining the gaze estimator
==============================

The estimator reads per-window video features and must produce a heatmap of
where the wearer looks. It is trained with two terms: a contrastive loss that
pairs each window's video embedding with the embedding of its true heatmap
(other windows in the batch are negatives) and a KL term on the predicted map.

This demo uses a reduced corpus so it finishes in a few minutes on a CPU.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import numpy as np
from matplotlib import pyplot as plt

from gazenlq.data import SyntheticSpec, generate_dataset
from gazenlq.experiments import PRETRAIN_FIRST_INDEX, gaze_argmax_accuracy
from gazenlq.gaze import GazeEstimatorConfig
from gazenlq.pretrain import pretrain_gaze, pretrain_pairs

out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)

###############################################################################
# The pretraining corpus and the held-out videos come from the same synthetic
# world (same target locations and feature directions) but disjoint video ids.

world = dict(frames_per_video=256, gaze_signal_strength=0.8, seed=0)
corpus = generate_dataset(SyntheticSpec(n_videos=192, first_index=PRETRAIN_FIRST_INDEX, **world))
held_out = generate_dataset(SyntheticSpec(n_videos=32, **world))
print("corpus windows:", sum(len(h) for h in corpus.heatmaps))

###############################################################################
# Train. Each log row is (epoch, step, nce, kl, total).

res = pretrain_gaze(pretrain_pairs(corpus), GazeEstimatorConfig(dropout=0.3), epochs=6, seed=0)
rows = np.array(res.log_rows)
print("first/last total loss: %.3f / %.3f" % (rows[:5, 4].mean(), rows[-5:, 4].mean()))

fig, ax = plt.subplots(figsize=(5, 3))
ax.plot(rows[:, 1], rows[:, 2], label="contrastive")
ax.plot(rows[:, 1], rows[:, 3], label="KL")
ax.set_xlabel("step")
ax.legend()
fig.tight_layout()
fig.savefig(out / "02_pretrain_loss.png", dpi=80)

###############################################################################
# Learnability: on held-out in-segment windows, does the predicted argmax land
# within 3 cells of the planted target location?

acc = gaze_argmax_accuracy(res.model, held_out)
print("held-out argmax accuracy: %.1f%%" % (100 * acc))
