"""
Gaze points to window heatmaps
==============================

A gaze track is a sequence of normalized (x, y) fixations, one per frame,
some of them flagged invalid. Each frame becomes a 64x64 Gaussian heatmap,
and heatmaps are averaged over the same 32-frame windows (stride 16) that
the video features use.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import numpy as np
from matplotlib import pyplot as plt

from gazenlq.data import SyntheticSpec, generate_dataset
from gazenlq.heatmaps import GazePoint, build_gaze_heatmap, complement_heatmap, window_average_heatmaps

out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)

###############################################################################
# One fixation gives an isotropic Gaussian; grid cell i sits at coordinate i/64.

center = build_gaze_heatmap([GazePoint(0, 0.5, 0.5)], sigma=2)
print("argmax of a centered fixation:", tuple(int(i) for i in np.unravel_index(center.argmax(), center.shape)))

corner = build_gaze_heatmap([(0.0, 0.0)], sigma=2)
rr, cc = np.mgrid[:64, :64]
print("mass within 5 cells of a corner fixation: %.4f" % corner[np.hypot(rr, cc) <= 5].sum())

###############################################################################
# A frame with no valid sample carries no information, so it maps to the
# uniform distribution.

blank = build_gaze_heatmap([GazePoint(0, 0.2, 0.2, valid=False)], sigma=2)
print("invalid-only frame is uniform:", np.allclose(blank, 1 / 4096))

###############################################################################
# Window averaging. Here 48 frames: 32 uniform, then 16 fixed on cell (10, 10).
# The second window straddles both halves and ends up half uniform, half delta.

uniform = np.full((64, 64), 1 / 4096)
delta = np.zeros((64, 64))
delta[10, 10] = 1.0
frames = np.concatenate([np.repeat(uniform[None], 32, 0), np.repeat(delta[None], 16, 0)])
windows = window_average_heatmaps(frames)
print("windows:", len(windows), " peak of window 1: %.4f" % windows[1].max())

###############################################################################
# A synthetic video: inside the planted segment gaze fixates the target
# object's location, elsewhere it wanders uniformly. The negative map used by
# the ablation is the normalized complement.

ds = generate_dataset(SyntheticSpec(n_videos=1, frames_per_video=160, gaze_signal_strength=0.9,
                                    d_video=8, d_gaze_in=8, d_text=8))
first, last = ds.segments[0]
maps = ds.heatmaps[0]
fig, axes = plt.subplots(2, len(maps), figsize=(2 * len(maps), 4))
for t, grid in enumerate(maps):
    axes[0, t].imshow(grid, cmap="inferno")
    axes[0, t].set_title(f"w{t}" + (" *" if first <= t < last else ""), fontsize=8)
    axes[1, t].imshow(complement_heatmap(grid), cmap="inferno")
for ax in axes.flat:
    ax.axis("off")
fig.suptitle("window heatmaps (top) and complements (bottom); * marks the segment", fontsize=9)
fig.savefig(out / "01_window_heatmaps.png", dpi=80)
print("segment windows", (first, last), "->", out / "01_window_heatmaps.png")
