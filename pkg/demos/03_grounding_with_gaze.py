"""
Does gaze help localization?
============================

Train the same grounding model twice on the same split, once with the gaze
stream switched off and once fed by the pretrained estimator, then compare
validation recall. At full size (256 videos, 5 seeds) this is the
directional acceptance check; here one seed runs on the default recipe,
about five minutes on one CPU core.
"""

import sys

from gazenlq.experiments import DeskRecipe, compare_gaze_modes, pretrain_for_world

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
recipe = DeskRecipe()

###############################################################################
# Gaze estimator for this synthetic world (its own video ids).

gaze = pretrain_for_world(recipe, seed).model

###############################################################################
# Grounding with and without gaze. The estimator stays frozen.

results = compare_gaze_modes(recipe, seed, modes=("off", "positive", "negative"), gaze=gaze)
print(f"{'mode':>9}  R1@0.3  R1@0.5  R5@0.3  R5@0.5")
for mode, r in results.items():
    print(f"{mode:>9}  {r.r1_03:6.1f}  {r.r1_05:6.1f}  {r.r5_03:6.1f}  {r.r5_05:6.1f}")
print("gap positive - off at R1@0.5: %+.1f" % (results["positive"].r1_05 - results["off"].r1_05))
