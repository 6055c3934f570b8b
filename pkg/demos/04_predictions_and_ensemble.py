"""
Soft-NMS, prediction files and ensembling
=========================================

Post-processing works on plain (start, end, score) moments, so it can be
explored without any model.
"""

import tempfile
from pathlib import Path

from gazenlq.inference import MomentPrediction, evaluate, soft_nms
from gazenlq.predictions import dumps_predictions, ensemble_predictions, read_predictions, write_predictions

###############################################################################
# Gaussian Soft-NMS decays overlapping moments instead of deleting them:
# a duplicate of the winner keeps exp(-1/0.5) of its score.

dup = soft_nms([MomentPrediction(0, 1, 0.9), MomentPrediction(0, 1, 0.8)])
print("duplicate rescored to %.5f" % dup[1].score)

###############################################################################
# Two "models" disagree on one query. Each file keeps five moments per query.

key = ("clip0", "clip0", 0)
model_a = {key: [MomentPrediction(10, 20, 0.9), MomentPrediction(11, 21, 0.7), MomentPrediction(40, 45, 0.3)]}
model_b = {key: [MomentPrediction(40, 46, 0.8), MomentPrediction(12, 19, 0.6)]}

tmp = Path(tempfile.mkdtemp())
write_predictions(tmp / "a.json", model_a)
print((tmp / "a.json").read_text())

###############################################################################
# Ensembling pools the moments with normalized weights and runs Soft-NMS on
# the pool. A zero weight removes a file entirely.

for weights in ([1, 1], [3, 1], [1, 0]):
    merged = ensemble_predictions([read_predictions(tmp / "a.json"), model_b], weights)
    top = merged[key][0]
    print(f"weights {weights}: top moment [{top.start_s}, {top.end_s}] score {top.score:.3f}")

###############################################################################
# Recall@k at IoU thresholds 0.3 and 0.5, as reported for NLQ.

gts = {key: (10.0, 20.0)}
print(evaluate(ensemble_predictions([model_a, model_b]), gts))
print(dumps_predictions(ensemble_predictions([model_a, model_b])), end="")
