"""Prediction files, ensembling and the metrics report.

Prediction files follow the Ego4D NLQ challenge layout::

    {"version": "1.0", "challenge": "ego4d_nlq_challenge", "results": [
        {"clip_uid": ..., "annotation_uid": ..., "query_idx": ...,
         "predicted_times": [[start_s, end_s, score], ...]}]}

written on one line with every float printed to exactly six decimals.
"""

import csv
import json
from pathlib import Path

from .inference import MomentPrediction, soft_nms

VERSION = "1.0"
CHALLENGE = "ego4d_nlq_challenge"
MAX_PREDICTIONS = 5
_RESULT_KEYS = ("clip_uid", "annotation_uid", "query_idx", "predicted_times")


class PredictionFileError(ValueError):
    pass


def _fmt(x):
    return f"{float(x) + 0.0:.6f}"


def dumps_predictions(preds) -> str:
    """Serialize ``{(clip_uid, annotation_uid, query_idx): [MomentPrediction]}``."""
    results = []
    for (clip_uid, annotation_uid, query_idx), moments in preds.items():
        moments = list(moments)[:MAX_PREDICTIONS]
        times = ", ".join(f"[{_fmt(m.start_s)}, {_fmt(m.end_s)}, {_fmt(m.score)}]" for m in moments)
        results.append(
            f'{{"clip_uid": {json.dumps(clip_uid)}, "annotation_uid": {json.dumps(annotation_uid)}, '
            f'"query_idx": {int(query_idx)}, "predicted_times": [{times}]}}'
        )
    return (
        f'{{"version": {json.dumps(VERSION)}, "challenge": {json.dumps(CHALLENGE)}, '
        f'"results": [{", ".join(results)}]}}\n'
    )


def write_predictions(path, preds):
    Path(path).write_text(dumps_predictions(preds), encoding="utf-8")


def loads_predictions(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PredictionFileError(f"not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or list(obj) != ["version", "challenge", "results"]:
        raise PredictionFileError("top-level keys must be version, challenge, results (in order)")
    if obj["version"] != VERSION or obj["challenge"] != CHALLENGE:
        raise PredictionFileError("unexpected version or challenge field")
    preds = {}
    for res in obj["results"]:
        if not isinstance(res, dict) or tuple(res) != _RESULT_KEYS:
            raise PredictionFileError(f"result entries must have keys {_RESULT_KEYS}")
        if not isinstance(res["query_idx"], int) or isinstance(res["query_idx"], bool):
            raise PredictionFileError("query_idx must be an integer")
        times = res["predicted_times"]
        if len(times) > MAX_PREDICTIONS:
            raise PredictionFileError(f"more than {MAX_PREDICTIONS} predictions for a query")
        key = (str(res["clip_uid"]), str(res["annotation_uid"]), res["query_idx"])
        if key in preds:
            raise PredictionFileError(f"duplicate query {key}")
        try:
            preds[key] = [MomentPrediction(float(s), float(e), float(c)) for s, e, c in times]
        except (TypeError, ValueError) as exc:
            raise PredictionFileError(f"bad predicted_times for {key}: {exc}") from exc
    return preds


def read_predictions(path):
    return loads_predictions(Path(path).read_text(encoding="utf-8"))


def ensemble_predictions(pred_sets, weights=None, sigma=0.5, score_floor=0.001, method="gaussian"):
    """Weighted pooling of several prediction sets followed by joint Soft-NMS.

    Weights are normalized to sum to one; sets with zero weight are ignored.
    Each query keeps its top five moments.
    """
    if not pred_sets:
        raise ValueError("nothing to ensemble")
    if weights is None:
        weights = [1.0] * len(pred_sets)
    if len(weights) != len(pred_sets):
        raise ValueError("need one weight per prediction set")
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise ValueError("weights must be >= 0 with at least one positive")
    queries = set(pred_sets[0])
    for other in pred_sets[1:]:
        diff = queries.symmetric_difference(other)
        if diff:
            raise ValueError(f"query sets differ: {sorted(diff)}")
    total = float(sum(weights))
    merged = {}
    for key in pred_sets[0]:
        pool = []
        for preds, w in zip(pred_sets, weights):
            if w == 0:
                continue
            scale = w / total
            pool.extend(MomentPrediction(m.start_s, m.end_s, m.score * scale) for m in preds[key])
        merged[key] = soft_nms(pool, sigma, score_floor, method, max_keep=MAX_PREDICTIONS)
    return merged


def write_metrics(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, value in result.as_rows():
            w.writerow([name, f"{value:.4f}"])


def read_metrics(path):
    with open(path, newline="") as fh:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(fh)}


def gts_from_samples(samples):
    return {s.key: tuple(s.gt_interval) for s in samples}
