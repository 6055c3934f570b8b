"""Moment decoding, Soft-NMS and recall@k evaluation."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MomentPrediction:
    start_s: float
    end_s: float
    score: float

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise ValueError(f"empty moment [{self.start_s}, {self.end_s}]")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class EvalResult:
    r1_03: float
    r1_05: float
    r5_03: float
    r5_05: float
    n_queries: int

    def as_rows(self):
        return [
            ("r1@0.3", self.r1_03),
            ("r1@0.5", self.r1_05),
            ("r5@0.3", self.r5_03),
            ("r5@0.5", self.r5_05),
        ]


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def decode_moments(pyramid, seconds_per_window, score_threshold=0.0, max_per_level=None,
                   video_end=None, index=0):
    """Turn one video's head outputs into scored moments.

    Location ``t`` of level ``l`` has center ``(t + 0.5) * 2**l * spw``; its
    offsets are scaled by the same stride. Moments are clipped to
    ``[0, video_end]`` (no upper clip when ``video_end`` is None) and dropped
    if they become empty.
    """
    out = []
    for lvl, (logits, offsets) in enumerate(zip(pyramid.cls_logits, pyramid.reg_offsets)):
        logits = np.asarray(_to_numpy(logits)[index], dtype=np.float64)
        offsets = np.asarray(_to_numpy(offsets)[index], dtype=np.float64)
        scores = _sigmoid(logits)
        valid = np.ones(len(scores), dtype=bool)
        if pyramid.masks:
            valid = np.asarray(_to_numpy(pyramid.masks[lvl])[index], dtype=bool)
        keep = np.flatnonzero(valid & (scores >= score_threshold))
        if max_per_level is not None and len(keep) > max_per_level:
            order = np.argsort(-scores[keep], kind="stable")[:max_per_level]
            keep = keep[order]
        unit = (2**lvl) * seconds_per_window
        for t in keep:
            c = (t + 0.5) * unit
            s = max(c - offsets[t, 0] * unit, 0.0)
            e = c + offsets[t, 1] * unit
            if video_end is not None:
                e = min(e, video_end)
            if s < e:
                out.append(MomentPrediction(float(s), float(e), float(scores[t])))
    out.sort(key=lambda m: -m.score)
    return out


def _to_numpy(x):
    if hasattr(x, "detach"):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def temporal_iou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def _pairwise_iou(seg):
    s, e = seg[:, 0], seg[:, 1]
    inter = np.clip(np.minimum(e[:, None], e[None, :]) - np.maximum(s[:, None], s[None, :]), 0, None)
    union = (e - s)[:, None] + (e - s)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def soft_nms(moments, sigma=0.5, score_floor=0.001, method="gaussian", iou_threshold=0.3,
             max_keep=None):
    """Greedy Soft-NMS over moments.

    Repeatedly selects the highest-scoring moment (ties go to the earlier
    one) and decays the rest: ``s * exp(-iou**2 / sigma)`` for ``gaussian``,
    ``s * (1 - iou)`` when ``iou > iou_threshold`` for ``linear``. Moments
    whose score falls below ``score_floor`` are discarded.
    """
    if method not in ("gaussian", "linear"):
        raise ValueError(f"unknown soft-nms method {method!r}")
    if method == "gaussian" and not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if score_floor < 0:
        raise ValueError("score_floor must be >= 0")
    moments = list(moments)
    if not moments:
        return []
    seg = np.array([[m.start_s, m.end_s] for m in moments], dtype=np.float64)
    scores = np.array([m.score for m in moments], dtype=np.float64)
    iou = _pairwise_iou(seg)
    alive = scores >= score_floor
    kept = []
    while alive.any():
        cand = np.where(alive, scores, -np.inf)
        i = int(np.argmax(cand))
        kept.append(i)
        alive[i] = False
        rest = np.flatnonzero(alive)
        if method == "gaussian":
            scores[rest] *= np.exp(-(iou[i, rest] ** 2) / sigma)
        else:
            hit = iou[i, rest] > iou_threshold
            scores[rest[hit]] *= 1.0 - iou[i, rest[hit]]
        alive[rest] = scores[rest] >= score_floor
    kept.sort(key=lambda k: -scores[k])
    out = [MomentPrediction(moments[k].start_s, moments[k].end_s, float(scores[k])) for k in kept]
    return out[:max_keep] if max_keep is not None else out


def recall_at_k(per_query_preds, gts, k, theta):
    """Percentage of ground-truth queries with an IoU >= theta hit in their top-k.

    Queries missing from ``per_query_preds`` count as misses.
    """
    if not gts:
        return 0.0
    hits = 0
    for key, gt in gts.items():
        preds = per_query_preds.get(key, [])[:k]
        if any(temporal_iou(_interval(p), gt) >= theta for p in preds):
            hits += 1
    return 100.0 * hits / len(gts)


def _interval(p):
    if isinstance(p, MomentPrediction):
        return (p.start_s, p.end_s)
    return (p[0], p[1])


def evaluate(per_query_preds, gts):
    return EvalResult(
        r1_03=recall_at_k(per_query_preds, gts, 1, 0.3),
        r1_05=recall_at_k(per_query_preds, gts, 1, 0.5),
        r5_03=recall_at_k(per_query_preds, gts, 5, 0.3),
        r5_05=recall_at_k(per_query_preds, gts, 5, 0.5),
        n_queries=len(gts),
    )

