"""Desk-scale recipes shared by the demos and the acceptance suite.

The defaults below were tuned on a single CPU core: a 256-frame synthetic
world, a separate gaze pretraining corpus drawn from the same world, and a
shortened grounding schedule.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

from .data import SyntheticSpec, generate_dataset, train_val_split
from .finetune import finetune, gaze_state, predict
from .gaze import GazeEstimatorConfig
from .grounding import GroundingConfig
from .inference import evaluate
from .predictions import gts_from_samples
from .pretrain import collate_windows, pretrain_gaze, pretrain_pairs

log = logging.getLogger(__name__)

# video indices of the pretraining corpus start here so they never collide
PRETRAIN_FIRST_INDEX = 100_000


@dataclass
class DeskRecipe:
    n_videos: int = 256
    frames_per_video: int = 256
    gaze_signal_strength: float = 0.9
    val_fraction: float = 0.25
    corpus_videos: int = 384
    gaze_epochs: int = 8
    gaze_dropout: float = 0.3
    ground_epochs: int = 20
    ground_lr: float = 1e-4
    ground_warmup_epochs: int = 2
    ground_dropout: float = 0.3

    def spec(self, seed, **kw):
        base = dict(n_videos=self.n_videos, frames_per_video=self.frames_per_video,
                    gaze_signal_strength=self.gaze_signal_strength, seed=seed)
        return SyntheticSpec(**{**base, **kw})

    def grounding_config(self, **kw):
        base = dict(epochs=self.ground_epochs, lr=self.ground_lr,
                    warmup_epochs=self.ground_warmup_epochs, dropout=self.ground_dropout)
        return GroundingConfig(**{**base, **kw})


def pretrain_for_world(recipe: DeskRecipe, seed):
    """Pretrain a gaze estimator on a corpus disjoint from the grounding videos."""
    corpus = generate_dataset(recipe.spec(seed, n_videos=recipe.corpus_videos,
                                          first_index=PRETRAIN_FIRST_INDEX))
    cfg = GazeEstimatorConfig(dropout=recipe.gaze_dropout)
    return pretrain_gaze(pretrain_pairs(corpus), cfg, epochs=recipe.gaze_epochs, seed=seed)


@torch.no_grad()
def gaze_argmax_accuracy(gaze, dataset, tolerance=3):
    """Share of in-segment windows whose predicted argmax cell lies within
    ``tolerance`` cells (Chebyshev) of the planted target location."""
    if len(dataset) == 0:
        return 0.0
    feats, _, mask = collate_windows(pretrain_pairs(dataset))
    _, maps = gaze.predict(feats, mask)
    hits = total = 0
    for i, (sample, (first, last)) in enumerate(zip(dataset.samples, dataset.segments)):
        x, y = dataset.target_locations[sample.target_id] * maps.shape[-1]
        for t in range(first, last):
            r, c = np.unravel_index(int(maps[i, t].argmax()), maps.shape[-2:])
            hits += max(abs(r - y), abs(c - x)) <= tolerance
            total += 1
    return hits / total


def compare_gaze_modes(recipe: DeskRecipe, seed, modes=("off", "positive"), gaze=None,
                       freeze_gaze=True):
    """Train one grounding model per mode on the same split; return val results.

    Returns ``{mode: EvalResult}``. ``gaze`` defaults to a freshly pretrained
    estimator for this seed.
    """
    if gaze is None:
        gaze = pretrain_for_world(recipe, seed).model
    ds = generate_dataset(recipe.spec(seed))
    train, val = train_val_split(ds, recipe.val_fraction)
    out = {}
    for mode in modes:
        cfg = recipe.grounding_config(gaze_mode=mode, freeze_gaze=freeze_gaze)
        model = finetune(train.samples, cfg, gaze, seed=seed).model
        out[mode] = evaluate(predict(model, val.samples), gts_from_samples(val.samples))
        log.info("seed %d mode %s: val r1@0.5=%.1f", seed, mode, out[mode].r1_05)
    return out


def freeze_ablation(samples, gaze, cfg: GroundingConfig, seed=0):
    """Run frozen and unfrozen finetuning; report whether gaze weights moved.

    Returns ``{freeze: (gaze_unchanged, FinetuneResult)}``.
    """
    out = {}
    before = {k: v.detach().clone() for k, v in gaze.state_dict().items()}
    for freeze in (True, False):
        res = finetune(samples, replace(cfg, freeze_gaze=freeze), gaze, seed=seed)
        after = gaze_state(res.model)
        same = all(torch.equal(before[k], after[k]) for k in before)
        out[freeze] = (same, res)
    return out
