"""Training and inference for the grounding model."""

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import GROUND_VERSION, load_checkpoint, load_state, save_checkpoint, state_to_arrays
from .gaze import GazeEstimatorConfig, GazeModel
from .grounding import GroundingConfig, GroundingModel, batch_targets, localization_loss
from .inference import decode_moments, soft_nms
from .pretrain import load_gaze_checkpoint
from .schedule import make_adamw, set_lr, warmup_cosine_factor
from .seeding import substream_seed, torch_generator

log = logging.getLogger(__name__)


def collate_samples(samples):
    t_max = max(s.n_windows for s in samples)
    l_max = max(len(s.text_embeddings) for s in samples)
    b = len(samples)
    s0 = samples[0]
    batch = {
        "video": torch.zeros(b, t_max, s0.video_features.shape[1]),
        "gaze_features": torch.zeros(b, t_max, s0.gaze_features.shape[1]),
        "video_mask": torch.zeros(b, t_max, dtype=torch.bool),
        "text": torch.zeros(b, l_max, s0.text_embeddings.shape[1]),
        "text_mask": torch.zeros(b, l_max, dtype=torch.bool),
    }
    for i, s in enumerate(samples):
        t, n = s.n_windows, len(s.text_embeddings)
        batch["video"][i, :t] = torch.from_numpy(np.asarray(s.video_features, dtype=np.float32))
        batch["gaze_features"][i, :t] = torch.from_numpy(np.asarray(s.gaze_features, dtype=np.float32))
        batch["video_mask"][i, :t] = True
        batch["text"][i, :n] = torch.from_numpy(np.asarray(s.text_embeddings, dtype=np.float32))
        batch["text_mask"][i, :n] = True
    batch["gt"] = [tuple(s.gt_interval) for s in samples]
    batch["spw"] = [s.seconds_per_window for s in samples]
    return batch


def build_model(cfg: GroundingConfig, gaze: GazeModel = None, seed=0):
    with torch.random.fork_rng():
        torch.manual_seed(substream_seed(seed, "init/grounding"))
        return GroundingModel(cfg, copy.deepcopy(gaze) if gaze is not None else None)


@dataclass
class FinetuneResult:
    model: GroundingModel
    losses: list = field(default_factory=list)  # (epoch, step, cls, reg, total)


def finetune(samples, cfg: GroundingConfig, gaze=None, seed=0, epochs=None, lr=None, model=None):
    """Optimize the localization loss with warm-up + cosine decay.

    ``gaze`` is a :class:`GazeModel` or a gaze checkpoint path; it is required
    unless ``cfg.gaze_mode == "off"``. With ``cfg.freeze_gaze`` the gaze
    estimator receives no updates and stays in eval mode.
    """
    if not samples:
        raise ValueError("cannot finetune on an empty dataset")
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    if cfg.gaze_mode == "off":
        gaze = None
    elif gaze is None:
        raise ValueError(f"gaze_mode={cfg.gaze_mode!r} requires a gaze checkpoint")
    elif not isinstance(gaze, GazeModel):
        gaze, _ = load_gaze_checkpoint(gaze)
    if model is None:
        model = build_model(cfg, gaze, seed)
    frozen = cfg.freeze_gaze and model.gaze is not None
    if model.gaze is not None:
        for p in model.gaze.parameters():
            p.requires_grad_(not cfg.freeze_gaze)
    # frozen gaze parameters have requires_grad off, so the optimizer skips them
    optimizer = make_adamw([model], lr, cfg.weight_decay)

    steps_per_epoch = -(-len(samples) // cfg.batch)
    total = epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    shuffle = torch_generator(seed, "shuffle/grounding")
    rows, step = [], 0
    with torch.random.fork_rng():
        torch.manual_seed(substream_seed(seed, "dropout/grounding"))
        for epoch in range(epochs):
            model.train()
            if frozen:
                model.gaze.eval()
            order = torch.randperm(len(samples), generator=shuffle).tolist()
            for b in range(0, len(order), cfg.batch):
                batch = collate_samples([samples[i] for i in order[b : b + cfg.batch]])
                set_lr(optimizer, lr * warmup_cosine_factor(step, warmup, total))
                if frozen:
                    with torch.no_grad():
                        _, heat = model.gaze.predict(batch["gaze_features"], batch["video_mask"])
                    pyramid = model(batch, heatmaps=heat)
                else:
                    pyramid = model(batch)
                labels, targets = batch_targets(pyramid, batch["gt"], batch["spw"])
                cls, reg, loss = localization_loss(pyramid, labels, targets, cfg.focal_gamma, cfg.focal_alpha)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                rows.append((epoch, step, cls.item(), reg.item(), loss.item()))
                step += 1
            log.debug("grounding epoch %d: loss=%.4f", epoch, rows[-1][4])
    model.eval()
    return FinetuneResult(model, rows)


@torch.no_grad()
def predict(model, samples, batch_size=16, score_threshold=0.0, max_per_level=None,
            nms_sigma=0.5, nms_floor=0.001, nms_method="gaussian", top_k=5):
    """Top-``top_k`` moments per query after Soft-NMS, keyed like prediction files."""
    model.eval()
    out = {}
    for b in range(0, len(samples), batch_size):
        chunk = samples[b : b + batch_size]
        pyramid = model(collate_samples(chunk))
        for i, s in enumerate(chunk):
            moments = decode_moments(pyramid, s.seconds_per_window, score_threshold,
                                     max_per_level, video_end=s.duration, index=i)
            out[s.key] = soft_nms(moments, nms_sigma, nms_floor, nms_method, max_keep=top_k)
    return out


def gaze_state(model):
    """Copies of every gaze-estimator tensor (for freeze checks)."""
    if model.gaze is None:
        return {}
    return {k: v.detach().clone() for k, v in model.gaze.state_dict().items()}


def save_grounding_checkpoint(path, model, gaze_checkpoint_hash=None):
    config = {"grounding": model.cfg.to_dict()}
    if model.gaze is not None:
        config["gaze"] = model.gaze.cfg.to_dict()
    save_checkpoint(path, GROUND_VERSION, config, state_to_arrays(model),
                    {"gaze_checkpoint_sha256": gaze_checkpoint_hash})


def load_grounding_checkpoint(path):
    _, config, arrays, meta = load_checkpoint(path, GROUND_VERSION)
    gaze = GazeModel(GazeEstimatorConfig(**config["gaze"])) if "gaze" in config else None
    model = GroundingModel(GroundingConfig(**config["grounding"]), gaze)
    load_state(model, arrays)
    model.eval()
    return model, meta

