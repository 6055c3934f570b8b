"""Contrastive + KL pretraining of the gaze estimator."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import GAZE_VERSION, load_checkpoint, load_state, save_checkpoint, state_to_arrays
from .gaze import GazeEstimatorConfig, GazeModel, gaze_total_loss
from .heatmaps import HEATMAP_SIZE
from .schedule import make_adamw, set_lr, warmup_cosine_factor
from .seeding import substream_seed, torch_generator

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ("epoch", "step", "nce", "kl", "total")


def pretrain_pairs(dataset):
    """``(gaze_features, window_heatmaps)`` per video of a :class:`SyntheticDataset`."""
    return [(s.gaze_features, h) for s, h in zip(dataset.samples, dataset.heatmaps)]


def collate_windows(pairs):
    """Pad variable-length window sequences into ``(features, heatmaps, mask)`` tensors."""
    t_max = max(len(f) for f, _ in pairs)
    d = pairs[0][0].shape[1]
    feats = torch.zeros(len(pairs), t_max, d)
    maps = torch.full((len(pairs), t_max, HEATMAP_SIZE, HEATMAP_SIZE), 1.0 / HEATMAP_SIZE**2)
    mask = torch.zeros(len(pairs), t_max, dtype=torch.bool)
    for i, (f, h) in enumerate(pairs):
        t = len(f)
        feats[i, :t] = torch.as_tensor(np.asarray(f), dtype=torch.float32)
        maps[i, :t] = torch.as_tensor(np.asarray(h), dtype=torch.float32)
        mask[i, :t] = True
    return feats, maps, mask


@dataclass
class PretrainResult:
    model: GazeModel
    optimizer: torch.optim.Optimizer
    epochs_done: int
    log_rows: list = field(default_factory=list)


def pretrain_gaze(
    pairs,
    cfg: GazeEstimatorConfig,
    lr=1e-3,
    batch=16,
    epochs=20,
    warmup_epochs=1,
    weight_decay=0.01,
    seed=0,
    model=None,
    start_epoch=0,
    optimizer_state=None,
):
    """Minimize ``nce + kl`` over mini-batches of window sequences.

    ``pairs`` is a list of ``(features (T, d_in), heatmaps (T, 64, 64))``; the
    contrastive negatives of each window are all other windows in its batch.
    Pass ``model``/``start_epoch``/``optimizer_state`` to resume.
    """
    if len(pairs) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    if model is None:
        with torch.random.fork_rng():
            torch.manual_seed(substream_seed(seed, "init/gaze"))
            model = GazeModel(cfg)
    model.train()
    optimizer = make_adamw([model], lr, weight_decay)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    steps_per_epoch = -(-len(pairs) // batch)
    total_steps = (start_epoch + epochs) * steps_per_epoch
    warmup_steps = warmup_epochs * steps_per_epoch
    shuffle = torch_generator(seed, "shuffle/gaze")
    # consume the stream for epochs already done so resumed runs continue it
    for _ in range(start_epoch):
        torch.randperm(len(pairs), generator=shuffle)

    rows = []
    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, start_epoch + epochs):
        order = torch.randperm(len(pairs), generator=shuffle).tolist()
        for b in range(0, len(order), batch):
            feats, maps, mask = collate_windows([pairs[i] for i in order[b : b + batch]])
            set_lr(optimizer, lr * warmup_cosine_factor(step, warmup_steps, total_steps))
            nce, kl = model.losses(feats, maps, mask)
            loss = gaze_total_loss(nce, kl)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            rows.append((epoch, step, nce.item(), kl.item(), loss.item()))
            step += 1
        log.info("gaze epoch %d: nce=%.4f kl=%.4f", epoch, rows[-1][2], rows[-1][3])
    model.eval()
    return PretrainResult(model, optimizer, start_epoch + epochs, rows)


def write_loss_log(path, rows, append=False):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(LOSS_LOG_HEADER)
        for epoch, step, nce, kl, total in rows:
            w.writerow([epoch, step, f"{nce:.6f}", f"{kl:.6f}", f"{total:.6f}"])


def _optimizer_arrays(optimizer):
    out = {}
    for idx, st in optimizer.state_dict()["state"].items():
        for key, value in st.items():
            out[f"optim.{idx}.{key}"] = torch.as_tensor(value)
    return out


def _optimizer_state(optimizer, arrays):
    state = optimizer.state_dict()
    per_param = {}
    for name, value in arrays.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        per_param.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(value))
    state["state"] = per_param
    return state


def save_gaze_checkpoint(path, model, epochs_done=0, optimizer=None):
    arrays = state_to_arrays(model, "model.")
    if optimizer is not None:
        arrays.update(_optimizer_arrays(optimizer))
    save_checkpoint(path, GAZE_VERSION, model.cfg.to_dict(), arrays, {"epochs_done": epochs_done})


def load_gaze_checkpoint(path, with_optimizer=False, lr=1e-3, weight_decay=0.01):
    """Return ``(model, meta)``, or ``(model, meta, optimizer_state)``."""
    _, config, arrays, meta = load_checkpoint(path, GAZE_VERSION)
    model = GazeModel(GazeEstimatorConfig(**config))
    load_state(model, {k: v for k, v in arrays.items() if k.startswith("model.")}, "model.")
    model.eval()
    if not with_optimizer:
        return model, meta
    has_optim = any(k.startswith("optim.") for k in arrays)
    opt_state = _optimizer_state(make_adamw([model], lr, weight_decay), arrays) if has_optim else None
    return model, meta, opt_state
