"""Gaze/text fusion, multi-scale encoder, heads, target assignment and loss."""

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .gaze import GazeModel
from .heatmaps import complement_heatmap
from .layers import CrossAttention, TransformerBlock, band_mask, sinusoidal_positions

GAZE_MODES = ("off", "positive", "negative")


@dataclass
class GroundingConfig:
    d_model: int = 384
    n_heads: int = 4
    n_pyramid_levels: int = 4
    gaze_mode: str = "positive"
    freeze_gaze: bool = True
    d_video: int = 2304
    d_text: int = 512
    lr: float = 2.5e-5
    batch: int = 8
    epochs: int = 10
    warmup_epochs: int = 4
    weight_decay: float = 0.05
    dropout: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    cls_prior: float = 0.01
    gaze_attn_radius: int = 1

    def __post_init__(self):
        if self.gaze_mode not in GAZE_MODES:
            raise ValueError(f"gaze_mode must be one of {GAZE_MODES}, got {self.gaze_mode!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_pyramid_levels < 1:
            raise ValueError("n_pyramid_levels must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class FeaturePyramid:
    """Per-level features, masks and (once heads run) predictions, batch-first."""

    strides: list
    feats: list
    masks: list
    cls_logits: list = field(default_factory=list)
    reg_offsets: list = field(default_factory=list)

    @property
    def lengths(self):
        return [m.shape[1] for m in self.masks]


def level_lengths(t, n_levels):
    lengths = [t]
    for _ in range(n_levels - 1):
        lengths.append(-(-lengths[-1] // 2))
    return lengths


def downsample_mask(mask):
    """Halve a ``(B, T)`` mask with ceil length; a pair is valid if either member is."""
    b, t = mask.shape
    if t % 2:
        mask = torch.cat([mask, torch.zeros(b, 1, dtype=mask.dtype, device=mask.device)], dim=1)
    return mask.view(b, -1, 2).any(dim=-1)


class PyramidEncoder(nn.Module):
    def __init__(self, d_model, n_heads, n_levels, dropout=0.0):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(d_model, n_heads, dropout=dropout) for _ in range(n_levels)
        )
        self.down = nn.ModuleList(
            nn.Conv1d(d_model, d_model, 3, stride=2, padding=1) for _ in range(n_levels - 1)
        )

    def forward(self, x, mask):
        x = self.blocks[0](x, mask)
        feats, masks = [x], [mask]
        for down, block in zip(self.down, self.blocks[1:]):
            x = down((x * mask[..., None]).transpose(1, 2)).transpose(1, 2)
            mask = downsample_mask(mask)
            x = block(x, mask)
            feats.append(x)
            masks.append(mask)
        return FeaturePyramid([2**i for i in range(len(feats))], feats, masks)


class PredictionHeads(nn.Module):
    """Classification and boundary-regression heads shared across levels."""

    def __init__(self, d_model, cls_prior=0.01):
        super().__init__()
        self.cls = nn.Sequential(nn.Linear(d_model, d_model), nn.ReLU(), nn.Linear(d_model, 1))
        self.reg = nn.Sequential(nn.Linear(d_model, d_model), nn.ReLU(), nn.Linear(d_model, 2))
        if cls_prior > 0:
            nn.init.constant_(self.cls[-1].bias, -float(np.log((1 - cls_prior) / cls_prior)))

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        pyramid.cls_logits, pyramid.reg_offsets = [], []
        for x, m in zip(pyramid.feats, pyramid.masks):
            logits = self.cls(x).squeeze(-1).masked_fill(~m, float("-inf"))
            pyramid.cls_logits.append(logits)
            pyramid.reg_offsets.append(F.softplus(self.reg(x)))
        return pyramid


def gaze_stream(gaze: GazeModel, gaze_features, mask, mode, heatmaps=None):
    """Gaze context for the fusion stage, from estimated (or given) heatmaps.

    ``negative`` mode encodes the complement map ``(1 - G) / sum(1 - G)``.
    """
    if mode == "off":
        return None
    if heatmaps is None:
        if gaze is None or gaze_features is None:
            raise ValueError(f"gaze_mode={mode!r} needs a gaze estimator or heatmaps")
        _, heatmaps = gaze.predict(gaze_features, mask)
    if mode == "negative":
        heatmaps = complement_heatmap(heatmaps)
    return gaze.branch(heatmaps) * mask[..., None]


class GroundingModel(nn.Module):
    def __init__(self, cfg: GroundingConfig, gaze: GazeModel = None):
        super().__init__()
        if cfg.gaze_mode != "off" and gaze is None:
            raise ValueError(f"gaze_mode={cfg.gaze_mode!r} requires a pretrained gaze model")
        self.cfg = cfg
        d = cfg.d_model
        self.gaze = gaze if cfg.gaze_mode != "off" else None
        if self.gaze is not None and self.gaze.cfg.d_model != d:
            raise ValueError("gaze embedding width must equal d_model")
        self.video_proj = nn.Linear(cfg.d_video, d)
        self.text_proj = nn.Linear(cfg.d_text, d)
        self.gaze_attn = CrossAttention(d, cfg.n_heads)
        self.text_attn = CrossAttention(d, cfg.n_heads)
        self.fuse_block = TransformerBlock(d, cfg.n_heads, dropout=cfg.dropout)
        self.encoder = PyramidEncoder(d, cfg.n_heads, cfg.n_pyramid_levels, cfg.dropout)
        self.heads = PredictionHeads(d, cfg.cls_prior)
        self.drop = nn.Dropout(cfg.dropout)

    def grounding_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("gaze.")]

    def fuse_streams(self, video, vmask, gaze, text, tmask):
        """``self_attention(video + gaze_delta + text_delta)``.

        Each cross-attention contributes its attention output once; the video
        residual is added a single time. ``gaze=None`` disables that branch.
        """
        fused = video + self.text_attn.delta(video, text, tmask)
        if gaze is not None:
            band = band_mask(video.shape[1], gaze.shape[1], self.cfg.gaze_attn_radius, video.device)
            fused = fused + self.gaze_attn.delta(video, gaze, vmask, band)
        return self.fuse_block(fused * vmask[..., None], vmask)

    def forward(self, batch, heatmaps=None) -> FeaturePyramid:
        vmask = batch["video_mask"]
        pos = sinusoidal_positions(vmask.shape[1], self.cfg.d_model).to(batch["video"].dtype)
        video = self.drop(self.video_proj(batch["video"])) + pos
        text = self.drop(self.text_proj(batch["text"]))
        gaze = gaze_stream(self.gaze, batch.get("gaze_features"), vmask, self.cfg.gaze_mode, heatmaps)
        if gaze is not None:
            gaze = gaze + pos
        fused = self.fuse_streams(video, vmask, gaze, text, batch["text_mask"])
        return self.heads(self.encoder(fused, vmask))


# target assignment ------------------------------------------------------------

def level_length_range(level, n_levels):
    lo = 0.0 if level == 0 else float(2**level)
    hi = float("inf") if level == n_levels - 1 else float(2 ** (level + 1))
    return lo, hi


def assign_targets(gt_interval, seconds_per_window, lengths, valid=None):
    """Label pyramid locations for one query.

    Returns per level ``(labels (T_l,) bool, targets (T_l, 2))`` with targets
    ``(c - start, end - c)`` in units of the level's stride in seconds. A
    location is positive when its center ``c`` lies in the interval and the
    interval length, in windows, falls in the level's range
    ``[2^l, 2^(l+1))`` (open-ended at the first and last level). When nothing
    qualifies, the valid location whose center is nearest the midpoint wins.
    """
    start, end = map(float, gt_interval)
    if not 0 <= start < end:
        raise ValueError(f"invalid gt interval {gt_interval}")
    n_levels = len(lengths)
    if valid is None:
        valid = [np.ones(n, dtype=bool) for n in lengths]
    length_w = (end - start) / seconds_per_window
    labels, targets, centers = [], [], []
    for lvl, (n, ok) in enumerate(zip(lengths, valid)):
        unit = (2**lvl) * seconds_per_window
        c = (np.arange(n) + 0.5) * unit
        lo, hi = level_length_range(lvl, n_levels)
        pos = ok & (c >= start) & (c <= end) & (lo <= length_w < hi)
        labels.append(pos)
        targets.append(np.stack([(c - start) / unit, (end - c) / unit], axis=-1))
        centers.append(c)
    if not any(lab.any() for lab in labels):
        mid = 0.5 * (start + end)
        best = None
        for lvl, (c, ok) in enumerate(zip(centers, valid)):
            if not ok.any():
                continue
            dist = np.where(ok, np.abs(c - mid), np.inf)
            t = int(np.argmin(dist))
            if best is None or dist[t] < best[0]:
                best = (dist[t], lvl, t)
        if best is not None:
            labels[best[1]][best[2]] = True
    return labels, targets


def decode_offsets(level, index, offsets, seconds_per_window):
    unit = (2**level) * seconds_per_window
    c = (index + 0.5) * unit
    return c - offsets[0] * unit, c + offsets[1] * unit


def batch_targets(pyramid: FeaturePyramid, gt, spw):
    """Stack :func:`assign_targets` over a batch into per-level tensors."""
    lengths = pyramid.lengths
    labels = [torch.zeros(m.shape, dtype=torch.bool) for m in pyramid.masks]
    targets = [torch.zeros(*m.shape, 2) for m in pyramid.masks]
    for b in range(len(gt)):
        valid = [m[b].cpu().numpy() for m in pyramid.masks]
        lab, tgt = assign_targets(gt[b], spw[b], lengths, valid)
        for lvl in range(len(lengths)):
            labels[lvl][b] = torch.from_numpy(lab[lvl])
            targets[lvl][b] = torch.from_numpy(tgt[lvl]).float()
    return labels, targets


def sigmoid_focal_loss(logits, labels, gamma=2.0, alpha=0.5):
    y = labels.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, y, reduction="none")
    p_t = p * y + (1 - p) * (1 - y)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * y + (1 - alpha) * (1 - y)) * loss
    return loss


def offset_iou(pred, target):
    """IoU of segments sharing a center, given ``(left, right)`` offsets."""
    inter = (torch.minimum(pred[..., 0], target[..., 0]) + torch.minimum(pred[..., 1], target[..., 1])).clamp_min(0)
    union = pred.sum(-1) + target.sum(-1) - inter
    return inter / union.clamp_min(1e-12)


def localization_loss(pyramid: FeaturePyramid, labels, targets, gamma=2.0, alpha=0.5):
    """Return ``(cls, reg, total)``.

    ``cls`` is the focal loss over valid locations divided by the positive
    count (at least 1); ``reg`` is the mean ``1 - IoU`` over positives.
    """
    valid = torch.cat([m.flatten() for m in pyramid.masks])
    logits = torch.cat([c.flatten() for c in pyramid.cls_logits])[valid]
    lab = torch.cat([l.flatten() for l in labels])[valid]
    n_pos = int(lab.sum())
    cls = sigmoid_focal_loss(logits, lab, gamma, alpha).sum() / max(n_pos, 1)
    if n_pos:
        pos = torch.cat([l.flatten() for l in labels])
        pred = torch.cat([r.reshape(-1, 2) for r in pyramid.reg_offsets])[pos]
        tgt = torch.cat([t.reshape(-1, 2) for t in targets]).to(pred.dtype)[pos]
        reg = (1 - offset_iou(pred, tgt)).mean()
    else:
        reg = logits.new_zeros(())
    return cls, reg, cls + reg
