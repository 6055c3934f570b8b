"""Dual-branch gaze estimator and its contrastive + KL objective."""

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .heatmaps import HEATMAP_SIZE, N_CELLS
from .layers import GLULayer, MaskedMultiheadAttention


@dataclass
class GazeEstimatorConfig:
    d_in: int = 1536
    d_model: int = 384
    n_glu_layers: int = 5
    n_heads: int = 4
    window: int = 32
    stride: int = 16
    tau: float = 0.07
    learn_tau: bool = False
    heatmap_sigma: float = 3.0
    conv_channels: int = 8
    dropout: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.window <= 0 or not 0 < self.stride <= self.window:
            raise ValueError("need window > 0 and 0 < stride <= window")
        if self.n_glu_layers < 1:
            raise ValueError("n_glu_layers must be >= 1")
        if self.heatmap_sigma <= 0:
            raise ValueError("heatmap_sigma must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self):
        return asdict(self)


class GazeEstimator(nn.Module):
    """Video branch: GLU stack, masked self-attention, projection and heatmap heads."""

    def __init__(self, cfg: GazeEstimatorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.input_proj = nn.Linear(cfg.d_in, d)
        self.glu = nn.ModuleList(GLULayer(d) for _ in range(cfg.n_glu_layers))
        self.attn_norm = nn.LayerNorm(d)
        self.attn = MaskedMultiheadAttention(d, cfg.n_heads)
        self.proj_head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.heatmap_head = nn.Linear(d, N_CELLS)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, features, mask=None):
        """Return ``(embeddings (B,T,d), heatmap log-probs (B,T,64,64))``."""
        if features.shape[-1] != self.cfg.d_in:
            raise ValueError(
                f"expected feature width {self.cfg.d_in}, got {features.shape[-1]}"
            )
        if mask is None:
            mask = torch.ones(features.shape[:2], dtype=torch.bool, device=features.device)
        h = self.drop(self.input_proj(features))
        for layer in self.glu:
            h = layer(h)
        a = self.attn_norm(h)
        h = h + self.attn(a, a, mask)
        emb = self.proj_head(h) * mask[..., None]
        logp = F.log_softmax(self.heatmap_head(h), dim=-1)
        return emb, logp.view(*logp.shape[:-1], HEATMAP_SIZE, HEATMAP_SIZE)


class GazeBranch(nn.Module):
    """3D conv block over per-window heatmap stacks, pooled and projected.

    Accepts ``(B, T, 64, 64)`` window heatmaps or ``(B, T, S, 64, 64)`` stacks of
    ``S`` frame heatmaps per window; the time axis of the convolution runs over
    ``S``, so windows are encoded independently of one another.
    """

    def __init__(self, cfg: GazeEstimatorConfig):
        super().__init__()
        c = cfg.conv_channels
        self.conv = nn.Sequential(
            nn.Conv3d(1, c, (3, 5, 5), stride=(1, 2, 2), padding=(1, 2, 2)),
            nn.ReLU(),
            nn.Conv3d(c, 2 * c, (3, 3, 3), stride=(1, 2, 2), padding=(1, 1, 1)),
            nn.ReLU(),
        )
        self.pool = nn.AdaptiveAvgPool3d((1, 8, 8))
        d = cfg.d_model
        self.proj_head = nn.Sequential(nn.Linear(2 * c * 64, d), nn.GELU(), nn.Linear(d, d))

    def forward(self, heatmaps):
        if heatmaps.dim() == 4:
            heatmaps = heatmaps.unsqueeze(2)
        if heatmaps.dim() != 5 or heatmaps.shape[1] == 0:
            raise ValueError(f"expected a nonempty (B, T[, S], 64, 64) stack, got {tuple(heatmaps.shape)}")
        b, t, s = heatmaps.shape[:3]
        # scale so the uniform map has unit entries
        x = heatmaps.reshape(b * t, 1, s, HEATMAP_SIZE, HEATMAP_SIZE) * N_CELLS
        x = self.pool(self.conv(x)).flatten(1)
        return self.proj_head(x).view(b, t, -1)


class GazeModel(nn.Module):
    """Both branches plus the contrastive temperature."""

    def __init__(self, cfg: GazeEstimatorConfig):
        super().__init__()
        self.cfg = cfg
        self.estimator = GazeEstimator(cfg)
        self.branch = GazeBranch(cfg)
        log_tau = torch.tensor(math.log(cfg.tau))
        if cfg.learn_tau:
            self.log_tau = nn.Parameter(log_tau)
        else:
            self.register_buffer("log_tau", log_tau)

    @property
    def tau(self):
        return self.log_tau.exp()

    def predict(self, features, mask=None):
        """Estimated gaze embeddings and heatmaps (probabilities) from video features."""
        emb, logp = self.estimator(features, mask)
        return emb, logp.exp()

    def losses(self, features, heatmaps, mask):
        """Return ``(nce, kl)`` for a padded batch of window sequences."""
        emb, logp = self.estimator(features, mask)
        g = self.branch(heatmaps)
        nce = info_nce_loss(emb[mask], g[mask], self.tau)
        kl = kl_gaze_loss(heatmaps[mask], logp[mask].exp())
        return nce, kl


def info_nce_loss(video_emb, gaze_emb, tau, reduction="sum"):
    """Contrastive loss with in-batch negatives over ``(N, d)`` embedding pairs.

    Row ``i`` of ``gaze_emb`` is the positive for row ``i`` of ``video_emb``;
    every other row is a negative. Embeddings are L2-normalized first.
    """
    if video_emb.shape != gaze_emb.shape or video_emb.dim() != 2:
        raise ValueError(
            f"expected matching (N, d) embeddings, got {tuple(video_emb.shape)} and {tuple(gaze_emb.shape)}"
        )
    n = video_emb.shape[0]
    if n == 0:
        raise ValueError("info_nce_loss needs at least one pair")
    tau = torch.as_tensor(tau, dtype=video_emb.dtype)
    if not bool(tau > 0):
        raise ValueError(f"tau must be positive, got {float(tau)}")
    v = F.normalize(video_emb, dim=-1)
    g = F.normalize(gaze_emb, dim=-1)
    logits = v @ g.T / tau
    terms = torch.logsumexp(logits, dim=1) - logits.diagonal()
    if reduction == "sum":
        return terms.sum()
    if reduction == "mean":
        return terms.mean()
    return terms


def kl_gaze_loss(gt, pred, eps=1e-8, reduction="mean", check=True):
    """KL(gt || pred) over the last two (grid) axes.

    ``pred`` is floored at ``eps`` and renormalized; ``0 * log 0`` counts as 0.
    """
    if gt.shape != pred.shape or gt.dim() < 2:
        raise ValueError(f"shape mismatch: {tuple(gt.shape)} vs {tuple(pred.shape)}")
    if check:
        for name, m in (("gt", gt), ("pred", pred)):
            m = m.detach()
            sums = m.sum(dim=(-2, -1))
            if bool((m < 0).any()) or not torch.allclose(sums, torch.ones_like(sums), atol=1e-4):
                raise ValueError(f"{name} is not a distribution over the grid")
    q = pred.clamp_min(eps)
    q = q / q.sum(dim=(-2, -1), keepdim=True)
    safe_gt = torch.where(gt > 0, gt, torch.ones_like(gt))
    kl = torch.where(gt > 0, gt * (torch.log(safe_gt) - torch.log(q)), torch.zeros_like(gt))
    kl = kl.sum(dim=(-2, -1))
    if reduction == "mean":
        return kl.mean()
    if reduction == "sum":
        return kl.sum()
    return kl


def gaze_total_loss(nce, kl):
    return nce + kl
