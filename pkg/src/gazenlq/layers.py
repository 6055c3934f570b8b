"""Shared building blocks: GLU layers and masked attention.

Sequences are ``(B, T, D)`` tensors with boolean masks ``(B, T)``
(True = valid position).
"""

import math

import torch
from torch import nn


class GLULayer(nn.Module):
    """Linear to 2*d, gate one half with the sigmoid of the other, residual + LayerNorm."""

    def __init__(self, d_model):
        super().__init__()
        self.fc = nn.Linear(d_model, 2 * d_model)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x):
        a, b = self.fc(x).chunk(2, dim=-1)
        return self.norm(x + a * torch.sigmoid(b))


class MaskedMultiheadAttention(nn.Module):
    """Multi-head attention whose fully-masked query rows return zeros."""

    def __init__(self, d_model, n_heads):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query, context, context_mask=None, attn_mask=None, return_weights=False):
        """``attn_mask`` is an optional ``(Tq, Tk)`` boolean of allowed pairs."""
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        keep = None
        if context_mask is not None:
            keep = context_mask[:, None, None, :]
        if attn_mask is not None:
            keep = attn_mask[None, None] if keep is None else keep & attn_mask[None, None]
        if keep is not None:
            scores = scores.masked_fill(~keep, torch.finfo(scores.dtype).min)
            weights = torch.softmax(scores, dim=-1) * keep
        else:
            weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        out = self.out_proj(out)
        if keep is not None:
            # rows with no valid key carry no attention output at all
            out = out * keep.any(dim=-1).any(dim=1)[..., None]
        if return_weights:
            return out, weights
        return out


class CrossAttention(nn.Module):
    """Pre-norm residual cross-attention: ``video + attn(LN(video), LN(context))``."""

    def __init__(self, d_model, n_heads):
        super().__init__()
        self.norm_q = nn.LayerNorm(d_model)
        self.norm_kv = nn.LayerNorm(d_model)
        self.attn = MaskedMultiheadAttention(d_model, n_heads)

    def delta(self, video, context, context_mask=None, attn_mask=None):
        """The attention contribution alone, without the residual."""
        if video.shape[-1] != context.shape[-1]:
            raise ValueError(
                f"width mismatch: video {video.shape[-1]} vs context {context.shape[-1]}"
            )
        return self.attn(self.norm_q(video), self.norm_kv(context), context_mask, attn_mask)

    def forward(self, video, context, context_mask=None, attn_mask=None):
        return video + self.delta(video, context, context_mask, attn_mask)


class TransformerBlock(nn.Module):
    def __init__(self, d_model, n_heads, mlp_ratio=2, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MaskedMultiheadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, mlp_ratio * d_model),
            nn.GELU(),
            nn.Linear(mlp_ratio * d_model, d_model),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, mask))
        x = x + self.drop(self.mlp(self.norm2(x)))
        if mask is not None:
            x = x * mask[..., None]
        return x


def sinusoidal_positions(length, d_model, dtype=torch.float32):
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(
        torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model)
    )
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.to(dtype)


def band_mask(t_query, t_key, radius, device=None):
    """Allowed pairs ``|i - j| <= radius``; ``radius=None`` allows everything."""
    if radius is None:
        return None
    i = torch.arange(t_query, device=device)[:, None]
    j = torch.arange(t_key, device=device)[None, :]
    return (i - j).abs() <= radius
