"""Optimizer construction and the warm-up + cosine learning-rate schedule."""

import math

import torch
from torch import nn


def warmup_cosine_factor(step, warmup_steps, total_steps):
    """Multiplier on the base lr: linear warm-up, then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    decay_steps = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / decay_steps, 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def make_adamw(params_by_module, lr, weight_decay):
    """AdamW with no decay on normalization parameters and biases."""
    decay, no_decay = [], []
    seen = set()
    for module in params_by_module:
        for sub in module.modules():
            for name, p in sub.named_parameters(recurse=False):
                if not p.requires_grad or id(p) in seen:
                    continue
                seen.add(id(p))
                if isinstance(sub, (nn.LayerNorm,)) or name.endswith("bias") or p.dim() == 0:
                    no_decay.append(p)
                else:
                    decay.append(p)
    groups = [{"params": decay, "weight_decay": weight_decay}]
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return torch.optim.AdamW(groups, lr=lr)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr
