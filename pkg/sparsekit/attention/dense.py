"""
Dense causal attention: the reference the sparse engine is checked against,
and the `full` / `sw` attention kinds of the trainer.
"""
from __future__ import annotations

import torch

from sparsekit.attention.config import AttnConfig, AttnParams
from sparsekit.attention.heads import multi_head, project


def causal_mask(n: int, window: int | None = None) -> torch.Tensor:
    """
    True where query i may attend key j: j <= i, and i - j < window when a window is given.
    """
    i = torch.arange(n).unsqueeze(1)
    j = torch.arange(n).unsqueeze(0)
    allowed = j <= i
    if window is not None:
        allowed = allowed & (i - j < window)
    return allowed


def dense_causal_attention(
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        scale: float,
        window: int | None = None,
) -> torch.Tensor:
    """
    q, k, v: (..., n, p); returns (..., n, p).
    """
    n = q.shape[-2]
    logits = torch.matmul(q, k.transpose(-1, -2)) * scale
    logits = logits.masked_fill(~causal_mask(n, window), float("-inf"))
    return torch.matmul(torch.softmax(logits, dim=-1), v)


def dense_attention(x: torch.Tensor, params: AttnParams, cfg: AttnConfig, window: int | None = None) -> torch.Tensor:
    q, k, v = project(x, params, cfg)
    o = dense_causal_attention(q, k, v, cfg.effective_scale, window)
    return multi_head(o, params.wo)
