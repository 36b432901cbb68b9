from __future__ import annotations

from typing import Sequence, Tuple

import torch
import torch.nn.functional as F

from sparsekit.exceptions import ShapeException
from sparsekit.attention.config import AttnConfig, AttnParams, LinearAttnParams
from sparsekit.numerics import matmul


def split_heads(t: torch.Tensor, heads: int) -> torch.Tensor:
    """
    (n, h*p) -> (h, n, p)
    """
    n, d = t.shape
    if d % heads:
        raise ShapeException(f"feature dim {d} not divisible by {heads} heads")
    return t.view(n, heads, d // heads).transpose(0, 1)


def project(x: torch.Tensor, params: AttnParams, cfg: AttnConfig) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if x.dim() != 2 or x.shape[1] != cfg.dim:
        raise ShapeException(f"x must be (n, {cfg.dim}), got {tuple(x.shape)}")
    q = split_heads(matmul(x, params.wq), cfg.heads)
    k = split_heads(matmul(x, params.wk), cfg.heads)
    v = split_heads(matmul(x, params.wv), cfg.heads)
    return q, k, v


def multi_head(outputs: torch.Tensor | Sequence[torch.Tensor], wo: torch.Tensor) -> torch.Tensor:
    """
    Concatenate(O_1 .. O_h) W_O; outputs is (h, n, p) or a list of (n, p).
    """
    if isinstance(outputs, torch.Tensor):
        if outputs.dim() != 3:
            raise ShapeException(f"head outputs must be (h, n, p), got {tuple(outputs.shape)}")
        parts = list(outputs.unbind(0))
    else:
        parts = list(outputs)
    if not parts:
        raise ShapeException("multi_head needs at least one head")
    rows = parts[0].shape[0]
    for o in parts:
        if o.dim() != 2 or o.shape[0] != rows:
            raise ShapeException("head outputs must share the row count")
    return matmul(torch.cat(parts, dim=1), wo)


def feature_map(t: torch.Tensor, lin: LinearAttnParams) -> torch.Tensor:
    """
    phi(t) = elu(t W_h) + 1 per head, t: (h, n, p); strictly positive.
    """
    return F.elu(torch.einsum("hnp,hpq->hnq", t, lin.w_phi)) + 1.0
