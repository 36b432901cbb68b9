"""
Query-independent scoring network: u = X w_score, timestep normalization
and the position slope i * eps (1-indexed positions).

Scores are computed once per position and frozen; extending the sequence
appends new scores without touching old ones.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import torch
from pydantic.v1 import BaseModel, Extra, Field

from sparsekit.exceptions import ArgumentException, NumericException, ShapeException
from sparsekit.numerics import Rng, check_finite, default_dtype, randn

logger = logging.getLogger("sparsekit")


class ScoringConfig(BaseModel):
    slope_eps: float = Field(default=0.01, gt=0, description="position slope per step")
    norm_mode: Literal["none", "timestep_norm"] = "timestep_norm"
    slope_order: Literal["norm_then_slope", "slope_then_norm"] = "norm_then_slope"
    norm_eps: float = Field(default=1e-5, gt=0)
    slope: bool = Field(default=True, description="False drops the position slope (ablation)")
    affine: bool = Field(default=False, description="learnable gain / bias after normalization")
    init: Literal["random", "mimic"] = "random"
    learnable: bool = True

    class Config:
        extra = Extra.forbid


@dataclass
class ScoringParams:
    w_score: torch.Tensor
    cfg: ScoringConfig
    gain: torch.Tensor | None = None
    bias: torch.Tensor | None = None

    def __post_init__(self):
        if self.w_score.dim() != 1:
            raise ShapeException(f"w_score must be a vector, got shape {tuple(self.w_score.shape)}")
        check_finite(self.w_score.detach(), "w_score")

    @property
    def dim(self) -> int:
        return self.w_score.shape[0]


@dataclass
class TimestepNormState:
    """
    running (count, mean, M2) of the score stream, Welford style.
    count 同时也是下一个位置的偏移.
    """
    count: int = 0
    mean: torch.Tensor | float = 0.0
    m2: torch.Tensor | float = 0.0
    eps: float = 1e-5

    def detach(self) -> None:
        if isinstance(self.mean, torch.Tensor):
            self.mean = self.mean.detach()
        if isinstance(self.m2, torch.Tensor):
            self.m2 = self.m2.detach()


def new_scoring_params(dim: int, cfg: ScoringConfig, rng: Rng, scale: float | None = None) -> ScoringParams:
    scale = scale if scale is not None else dim ** -0.5
    w = randn(rng, dim) * scale
    gain = torch.ones((), dtype=default_dtype()) if cfg.affine else None
    bias = torch.zeros((), dtype=default_dtype()) if cfg.affine else None
    return ScoringParams(w_score=w, cfg=cfg, gain=gain, bias=bias)


def timestep_normalize(raw: torch.Tensor, state: TimestepNormState) -> torch.Tensor:
    """
    cumulative standardization of a 1-D chunk against the carried state;
    updates the state in place.
    Uses shifted prefix sums around the carried mean, so processing one row at
    a time and processing the chunk at once agree.
    """
    c = raw.shape[0]
    if c == 0:
        return raw
    n0 = state.count
    mean0 = state.mean if isinstance(state.mean, torch.Tensor) else torch.tensor(state.mean, dtype=raw.dtype)
    m2_0 = state.m2 if isinstance(state.m2, torch.Tensor) else torch.tensor(state.m2, dtype=raw.dtype)

    d = raw - mean0
    s1 = torch.cumsum(d, dim=0)
    s2 = torch.cumsum(d * d, dim=0)
    n = torch.arange(n0 + 1, n0 + c + 1, dtype=raw.dtype)
    mean = mean0 + s1 / n
    m2 = (m2_0 + s2 - s1 * s1 / n).clamp(min=0.0)
    var = m2 / n
    out = (raw - mean) / torch.sqrt(var + state.eps)

    state.count = n0 + c
    state.mean = mean[-1]
    state.m2 = m2[-1]
    return out


def score_tokens(x: torch.Tensor, params: ScoringParams, norm: TimestepNormState) -> torch.Tensor:
    """
    u for the rows of x, which continue the sequence `norm` has seen so far.
    """
    if x.dim() != 2 or x.shape[1] != params.dim:
        raise ShapeException(f"score_tokens: x shape {tuple(x.shape)} does not match w_score dim {params.dim}")
    if not bool(torch.isfinite(x).all()):
        raise NumericException("score_tokens: input contains NaN or Inf", at="score_tokens")

    cfg = params.cfg
    n = x.shape[0]
    offset = norm.count
    raw = x @ params.w_score
    if cfg.slope:
        slope = torch.arange(offset + 1, offset + n + 1, dtype=raw.dtype) * cfg.slope_eps
    else:
        slope = torch.zeros(n, dtype=raw.dtype)

    if cfg.norm_mode == "none":
        norm.count = offset + n
        return raw + slope

    if cfg.slope_order == "slope_then_norm":
        u = timestep_normalize(raw + slope, norm)
        return _affine(u, params)
    u = timestep_normalize(raw, norm)
    return _affine(u, params) + slope


def _affine(u: torch.Tensor, params: ScoringParams) -> torch.Tensor:
    if params.gain is None:
        return u
    return u * params.gain + params.bias


def init_mimic_attention(wq: torch.Tensor, wk: torch.Tensor, rng: Rng | None = None) -> torch.Tensor:
    """
    w_score = w' / |w'|, w' = W_Q W_K^T 1
    向量为零时退回随机初始化, 并打一条 warning.
    """
    if wq.dim() != 2 or wk.dim() != 2 or wq.shape != wk.shape:
        raise ShapeException(f"init_mimic_attention: wq {tuple(wq.shape)} and wk {tuple(wk.shape)} not conformable")
    d = wq.shape[0]
    w = wq @ (wk.T @ torch.ones(d, dtype=wq.dtype))
    norm = torch.linalg.vector_norm(w)
    if float(norm) == 0.0:
        if rng is None:
            raise ArgumentException("mimic init produced a zero vector and no rng was given for the fallback")
        logger.warning("mimic init produced a zero vector, falling back to a random w_score")
        w = randn(rng, d)
        norm = torch.linalg.vector_norm(w)
    return w / norm
