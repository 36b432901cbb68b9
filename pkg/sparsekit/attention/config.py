from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional, Type, TypeVar

import torch
from pydantic.v1 import BaseModel, Extra, Field, ValidationError, root_validator

from sparsekit.exceptions import ConfigException, ShapeException
from sparsekit.numerics import Rng, default_dtype, randn
from sparsekit.ops.sparsek import KBudget

M = TypeVar("M", bound=BaseModel)


def parse_config(model: Type[M], data: dict | None) -> M:
    """
    pydantic 的校验错误统一转成 ConfigException.
    """
    try:
        return model(**(data or {}))
    except ValidationError as e:
        raise ConfigException(f"invalid {model.__name__}: {e}", at=model.__name__, e=e)


class AttnConfig(BaseModel):
    k: float = Field(default=8, ge=0, description="selected KV budget")
    window: int = Field(default=8, ge=0, description="sliding window size w")
    heads: int = Field(default=2, ge=1)
    head_dim: int = Field(default=8, ge=1)
    scale: Optional[float] = Field(default=None, description="logit scale, default 1/sqrt(head_dim)")
    key_mode: Literal["soft", "hard"] = "hard"
    value_mode: Literal["soft"] = "soft"
    selection_mode: Literal["hard", "soft", "straight_through"] = "soft"
    group_size: int = Field(default=128, ge=1, description="queries per block")
    linear_mix: bool = False

    class Config:
        extra = Extra.forbid

    @root_validator(skip_on_failure=True)
    def check_budget(cls, values):
        if not values["linear_mix"] and values["window"] + values["k"] < 1:
            raise ValueError("window + k must be >= 1")
        return values

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def effective_scale(self) -> float:
        return self.scale if self.scale is not None else 1.0 / math.sqrt(self.head_dim)

    @property
    def budget(self) -> KBudget | None:
        return KBudget(float(self.k)) if self.k > 0 else None

    @property
    def capacity(self) -> int:
        return int(math.floor(self.k))


@dataclass
class AttnParams:
    """
    x @ wq -> queries, heads concatenated along the feature dim.
    """
    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor

    def check(self, dim: int) -> None:
        for name in ("wq", "wk", "wv", "wo"):
            t = getattr(self, name)
            if t.shape != (dim, dim):
                raise ShapeException(f"{name} must be {dim}x{dim}, got {tuple(t.shape)}", at=name)

    def tensors(self) -> dict:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


@dataclass
class LinearAttnParams:
    """
    head-wise linear inside phi(x) = elu(x W_h) + 1, w_phi: (heads, head_dim, head_dim)
    """
    w_phi: torch.Tensor

    def check(self, cfg: AttnConfig) -> None:
        if self.w_phi.shape != (cfg.heads, cfg.head_dim, cfg.head_dim):
            raise ShapeException(f"w_phi must be {(cfg.heads, cfg.head_dim, cfg.head_dim)}, "
                                 f"got {tuple(self.w_phi.shape)}")


def new_attn_params(cfg: AttnConfig, rng: Rng) -> AttnParams:
    d = cfg.dim
    s = d ** -0.5
    return AttnParams(
        wq=randn(rng, d, d) * s,
        wk=randn(rng, d, d) * s,
        wv=randn(rng, d, d) * s,
        wo=randn(rng, d, d) * s,
    )


def new_linear_params(cfg: AttnConfig, rng: Rng, noise: float = 0.02) -> LinearAttnParams:
    eye = torch.eye(cfg.head_dim, dtype=default_dtype()).expand(cfg.heads, -1, -1)
    return LinearAttnParams(w_phi=eye + noise * randn(rng, cfg.heads, cfg.head_dim, cfg.head_dim))
