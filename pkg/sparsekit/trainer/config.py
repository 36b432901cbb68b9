from __future__ import annotations

from typing import Literal, Optional, Tuple

from pydantic.v1 import BaseModel, Extra, Field, root_validator

from sparsekit.attention.config import AttnConfig
from sparsekit.selection.scoring import ScoringConfig

AttentionKind = Literal["full", "sw", "sparsek", "sparsek_sw", "sparsek_linear_sw"]

SPARSE_KINDS = ("sparsek", "sparsek_sw", "sparsek_linear_sw")


class ToyModelConfig(BaseModel):
    vocab: int = Field(default=256, ge=2)
    dim: int = Field(default=32, ge=1)
    layers: int = Field(default=2, ge=1)
    heads: int = Field(default=2, ge=1)
    context: int = Field(default=128, ge=2, description="training sequence length n")
    max_positions: Optional[int] = Field(default=None, description="position table size, default context")
    kind: AttentionKind = "sparsek_sw"
    attn: AttnConfig = Field(default_factory=lambda: AttnConfig(k=8, window=8, heads=2, head_dim=16))
    scoring: ScoringConfig = Field(default_factory=ScoringConfig)
    mlp_ratio: int = Field(default=4, ge=1)
    seed: int = 0

    class Config:
        extra = Extra.forbid

    @root_validator(skip_on_failure=True)
    def check_shapes(cls, values):
        attn: AttnConfig = values["attn"]
        if attn.heads != values["heads"] or attn.dim != values["dim"]:
            raise ValueError(f"attn heads x head_dim ({attn.heads} x {attn.head_dim}) must match "
                             f"heads={values['heads']}, dim={values['dim']}")
        if values["kind"] == "sparsek_linear_sw" and values["scoring"].norm_mode != "timestep_norm":
            raise ValueError("sparsek_linear_sw needs scoring.norm_mode = timestep_norm")
        if values["kind"] == "sparsek" and attn.k < 1:
            raise ValueError("kind sparsek needs attn.k >= 1")
        max_positions = values.get("max_positions")
        if max_positions is not None and max_positions < values["context"]:
            raise ValueError("max_positions must be >= context")
        return values

    @property
    def positions(self) -> int:
        return self.max_positions or self.context

    @property
    def sparse(self) -> bool:
        return self.kind in SPARSE_KINDS

    def engine_attn(self) -> AttnConfig:
        """
        the attention config the chunk engine runs with for this kind.
        dense kinds map to k = 0 with a window: the whole table (full) or w (sw).
        """
        attn = self.attn
        if self.kind == "full":
            return attn.copy(update={"k": 0, "window": self.positions, "linear_mix": False})
        if self.kind == "sw":
            return attn.copy(update={"k": 0, "linear_mix": False})
        if self.kind == "sparsek":
            return attn.copy(update={"window": 0, "linear_mix": False})
        if self.kind == "sparsek_linear_sw":
            return attn.copy(update={"linear_mix": True})
        return attn.copy(update={"linear_mix": False})


class TrainHyperParams(BaseModel):
    steps: int = Field(default=200, ge=0)
    batch: int = Field(default=8, ge=1)
    lr: float = Field(default=3e-3, gt=0)
    min_lr: float = Field(default=3e-4, ge=0)
    warmup: int = Field(default=20, ge=0, description="linear warm-up steps from warmup_from")
    warmup_from: float = Field(default=1e-6, ge=0)
    betas: Tuple[float, float] = (0.9, 0.95)
    weight_decay: float = Field(default=0.1, ge=0)
    clip: float = Field(default=1.0, gt=0)
    chunk_len: Optional[int] = Field(default=None, ge=1, description="truncated chunk-wise training")
    prefetch: int = Field(default=0, ge=0, description="bounded batch queue size, 0 = inline")
    log_every: int = Field(default=10, ge=1)

    class Config:
        extra = Extra.forbid
