from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

import torch

from sparsekit.attention.config import AttnConfig, AttnParams, LinearAttnParams
from sparsekit.attention.engine import ChunkLedger, attend_chunk, new_cache
from sparsekit.exceptions import ConfigException, TapeException
from sparsekit.numerics import check_finite
from sparsekit.selection.scoring import ScoringParams


@dataclass
class AttnTape:
    """
    everything the backward needs: the forward inputs, the autograd graph behind
    `output` and the discrete selection structure of each chunk.
    """
    x: torch.Tensor
    params: AttnParams
    scoring: ScoringParams
    cfg: AttnConfig
    lin: LinearAttnParams | None
    output: torch.Tensor
    ledgers: List[ChunkLedger] = field(default_factory=list)
    chunk_len: int | None = None

    def inputs(self) -> Dict[str, torch.Tensor]:
        named = {"x": self.x}
        named.update(self.params.tensors())
        named["w_score"] = self.scoring.w_score
        if self.scoring.gain is not None:
            named["score_gain"] = self.scoring.gain
            named["score_bias"] = self.scoring.bias
        if self.lin is not None:
            named["w_phi"] = self.lin.w_phi
        return named

    def structure_key(self) -> str:
        return "|".join(ledger.structure_key() for ledger in self.ledgers)

    def replay(self) -> torch.Tensor:
        """
        recompute the forward from the saved inputs.
        """
        with torch.no_grad():
            if self.chunk_len is None:
                out, _ = sparsek_attention(self.x, self.params, self.scoring, self.cfg, self.lin)
                return out
            from sparsekit.cache.recurrent import chunked_forward
            return chunked_forward(self.x, self.chunk_len, self.params, self.scoring, self.cfg, self.lin)


def sparsek_attention(
        x: torch.Tensor,
        params: AttnParams,
        scoring: ScoringParams,
        cfg: AttnConfig,
        lin: LinearAttnParams | None = None,
) -> tuple[torch.Tensor, AttnTape]:
    """
    SparseK attention over one sequence x: (n, d).
    The whole sequence is a single chunk against an empty cache.
    """
    check_finite(x.detach(), "x")
    cache = new_cache(cfg, scoring.cfg)
    out, ledger = attend_chunk(x, params, scoring, cfg, cache, lin)
    return out, AttnTape(x=x, params=params, scoring=scoring, cfg=cfg, lin=lin, output=out, ledgers=[ledger])


def sparsek_attention_backward(tape: AttnTape, grad_out: torch.Tensor) -> Dict[str, torch.Tensor]:
    """
    reverse-mode gradients of <output, grad_out> for every tape input.
    inputs that were not marked requires_grad get zeros.
    """
    if grad_out.shape != tape.output.shape:
        raise TapeException(f"grad_out shape {tuple(grad_out.shape)} != output shape {tuple(tape.output.shape)}")
    named = tape.inputs()
    wanted = {name: t for name, t in named.items() if t.requires_grad}
    grads: Dict[str, torch.Tensor] = {name: torch.zeros_like(t) for name, t in named.items()}
    if not wanted:
        return grads
    if not tape.output.requires_grad:
        raise TapeException("tape output carries no autograd graph")
    got = torch.autograd.grad(
        tape.output,
        list(wanted.values()),
        grad_outputs=grad_out,
        retain_graph=True,
        allow_unused=True,
    )
    for name, g in zip(wanted.keys(), got):
        if g is not None:
            grads[name] = g
    return grads


def linear_mix_attention(
        x: torch.Tensor,
        params: AttnParams,
        scoring: ScoringParams,
        cfg: AttnConfig,
        lin: LinearAttnParams,
) -> torch.Tensor:
    """
    exact exponential attention on the selected / window entries gated by m,
    positive-feature linear attention with gate 1 - m on every causal position.
    """
    if not cfg.linear_mix:
        raise ConfigException("linear_mix_attention needs cfg.linear_mix = true")
    out, _ = sparsek_attention(x, params, scoring, cfg, lin)
    return out
