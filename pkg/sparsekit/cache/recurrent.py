"""
Chunk-wise recurrent processing against a pruned, fixed-size cache.
Outputs equal the unchunked forward; gradients stop at chunk boundaries.
"""
from __future__ import annotations

import logging
from typing import List, Tuple

import torch

from sparsekit.attention.config import AttnConfig, AttnParams, LinearAttnParams
from sparsekit.attention.engine import ChunkLedger, attend_chunk, new_cache
from sparsekit.attention.sparse import AttnTape
from sparsekit.cache.kv_cache import SparseKvCache
from sparsekit.exceptions import ArgumentException, ShapeException
from sparsekit.selection.scoring import ScoringParams

logger = logging.getLogger("sparsekit")


def chunked_attention(
        x: torch.Tensor,
        chunk_len: int,
        params: AttnParams,
        scoring: ScoringParams,
        cfg: AttnConfig,
        lin: LinearAttnParams | None = None,
        cache: SparseKvCache | None = None,
) -> Tuple[torch.Tensor, AttnTape, SparseKvCache]:
    if chunk_len < 1:
        raise ArgumentException(f"chunk_len must be >= 1, got {chunk_len}")
    cache = cache if cache is not None else new_cache(cfg, scoring.cfg, stop_grad=True)
    outs: List[torch.Tensor] = []
    ledgers: List[ChunkLedger] = []
    for s in range(0, x.shape[0], chunk_len):
        out, ledger = attend_chunk(x[s:s + chunk_len], params, scoring, cfg, cache, lin)
        outs.append(out)
        ledgers.append(ledger)
        if len(cache.selected) > cache.capacity or len(cache.ring) > cache.window:
            raise ShapeException("cache exceeded capacity after prune")
    output = torch.cat(outs, dim=0)
    tape = AttnTape(x=x, params=params, scoring=scoring, cfg=cfg, lin=lin, output=output,
                    ledgers=ledgers, chunk_len=chunk_len)
    return output, tape, cache


def chunked_forward(
        x: torch.Tensor,
        chunk_len: int,
        params: AttnParams,
        scoring: ScoringParams,
        cfg: AttnConfig,
        lin: LinearAttnParams | None = None,
) -> torch.Tensor:
    out, _, _ = chunked_attention(x, chunk_len, params, scoring, cfg, lin)
    return out


def generate_step(
        cache: SparseKvCache,
        new_token_state: torch.Tensor,
        params: AttnParams,
        scoring: ScoringParams,
        cfg: AttnConfig,
        lin: LinearAttnParams | None = None,
) -> Tuple[torch.Tensor, SparseKvCache]:
    """
    one decoding step: a chunk of length 1 against cache + window, O(k + w).
    """
    row = new_token_state
    if row.dim() == 1:
        row = row.unsqueeze(0)
    if row.shape[0] != 1:
        raise ShapeException(f"generate_step takes a single row, got {tuple(row.shape)}")
    out, _ = attend_chunk(row, params, scoring, cfg, cache, lin)
    return out[0], cache
