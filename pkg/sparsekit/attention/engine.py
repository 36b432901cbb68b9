"""
Chunk engine shared by unchunked attention, chunked (recurrent) forward and
generation: a chunk attends to the cache (selected + ring) and to itself.

For query i the selection state covers positions <= e = i - w; position e
is offered to the top-k tracker and to the SparseK stream at query i.
A ledger of admission / eviction queries per entry gives every query's
attended set, so blocks of G queries see exactly what G = 1 sees.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch

from sparsekit.attention.config import AttnConfig, AttnParams, LinearAttnParams
from sparsekit.attention.heads import feature_map, multi_head, project
from sparsekit.attention.threshold import thresholds
from sparsekit.cache.kv_cache import CacheEntries, SparseKvCache, prune_cache
from sparsekit.exceptions import ConfigException, ShapeException
from sparsekit.numerics import softmax_row
from sparsekit.selection.scoring import ScoringConfig, ScoringParams, score_tokens

logger = logging.getLogger("sparsekit")

NEVER = np.iinfo(np.int64).max
NEG_INF = float("-inf")


@dataclass
class ChunkLedger:
    """
    admit_at / evict_at hold absolute query indices: an entry is selected for
    queries admit_at <= i < evict_at. Carried entries have admit_at = -1.
    """
    start: int
    window: int
    positions: np.ndarray
    admit_at: np.ndarray
    evict_at: np.ndarray
    taus: np.ndarray
    supports: np.ndarray
    saturated: np.ndarray
    self_appended: bool

    @property
    def queries(self) -> int:
        return self.taus.size

    def selected_at(self, i: int) -> List[int]:
        mask = (self.admit_at <= i) & (i < self.evict_at)
        return sorted(int(p) for p in self.positions[mask])

    def window_at(self, i: int) -> List[int]:
        if self.window >= 1:
            lo = i - self.window + 1
            return [p for p in range(max(0, lo), i + 1)]
        if self.self_appended and i not in self.selected_at(i):
            return [i]
        return []

    def attended_at(self, i: int) -> List[int]:
        return sorted(set(self.selected_at(i)) | set(self.window_at(i)))

    def structure_key(self) -> str:
        """
        digest of the discrete choices; equal keys mean the same attended sets and supports.
        """
        h = hashlib.sha1()
        for arr in (self.positions, self.admit_at, self.evict_at, self.supports, self.saturated):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()


def new_cache(cfg: AttnConfig, scoring: ScoringConfig, stop_grad: bool = True,
              stream_cap: int | None = None) -> SparseKvCache:
    return SparseKvCache(
        k=cfg.k,
        window=cfg.window,
        heads=cfg.heads,
        head_dim=cfg.head_dim,
        stop_grad=stop_grad,
        linear=cfg.linear_mix,
        norm_eps=scoring.norm_eps,
        stream_cap=stream_cap,
    )


def check_linear_mix(cfg: AttnConfig, scoring: ScoringConfig, lin: LinearAttnParams | None) -> None:
    if not cfg.linear_mix:
        return
    if scoring.norm_mode != "timestep_norm":
        raise ConfigException("linear_mix needs timestep_norm scoring: raw scores make the exponential part explode")
    if lin is None:
        raise ConfigException("linear_mix needs LinearAttnParams")
    lin.check(cfg)


def _select_weights(m: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "soft":
        return m
    ones = torch.ones_like(m)
    if mode == "hard":
        return ones
    # straight-through: forward 1, backward d m
    return ones + (m - m.detach())


def attend_chunk(
        x: torch.Tensor,
        params: AttnParams,
        scoring: ScoringParams,
        cfg: AttnConfig,
        cache: SparseKvCache,
        lin: LinearAttnParams | None = None,
) -> Tuple[torch.Tensor, ChunkLedger]:
    """
    rows of x continue the sequence held by `cache`; returns the (c, d) output
    and the chunk's selection ledger. The cache is advanced and pruned.
    """
    if x.dim() != 2 or x.shape[0] == 0:
        raise ShapeException(f"chunk must be a nonempty (c, d) tensor, got {tuple(x.shape)}")
    check_linear_mix(cfg, scoring.cfg, lin)
    if cfg.linear_mix and not cache.linear:
        raise ConfigException("linear_mix needs a cache with linear accumulators")
    params.check(cfg.dim)

    c = x.shape[0]
    start = cache.seen
    end = start + c
    w = cfg.window
    self_append = w == 0 and not cfg.linear_mix

    q, k, v = project(x, params, cfg)
    u = score_tokens(x, scoring, cache.norm)

    n_sel = len(cache.selected)
    ring_start = start - len(cache.ring)
    chunk = CacheEntries(np.arange(start, end, dtype=np.int64), k, v, u)
    pool = CacheEntries.concat([cache.selected, cache.ring, chunk])
    n_pool = len(pool)
    cache.peak_entries = max(cache.peak_entries, n_pool)

    sel_index = {p: i for i, p in enumerate(cache.selected.positions.tolist())}

    def pool_index(pos: int) -> int:
        return sel_index[pos] if pos < ring_start else n_sel + pos - ring_start

    # ---- sweep: selection state per query ---- #
    admit = np.full(n_pool, NEVER, dtype=np.int64)
    admit[:n_sel] = -1
    evict = np.full(n_pool, NEVER, dtype=np.int64)
    taus = np.full(c, np.inf)
    supports = np.zeros(c, dtype=np.int64)
    saturated = np.zeros(c, dtype=np.int64)
    limits = np.full(c, -1, dtype=np.int64)
    pushed: List[int] = []
    u_np = pool.scores.detach().cpu().numpy().astype(np.float64)
    stream = cache.stream
    for r in range(c):
        i = start + r
        e = i - w
        if e < 0:
            continue
        j = pool_index(e)
        pushed.append(j)
        admitted, out = cache.tracker.push(e, u_np[j])
        if admitted:
            admit[j] = i
            if out is not None:
                evict[pool_index(out)] = i
        if stream is not None:
            taus[r] = stream.push(u_np[j])
            supports[r] = stream.support_size
            saturated[r] = len(stream.heap_f)
        limits[r] = e - start

    tau_t = thresholds(u, taus, supports, limits)

    # ---- blocked attention ---- #
    scale = cfg.effective_scale
    positions = pool.positions
    lin_kv = cache.lin_kv
    lin_z = cache.lin_z
    if cfg.linear_mix:
        phi_chunk = feature_map(k, lin)
    outs = []
    for b0 in range(0, c, cfg.group_size):
        b1 = min(c, b0 + cfg.group_size)
        qa = start + b0
        qb = start + b1 - 1
        lo = qa - max(w, 1) + 1
        cand = (positions <= qb) & (((admit <= qb) & (evict > qa)) | (positions >= lo))
        ci = np.flatnonzero(cand)
        idx = torch.as_tensor(ci, dtype=torch.long)
        keys = pool.keys.index_select(1, idx)
        values = pool.values.index_select(1, idx)
        scores = pool.scores.index_select(0, idx)

        qpos = np.arange(qa, qb + 1)[:, None]
        pc = positions[ci][None, :]
        sel_np = (admit[ci][None, :] <= qpos) & (qpos < evict[ci][None, :])
        if w >= 1:
            win_np = (pc >= qpos - w + 1) & (pc <= qpos)
        elif self_append:
            win_np = (pc == qpos) & ~sel_np
        else:
            win_np = np.zeros_like(sel_np)
        sel = torch.as_tensor(sel_np)
        win = torch.as_tensor(win_np)

        m = torch.clamp(scores.unsqueeze(0) - tau_t[b0:b1].unsqueeze(1), 0.0, 1.0)
        weight = _select_weights(m, cfg.selection_mode)
        ones = torch.ones_like(weight)

        qb_ = q[:, b0:b1]
        logits = torch.einsum("hgp,hcp->hgc", qb_, keys) * scale
        if cfg.key_mode == "soft":
            logits = torch.where(sel, logits * weight, logits)
        logits = logits.masked_fill(~(sel | win), NEG_INF)

        if not cfg.linear_mix:
            probs = softmax_row(logits) * torch.where(sel, weight, ones)
            outs.append(torch.einsum("hgc,hcp->hgp", probs, values))
            continue

        gate = torch.where(sel, weight, win.to(weight.dtype))
        shift = logits.amax(dim=-1, keepdim=True).detach()
        shift = torch.where(torch.isfinite(shift), shift, torch.zeros_like(shift))
        ex = torch.exp(logits - shift) * gate
        exact_num = torch.einsum("hgc,hcp->hgp", ex, values)
        exact_den = ex.sum(dim=-1)

        phi_q = feature_map(qb_, lin)
        phi_k = feature_map(keys, lin)
        kern = torch.einsum("hgp,hcp->hgc", phi_q, phi_k) * gate
        corr_num = torch.einsum("hgc,hcp->hgp", kern, values)
        corr_den = kern.sum(dim=-1)

        phi_kb = phi_chunk[:, b0:b1]
        vb = v[:, b0:b1]
        intra = torch.einsum("hgp,hcp->hgc", phi_q, phi_kb).tril()
        lin_num = torch.einsum("hgp,hpq->hgq", phi_q, lin_kv) + torch.einsum("hgc,hcp->hgp", intra, vb)
        lin_den = torch.einsum("hgp,hp->hg", phi_q, lin_z) + intra.sum(dim=-1)

        back = torch.exp(-shift)
        num = exact_num + back * (lin_num - corr_num)
        den = exact_den + back.squeeze(-1) * (lin_den - corr_den)
        outs.append(num / den.unsqueeze(-1))
        lin_kv = lin_kv + torch.einsum("hcp,hcq->hpq", phi_kb, vb)
        lin_z = lin_z + phi_kb.sum(dim=1)

    out = multi_head(torch.cat(outs, dim=1), params.wo)

    # ---- advance the cache ---- #
    if pushed:
        pushed_idx = np.asarray(pushed, dtype=np.int64)
        admitted = admit[pushed_idx] != NEVER
        entries = pool.select(pushed_idx[admitted])
        cache.stage(entries.detach() if cache.stop_grad else entries)
        cache.reject([int(p) for p in positions[pushed_idx[~admitted]]])
    prune_cache(cache)

    ring_from = max(0, end - w) if w > 0 else end
    ring_idx = np.flatnonzero((positions >= ring_from) & (np.arange(n_pool) >= n_sel))
    ring = pool.select(ring_idx)
    cache.set_ring(ring.detach() if cache.stop_grad else ring)
    if cfg.linear_mix:
        cache.lin_kv = cache.keep(lin_kv)
        cache.lin_z = cache.keep(lin_z)
    if cache.stop_grad:
        cache.norm.detach()
    cache.seen = end

    ledger = ChunkLedger(
        start=start,
        window=w,
        positions=positions.copy(),
        admit_at=admit,
        evict_at=evict,
        taus=taus,
        supports=supports,
        saturated=saturated,
        self_appended=self_append,
    )
    return out, ledger
