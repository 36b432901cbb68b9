"""
CPU timings: warm up once, then time `repeats` runs per size.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import astuple, dataclass
from typing import Callable, List, Literal, Sequence, TextIO

import torch

from sparsekit.attention.config import AttnConfig, new_attn_params
from sparsekit.attention.dense import dense_attention
from sparsekit.attention.sparse import sparsek_attention
from sparsekit.exceptions import ArgumentException
from sparsekit.numerics import make_rng, percentiles, randn
from sparsekit.ops.sparsek import sparsek
from sparsekit.ops.stream import stream_init
from sparsekit.selection.scoring import ScoringConfig, new_scoring_params

logger = logging.getLogger("sparsekit")

BenchMode = Literal["op", "stream", "attn", "dense", "gen"]
BENCH_MODES = ("op", "stream", "attn", "dense", "gen")
BENCH_HEADER = ("mode", "n", "k", "w", "median_ms", "p10_ms", "p90_ms")


@dataclass
class BenchRow:
    mode: str
    n: int
    k: float
    w: int
    median_ms: float
    p10_ms: float
    p90_ms: float


def time_ms(fn: Callable[[], object], repeats: int, warmup: int = 1) -> List[float]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        begin = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - begin) * 1000.0)
    return samples


def _case(mode: str, n: int, k: float, window: int, heads: int, head_dim: int, seed: int) -> Callable[[], object]:
    rng = make_rng(seed)
    if mode == "op":
        z = rng.standard_normal(n)
        return lambda: sparsek(z, k)
    if mode == "stream":
        zs = rng.standard_normal(n).tolist()

        def run_stream():
            state = stream_init(k)
            for z in zs:
                state.push(z)
            return state
        return run_stream

    cfg = AttnConfig(k=k, window=window, heads=heads, head_dim=head_dim)
    params = new_attn_params(cfg, rng)
    x = randn(rng, n, cfg.dim)
    if mode == "dense":
        return lambda: dense_attention(x, params, cfg)
    scoring = new_scoring_params(cfg.dim, ScoringConfig(), rng)
    if mode == "attn":
        return lambda: sparsek_attention(x, params, scoring, cfg)
    if mode == "gen":
        from sparsekit.cache.recurrent import chunked_attention, generate_step
        _, _, cache = chunked_attention(x, max(1, cfg.group_size), params, scoring, cfg)
        row = randn(rng, cfg.dim)

        def run_step():
            # each call appends one more token to the cache
            return generate_step(cache, row, params, scoring, cfg)
        return run_step
    raise ArgumentException(f"unknown bench mode {mode}, expect one of {BENCH_MODES}")


def run_bench(mode: str, ns: Sequence[int], k: float = 8, window: int = 8, repeats: int = 5,
              heads: int = 2, head_dim: int = 16, seed: int = 0) -> List[BenchRow]:
    if repeats < 1:
        raise ArgumentException("repeats must be >= 1")
    if mode not in BENCH_MODES:
        raise ArgumentException(f"unknown bench mode {mode}, expect one of {BENCH_MODES}")
    rows = []
    with torch.no_grad():
        for n in ns:
            if n < 1:
                raise ArgumentException(f"bench size must be >= 1, got {n}")
            fn = _case(mode, n, k, window, heads, head_dim, seed)
            p10, p50, p90 = percentiles(time_ms(fn, repeats))
            rows.append(BenchRow(mode, n, k, window, p50, p10, p90))
            logger.info("bench %s n=%d median %.3fms", mode, n, p50)
    return rows


def write_bench_csv(rows: Sequence[BenchRow], fp: TextIO) -> None:
    writer = csv.writer(fp)
    writer.writerow(BENCH_HEADER)
    for row in rows:
        writer.writerow(astuple(row))


def scaling_ratio(rows: Sequence[BenchRow], n_small: int, n_large: int) -> float:
    by_n = {row.n: row.median_ms for row in rows}
    return by_n[n_large] / by_n[n_small]
