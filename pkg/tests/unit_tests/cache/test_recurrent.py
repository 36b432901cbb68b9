import os
import time

import pytest
import torch

from sparsekit.attention import AttnConfig, new_attn_params, new_linear_params, sparsek_attention
from sparsekit.cache.recurrent import chunked_attention, chunked_forward, generate_step
from sparsekit.attention.engine import new_cache
from sparsekit.exceptions import ArgumentException, ShapeException
from sparsekit.numerics import make_rng, randn
from sparsekit.selection.scoring import ScoringConfig, new_scoring_params


def make_case(n: int, seed: int = 0, linear_mix: bool = False, **kwargs):
    rng = make_rng(seed)
    cfg = AttnConfig(**{"k": 4.5, "window": 3, "heads": 2, "head_dim": 4, "linear_mix": linear_mix, **kwargs})
    params = new_attn_params(cfg, rng)
    scoring = new_scoring_params(cfg.dim, ScoringConfig(), rng)
    lin = new_linear_params(cfg, rng, noise=0.1) if linear_mix else None
    return randn(rng, n, cfg.dim), params, scoring, cfg, lin


@pytest.mark.parametrize("chunk_len", [1, 7, 64, 128])
@pytest.mark.parametrize("linear_mix", [False, True])
def test_chunked_equals_unchunked(chunk_len, linear_mix):
    x, params, scoring, cfg, lin = make_case(128, seed=1, linear_mix=linear_mix)
    whole, _ = sparsek_attention(x, params, scoring, cfg, lin)
    out, _, cache = chunked_attention(x, chunk_len, params, scoring, cfg, lin)
    assert torch.allclose(out, whole, atol=1e-9, rtol=0)
    assert len(cache.selected) <= cache.capacity
    assert len(cache.ring) <= cfg.window


@pytest.mark.parametrize("window", [0, 5])
def test_chunked_equals_unchunked_other_windows(window):
    x, params, scoring, cfg, lin = make_case(50, seed=2, window=window, k=2)
    whole, _ = sparsek_attention(x, params, scoring, cfg, lin)
    assert torch.allclose(chunked_forward(x, 6, params, scoring, cfg, lin), whole, atol=1e-9, rtol=0)


def test_cache_stays_bounded_between_chunks():
    x, params, scoring, cfg, lin = make_case(90, seed=3)
    cache = new_cache(cfg, scoring.cfg)
    for s in range(0, 90, 9):
        chunked_attention(x[s:s + 9], 9, params, scoring, cfg, lin, cache=cache)
        assert len(cache) <= cache.capacity + cfg.window
    assert cache.seen == 90


def test_generation_matches_batch_rows():
    x, params, scoring, cfg, lin = make_case(40, seed=4)
    whole, _ = sparsek_attention(x, params, scoring, cfg, lin)
    _, _, cache = chunked_attention(x[:20], 20, params, scoring, cfg, lin)
    for i in range(20, 40):
        row, cache = generate_step(cache, x[i], params, scoring, cfg, lin)
        assert torch.allclose(row, whole[i], atol=1e-9, rtol=0)


def test_generation_memory_is_constant():
    x, params, scoring, cfg, lin = make_case(200, seed=5)
    cache = new_cache(cfg, scoring.cfg)
    sizes = []
    for i in range(200):
        _, cache = generate_step(cache, x[i], params, scoring, cfg, lin)
        sizes.append(len(cache))
    assert cache.peak_entries <= cache.capacity + cfg.window + 1
    # warm-up over after capacity + window tokens
    assert len(set(sizes[20:])) == 1


def test_chunks_stop_gradients():
    x, params, scoring, cfg, lin = make_case(24, seed=6)
    x = x.clone().requires_grad_(True)
    out, _, _ = chunked_attention(x, 8, params, scoring, cfg, lin)
    out[8:].sum().backward()
    assert float(x.grad[:8].abs().max()) == 0.0
    assert float(x.grad[8:].abs().max()) > 0.0

    x2 = x.detach().clone().requires_grad_(True)
    whole, _ = sparsek_attention(x2, params, scoring, cfg, lin)
    whole[8:].sum().backward()
    assert float(x2.grad[:8].abs().max()) > 0.0


def test_argument_errors():
    x, params, scoring, cfg, lin = make_case(4)
    with pytest.raises(ArgumentException):
        chunked_attention(x, 0, params, scoring, cfg, lin)
    cache = new_cache(cfg, scoring.cfg)
    with pytest.raises(ShapeException):
        generate_step(cache, x[:2], params, scoring, cfg, lin)


@pytest.mark.skipif(not os.environ.get("SPARSEK_SLOW"), reason="set SPARSEK_SLOW=1 for timing tests")
def test_generation_step_time_is_flat():
    x, params, scoring, cfg, lin = make_case(1, seed=7, k=64, window=64)
    row = x[0]
    cache = new_cache(cfg, scoring.cfg)
    marks = {}
    with torch.no_grad():
        for step in range(1, 10_201):
            begin = time.perf_counter()
            generate_step(cache, row, params, scoring, cfg, lin)
            elapsed = time.perf_counter() - begin
            for mark in (1000, 10_000):
                if mark <= step < mark + 200:
                    marks.setdefault(mark, []).append(elapsed)
    early = sorted(marks[1000])[100]
    late = sorted(marks[10_000])[100]
    assert late / early <= 1.3
