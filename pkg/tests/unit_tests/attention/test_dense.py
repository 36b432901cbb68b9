import math

import pytest
import torch

from sparsekit.attention import (
    AttnConfig, causal_mask, dense_causal_attention, multi_head, new_attn_params, parse_config, split_heads,
)
from sparsekit.exceptions import ConfigException, ShapeException
from sparsekit.numerics import make_rng, randn


def test_causal_mask():
    assert causal_mask(3).tolist() == [
        [True, False, False],
        [True, True, False],
        [True, True, True],
    ]
    assert causal_mask(4, window=2)[3].tolist() == [False, False, True, True]


def test_dense_matches_loop():
    rng = make_rng(1)
    q, k, v = randn(rng, 6, 3), randn(rng, 6, 3), randn(rng, 6, 3)
    out = dense_causal_attention(q, k, v, scale=0.5)
    for i in range(6):
        logits = torch.stack([q[i] @ k[j] * 0.5 for j in range(i + 1)])
        w = torch.exp(logits - logits.max())
        w = w / w.sum()
        expected = sum(w[j] * v[j] for j in range(i + 1))
        assert torch.allclose(out[i], expected, atol=1e-12)


def test_multi_head_cases():
    rng = make_rng(2)
    o1 = randn(rng, 5, 3)
    wo = randn(rng, 3, 3)
    assert torch.allclose(multi_head([o1], wo), o1 @ wo)

    o2 = randn(rng, 5, 3)
    eye = torch.eye(6)
    assert torch.equal(multi_head([o1, o2], eye), torch.cat([o1, o2], dim=1))

    wo = randn(rng, 6, 6)
    naive = torch.zeros(5, 6)
    for r in range(5):
        row = torch.cat([o1[r], o2[r]])
        naive[r] = row @ wo
    assert torch.allclose(multi_head(torch.stack([o1, o2]), wo), naive, atol=1e-12)


def test_multi_head_shape_errors():
    rng = make_rng(3)
    with pytest.raises(ShapeException):
        multi_head([], torch.eye(2))
    with pytest.raises(ShapeException):
        multi_head([randn(rng, 4, 2), randn(rng, 3, 2)], torch.eye(4))
    with pytest.raises(ShapeException):
        multi_head([randn(rng, 4, 2)], torch.eye(3))
    with pytest.raises(ShapeException):
        split_heads(randn(rng, 4, 5), 2)


def test_attn_config():
    cfg = AttnConfig(k=4, window=2, heads=2, head_dim=8)
    assert cfg.dim == 16
    assert math.isclose(cfg.effective_scale, 8 ** -0.5)
    assert cfg.capacity == 4
    assert AttnConfig(k=0, window=2).budget is None
    assert AttnConfig(k=2.5, window=0).capacity == 2
    assert cfg.key_mode == "hard" and cfg.value_mode == "soft"

    with pytest.raises(ConfigException):
        parse_config(AttnConfig, {"k": 0, "window": 0})
    with pytest.raises(ConfigException):
        parse_config(AttnConfig, {"k": 2, "window": 2, "heads_count": 3})
    assert parse_config(AttnConfig, {"k": 0, "window": 0, "linear_mix": True}).linear_mix


def test_attn_params_check():
    cfg = AttnConfig(heads=2, head_dim=4)
    params = new_attn_params(cfg, make_rng(4))
    params.check(8)
    try:
        params.check(6)
    except ShapeException as e:
        assert e.at == "wq"
    else:
        assert False, "wrong dim must fail"
