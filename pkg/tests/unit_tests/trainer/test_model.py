import pytest
import torch
from pydantic.v1 import ValidationError

from sparsekit.attention import AttnConfig
from sparsekit.exceptions import ArgumentException, ShapeException
from sparsekit.selection.scoring import ScoringConfig
from sparsekit.trainer.config import ToyModelConfig
from sparsekit.trainer.model import ToyDecoder

KINDS = ["full", "sw", "sparsek", "sparsek_sw", "sparsek_linear_sw"]


def tiny(kind: str = "sparsek_sw", **kwargs) -> ToyModelConfig:
    base = dict(vocab=12, dim=8, layers=2, heads=2, context=16, kind=kind,
                attn=AttnConfig(k=2.5, window=3, heads=2, head_dim=4), seed=0)
    base.update(kwargs)
    return ToyModelConfig(**base)


def test_forward_shapes_and_errors():
    model = ToyDecoder(tiny())
    idx = torch.randint(0, 12, (2, 16), generator=torch.Generator().manual_seed(0))
    assert model(idx).shape == (2, 16, 12)
    with pytest.raises(ShapeException):
        model(idx[0])
    with pytest.raises(ArgumentException):
        model(torch.zeros(1, 17, dtype=torch.long))


def test_same_seed_same_weights():
    a = ToyDecoder(tiny()).state_dict()
    b = ToyDecoder(tiny()).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = ToyDecoder(tiny(seed=1)).state_dict()
    assert not torch.equal(a["blocks.0.attn.wq"], c["blocks.0.attn.wq"])


def test_parameter_counts_are_budget_matched():
    counts = {kind: ToyDecoder(tiny(kind)).num_params() for kind in KINDS}
    assert counts["full"] == counts["sw"]
    # scoring vector per layer
    assert counts["sparsek_sw"] == counts["sw"] + 2 * 8
    assert counts["sparsek"] == counts["sparsek_sw"]
    # plus per-head feature maps
    assert counts["sparsek_linear_sw"] == counts["sparsek_sw"] + 2 * 2 * 4 * 4


@pytest.mark.parametrize("kind", KINDS)
def test_cached_forward_equals_batch(kind):
    model = ToyDecoder(tiny(kind))
    idx = torch.randint(0, 12, (16,), generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        whole = model(idx.unsqueeze(0))[0]
        caches = model.new_caches()
        parts = [model.forward_cached(idx[:5], caches)]
        for i in range(5, 16):
            parts.append(model.forward_cached(idx[i:i + 1], caches))
    assert torch.allclose(torch.cat(parts), whole, atol=1e-9, rtol=0)
    with pytest.raises(ArgumentException):
        model.forward_cached(idx[:1], caches)


@pytest.mark.parametrize("kind", ["sparsek_sw", "sparsek_linear_sw"])
def test_chunked_forward_equals_unchunked(kind):
    model = ToyDecoder(tiny(kind))
    idx = torch.randint(0, 12, (2, 16), generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        assert torch.allclose(model(idx, chunk_len=3), model(idx), atol=1e-9, rtol=0)


def test_tapes_are_recorded_for_sparse_kinds():
    idx = torch.zeros(3, 8, dtype=torch.long)
    tapes = []
    ToyDecoder(tiny())(idx, tapes=tapes)
    assert len(tapes) == 3 * 2
    tapes = []
    ToyDecoder(tiny("sw"))(idx, tapes=tapes)
    assert tapes == []


def test_decay_groups():
    model = ToyDecoder(tiny())
    decay, no_decay = model.decay_groups(0.1)
    assert decay["weight_decay"] == 0.1 and no_decay["weight_decay"] == 0.0
    assert all(p.dim() >= 2 for p in decay["params"])
    w_score = model.blocks[0].attn.w_score
    assert any(p is w_score for p in no_decay["params"])


def test_frozen_scorer_and_mimic_init():
    model = ToyDecoder(tiny(scoring=ScoringConfig(learnable=False, init="mimic")))
    w_score = model.blocks[0].attn.w_score
    assert not w_score.requires_grad
    assert abs(float(w_score.norm()) - 1.0) < 1e-12
    groups = model.decay_groups(0.1)
    assert not any(p is w_score for g in groups for p in g["params"])


def test_config_validation():
    with pytest.raises(ValidationError):
        ToyModelConfig(dim=8, heads=2, attn=AttnConfig(heads=2, head_dim=8))
    with pytest.raises(ValidationError):
        ToyModelConfig(dim=8, heads=2, attn=AttnConfig(heads=2, head_dim=4), kind="sparsek_linear_sw",
                       scoring=ScoringConfig(norm_mode="none"))
    with pytest.raises(ValidationError):
        ToyModelConfig(dim=8, heads=2, attn=AttnConfig(heads=2, head_dim=4), context=16, max_positions=8)
    with pytest.raises(ValidationError):
        ToyModelConfig(dim=8, heads=2, attn=AttnConfig(heads=2, head_dim=4), typo=1)


def test_engine_configs_per_kind():
    assert tiny("full", max_positions=32).engine_attn().window == 32
    assert tiny("full").engine_attn().k == 0
    assert tiny("sw").engine_attn().window == 3
    assert tiny("sparsek").engine_attn().window == 0
    assert tiny("sparsek_linear_sw").engine_attn().linear_mix
