"""
ToyDecoder: token + learned absolute position embeddings, pre-LayerNorm blocks
(attention + GELU MLP), untied LM head.

Every attention kind carries the same W_Q / W_K / W_V / W_O; SparseK kinds add
the scoring vector, the linear mix adds the feature-map weights.
"""
from __future__ import annotations

import logging
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F

from sparsekit.attention.config import AttnConfig, AttnParams, LinearAttnParams
from sparsekit.attention.dense import dense_causal_attention
from sparsekit.attention.engine import attend_chunk, new_cache
from sparsekit.attention.sparse import AttnTape, sparsek_attention
from sparsekit.cache.kv_cache import SparseKvCache
from sparsekit.exceptions import ArgumentException, ShapeException
from sparsekit.numerics import make_rng, torch_generator
from sparsekit.selection.scoring import ScoringConfig, ScoringParams, init_mimic_attention
from sparsekit.trainer.config import ToyModelConfig

logger = logging.getLogger("sparsekit")

INIT_STD = 0.02


def _normal(shape, gen: torch.Generator, std: float) -> torch.Tensor:
    return torch.randn(*shape, generator=gen) * std


class SelfAttention(nn.Module):

    def __init__(self, cfg: ToyModelConfig, gen: torch.Generator, layer: int):
        super().__init__()
        self.cfg = cfg
        self.engine_cfg: AttnConfig = cfg.engine_attn()
        d = cfg.dim
        self.wq = nn.Parameter(_normal((d, d), gen, INIT_STD))
        self.wk = nn.Parameter(_normal((d, d), gen, INIT_STD))
        self.wv = nn.Parameter(_normal((d, d), gen, INIT_STD))
        self.wo = nn.Parameter(_normal((d, d), gen, INIT_STD / (2 * cfg.layers) ** 0.5))

        if cfg.sparse:
            self.scoring_cfg = cfg.scoring
            if cfg.scoring.init == "mimic":
                w = init_mimic_attention(self.wq.detach(), self.wk.detach(), make_rng(cfg.seed + layer))
            else:
                w = _normal((d,), gen, d ** -0.5)
            self.w_score = nn.Parameter(w, requires_grad=cfg.scoring.learnable)
            if cfg.scoring.affine:
                self.score_gain = nn.Parameter(torch.ones(()))
                self.score_bias = nn.Parameter(torch.zeros(()))
            else:
                self.score_gain = None
                self.score_bias = None
        else:
            # dense kinds never read scores; the engine still wants a scorer for generation.
            self.scoring_cfg = ScoringConfig(norm_mode="none")
            self.register_buffer("w_score", torch.zeros(d))
            self.score_gain = None
            self.score_bias = None

        if cfg.kind == "sparsek_linear_sw":
            p = cfg.attn.head_dim
            eye = torch.eye(p).expand(cfg.heads, p, p).clone()
            self.w_phi = nn.Parameter(eye + _normal((cfg.heads, p, p), gen, INIT_STD))
        else:
            self.w_phi = None

    def attn_params(self) -> AttnParams:
        return AttnParams(wq=self.wq, wk=self.wk, wv=self.wv, wo=self.wo)

    def scoring_params(self) -> ScoringParams:
        return ScoringParams(w_score=self.w_score, cfg=self.scoring_cfg, gain=self.score_gain, bias=self.score_bias)

    def linear_params(self) -> LinearAttnParams | None:
        return LinearAttnParams(self.w_phi) if self.w_phi is not None else None

    def forward(self, x: torch.Tensor, chunk_len: int | None = None, tapes: List[AttnTape] | None = None) -> torch.Tensor:
        """
        x: (B, n, d). sparse kinds append one tape per sequence to `tapes`.
        """
        kind = self.cfg.kind
        if kind in ("full", "sw"):
            b, n, d = x.shape
            h = self.cfg.heads
            q = (x @ self.wq).view(b, n, h, -1).transpose(1, 2)
            k = (x @ self.wk).view(b, n, h, -1).transpose(1, 2)
            v = (x @ self.wv).view(b, n, h, -1).transpose(1, 2)
            window = self.cfg.attn.window if kind == "sw" else None
            o = dense_causal_attention(q, k, v, self.engine_cfg.effective_scale, window)
            return o.transpose(1, 2).reshape(b, n, d) @ self.wo
        return torch.stack([self.attend(x[i], chunk_len=chunk_len, tapes=tapes) for i in range(x.shape[0])])

    def attend(self, x: torch.Tensor, cache: SparseKvCache | None = None, chunk_len: int | None = None,
               tapes: List[AttnTape] | None = None) -> torch.Tensor:
        """
        one sequence through the chunk engine; with a cache the rows continue it.
        """
        params = self.attn_params()
        scoring = self.scoring_params()
        lin = self.linear_params()
        if cache is not None:
            out, _ = attend_chunk(x, params, scoring, self.engine_cfg, cache, lin)
            return out
        if chunk_len is not None:
            from sparsekit.cache.recurrent import chunked_attention
            out, tape, _ = chunked_attention(x, chunk_len, params, scoring, self.engine_cfg, lin)
        else:
            out, tape = sparsek_attention(x, params, scoring, self.engine_cfg, lin)
        if tapes is not None:
            tapes.append(tape)
        return out

    def new_cache(self) -> SparseKvCache:
        return new_cache(self.engine_cfg, self.scoring_cfg, stop_grad=True)


class MLP(nn.Module):

    def __init__(self, cfg: ToyModelConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.dim, cfg.mlp_ratio * cfg.dim)
        self.proj = nn.Linear(cfg.mlp_ratio * cfg.dim, cfg.dim)

    def forward(self, x):
        return self.proj(F.gelu(self.fc(x)))


class Block(nn.Module):

    def __init__(self, cfg: ToyModelConfig, gen: torch.Generator, layer: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(cfg.dim)
        self.attn = SelfAttention(cfg, gen, layer)
        self.ln_2 = nn.LayerNorm(cfg.dim)
        self.mlp = MLP(cfg)

    def forward(self, x, chunk_len: int | None = None, tapes: List[AttnTape] | None = None):
        x = x + self.attn(self.ln_1(x), chunk_len=chunk_len, tapes=tapes)
        return x + self.mlp(self.ln_2(x))

    def step(self, x: torch.Tensor, cache: SparseKvCache) -> torch.Tensor:
        """
        x: (c, d) rows continuing the sequence held by `cache`.
        """
        x = x + self.attn.attend(self.ln_1(x), cache=cache)
        return x + self.mlp(self.ln_2(x))


class ToyDecoder(nn.Module):

    def __init__(self, cfg: ToyModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch_generator(cfg.seed)
        self.wte = nn.Embedding(cfg.vocab, cfg.dim)
        self.wpe = nn.Embedding(cfg.positions, cfg.dim)
        self.blocks = nn.ModuleList([Block(cfg, gen, i) for i in range(cfg.layers)])
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.lm_head = nn.Linear(cfg.dim, cfg.vocab, bias=False)
        with torch.no_grad():
            for module in (self.wte, self.wpe, self.lm_head):
                module.weight.copy_(_normal(module.weight.shape, gen, INIT_STD))
            for block in self.blocks:
                for lin in (block.mlp.fc, block.mlp.proj):
                    lin.weight.copy_(_normal(lin.weight.shape, gen, INIT_STD))
                    lin.bias.zero_()
        logger.debug("ToyDecoder kind=%s parameters=%d", cfg.kind, self.num_params())

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, idx: torch.Tensor, chunk_len: int | None = None,
                tapes: List[AttnTape] | None = None) -> torch.Tensor:
        """
        idx: (B, n) token ids -> logits (B, n, vocab)
        """
        if idx.dim() != 2:
            raise ShapeException(f"idx must be (B, n), got {tuple(idx.shape)}")
        n = idx.shape[1]
        if n > self.cfg.positions:
            raise ArgumentException(f"sequence length {n} exceeds position table {self.cfg.positions}")
        pos = torch.arange(n)
        x = self.wte(idx) + self.wpe(pos)
        for block in self.blocks:
            x = block(x, chunk_len=chunk_len, tapes=tapes)
        return self.lm_head(self.ln_f(x))

    def new_caches(self) -> List[SparseKvCache]:
        return [block.attn.new_cache() for block in self.blocks]

    def forward_cached(self, idx: torch.Tensor, caches: List[SparseKvCache]) -> torch.Tensor:
        """
        idx: (c,) tokens continuing the sequence in `caches` -> logits (c, vocab)
        """
        start = caches[0].seen
        c = idx.shape[0]
        if start + c > self.cfg.positions:
            raise ArgumentException(f"position {start + c} exceeds position table {self.cfg.positions}")
        x = self.wte(idx) + self.wpe(torch.arange(start, start + c))
        for block, cache in zip(self.blocks, caches):
            x = block.step(x, cache)
        return self.lm_head(self.ln_f(x))

    def decay_groups(self, weight_decay: float) -> list:
        """
        tensors with dim >= 2 decay, vectors and scalars do not.
        """
        params = [p for p in self.parameters() if p.requires_grad]
        return [
            {"params": [p for p in params if p.dim() >= 2], "weight_decay": weight_decay},
            {"params": [p for p in params if p.dim() < 2], "weight_decay": 0.0},
        ]
