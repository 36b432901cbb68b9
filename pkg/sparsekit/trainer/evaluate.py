from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch

from sparsekit.cache.kv_cache import SparseKvCache
from sparsekit.exceptions import ArgumentException, EmptyCorpusException
from sparsekit.numerics import Rng, torch_generator
from sparsekit.trainer.model import ToyDecoder
from sparsekit.trainer.tasks import BatchSource, decode_bytes, encode_bytes, make_passkey_task, \
    passkey_distance_range

logger = logging.getLogger("sparsekit")


def eval_ppl(model: ToyDecoder, source: BatchSource, length: int | None = None,
             chunk_len: int | None = None) -> float:
    """
    exp of the mean next-token NLL over the source's non-overlapping held-out windows.
    """
    length = length or model.cfg.context
    total = 0.0
    count = 0
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for inputs, targets, mask in source.eval_windows(length):
                logits = model(inputs.unsqueeze(0), chunk_len=chunk_len)[0]
                logp = torch.log_softmax(logits.to(torch.float64), dim=-1)
                nll = -logp.gather(1, targets.unsqueeze(1)).squeeze(1)
                total += float(nll[mask].sum())
                count += int(mask.sum())
    finally:
        model.train(was_training)
    if count == 0:
        raise EmptyCorpusException("no evaluation tokens")
    return math.exp(total / count)


def distance_buckets(window: int, multiples: int = 4) -> List[tuple]:
    """
    ((lo, hi], label) for hi = window, 2 window, ... multiples x window.
    """
    return [((b - 1) * window, b * window, str(b * window)) for b in range(1, multiples + 1)]


def passkey_accuracy(
        model: ToyDecoder,
        rng: Rng,
        window: int,
        context_len: int | None = None,
        samples: int = 20,
        multiples: int = 4,
        chunk_len: int | None = None,
) -> Dict[str, Optional[float]]:
    """
    teacher-forced exact match of all passkey digits, per distance bucket up to
    `multiples` x window. a bucket the context cannot hold reports None.
    """
    context_len = context_len or model.cfg.positions
    smallest, largest = passkey_distance_range(context_len)
    result: Dict[str, Optional[float]] = {}
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for lo, hi, label in distance_buckets(window, multiples):
                lo, hi = max(lo + 1, smallest), min(hi, largest)
                if lo > hi:
                    result[label] = None
                    continue
                hits = 0
                for _ in range(samples):
                    distance = int(rng.integers(lo, hi + 1))
                    tokens, (a, b) = make_passkey_task(rng, context_len, window, distance)
                    seq = torch.as_tensor(tokens, dtype=torch.long)
                    logits = model(seq[:-1].unsqueeze(0), chunk_len=chunk_len)[0]
                    predicted = logits[a - 1:b - 1].argmax(dim=-1)
                    hits += int(torch.equal(predicted, seq[a:b]))
                result[label] = hits / samples
                logger.debug("passkey bucket %s: %d/%d", label, hits, samples)
    finally:
        model.train(was_training)
    return result


@dataclass
class Generation:
    tokens: List[int] = field(default_factory=list)
    caches: List[SparseKvCache] = field(default_factory=list)
    pending: Optional[int] = None
    """the last sampled token, not yet fed to the caches"""

    @property
    def text(self) -> str:
        return decode_bytes(self.tokens)


def _pick(logits: torch.Tensor, temperature: float, gen: torch.Generator | None) -> int:
    if temperature <= 0.0:
        return int(torch.argmax(logits))
    probs = torch.softmax(logits.to(torch.float64) / temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=gen))


def generate_text(
        model: ToyDecoder,
        prompt: str | bytes | Sequence[int],
        max_tokens: int,
        temperature: float = 0.0,
        seed: int = 0,
        resume: Generation | None = None,
) -> Generation:
    """
    constant-memory decoding through per-layer caches. temperature 0 is greedy;
    otherwise sampling from a generator seeded with `seed`.
    """
    if max_tokens < 0:
        raise ArgumentException("max_tokens must be >= 0")
    feed = list(encode_bytes(prompt)) if isinstance(prompt, (str, bytes)) else [int(t) for t in prompt]
    if resume is not None:
        caches = resume.caches
        if resume.pending is not None:
            feed = [resume.pending] + feed
    else:
        caches = model.new_caches()
    if not feed:
        raise ArgumentException("generation needs a prompt or a pending token")
    if min(feed) < 0 or max(feed) >= model.cfg.vocab:
        raise ArgumentException(f"prompt tokens must lie in [0, {model.cfg.vocab})")

    gen = torch_generator(seed) if temperature > 0.0 else None
    out: List[int] = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model.forward_cached(torch.as_tensor(feed, dtype=torch.long), caches)[-1]
            for i in range(max_tokens):
                token = _pick(logits, temperature, gen)
                out.append(token)
                if i + 1 < max_tokens:
                    logits = model.forward_cached(torch.as_tensor([token], dtype=torch.long), caches)[-1]
    finally:
        model.train(was_training)
    return Generation(tokens=out, caches=caches, pending=out[-1] if out else None)
