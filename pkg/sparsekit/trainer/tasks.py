from __future__ import annotations

import logging
from abc import ABCMeta, abstractmethod
from pathlib import Path
from typing import Iterable, Iterator, List, Sequence, Tuple

import numpy as np
import torch

from sparsekit.exceptions import ArgumentException, EmptyCorpusException, StorageException, UsageException
from sparsekit.numerics import Rng, make_rng

logger = logging.getLogger("sparsekit")

Batch = Tuple[torch.Tensor, torch.Tensor, torch.Tensor]
"""(inputs (B, n) long, targets (B, n) long, loss mask (B, n) bool)"""


def _stack(rows: List[np.ndarray], masks: List[np.ndarray]) -> Batch:
    seq = torch.as_tensor(np.stack(rows), dtype=torch.long)
    mask = torch.as_tensor(np.stack(masks), dtype=torch.bool)
    return seq[:, :-1], seq[:, 1:], mask[:, 1:]


class BatchSource(metaclass=ABCMeta):
    """
    训练数据的来源. 每个 batch 的随机性只来自传入的 rng.
    """

    vocab: int = 256

    @abstractmethod
    def batch(self, rng: Rng, batch: int, length: int) -> Batch:
        """
        `batch` sequences of `length` inputs; targets are the inputs shifted by one.
        """
        pass

    def eval_windows(self, length: int) -> Iterator[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        """
        non-overlapping held-out windows: (inputs (n,), targets (n,), mask (n,))
        """
        raise UsageException(f"{type(self).__name__} has no evaluation windows")


# ---- byte-level text ---- #

def encode_bytes(text: str | bytes) -> np.ndarray:
    data = text.encode("utf-8") if isinstance(text, str) else text
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode_bytes(tokens: Iterable[int]) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")


class TextCorpus(BatchSource):
    """
    UTF-8 documents as byte tokens. Documents shorter than context + 1 are skipped,
    never packed together.
    """

    vocab = 256

    def __init__(self, documents: Sequence[str | bytes], context: int):
        self.context = context
        self.documents: List[np.ndarray] = []
        skipped = 0
        for doc in documents:
            tokens = encode_bytes(doc)
            if tokens.size < context + 1:
                skipped += 1
                continue
            self.documents.append(tokens)
        if skipped:
            logger.info("text corpus skipped %d documents shorter than %d bytes", skipped, context + 1)
        if not self.documents:
            raise EmptyCorpusException(f"no document reaches context length {context} + 1")
        lengths = np.asarray([d.size - context for d in self.documents], dtype=np.float64)
        self._weights = lengths / lengths.sum()

    @classmethod
    def from_paths(cls, paths: Sequence[str | Path], context: int) -> "TextCorpus":
        docs = []
        for p in paths:
            path = Path(p)
            files = sorted(path.rglob("*.txt")) if path.is_dir() else [path]
            for f in files:
                try:
                    docs.append(f.read_bytes())
                except OSError as e:
                    raise StorageException(f"cannot read corpus file {f}", at=str(f), e=e)
        if not docs:
            raise EmptyCorpusException(f"no corpus files under {list(map(str, paths))}")
        return cls(docs, context)

    def batch(self, rng: Rng, batch: int, length: int) -> Batch:
        if length > self.context:
            raise ArgumentException(f"batch length {length} exceeds corpus context {self.context}")
        rows, masks = [], []
        for _ in range(batch):
            doc = self.documents[int(rng.choice(len(self.documents), p=self._weights))]
            start = int(rng.integers(0, doc.size - length))
            rows.append(doc[start:start + length + 1])
            masks.append(np.ones(length + 1, dtype=bool))
        return _stack(rows, masks)

    def eval_windows(self, length: int):
        for doc in self.documents:
            for s in range(0, doc.size - length, length):
                seq = torch.as_tensor(doc[s:s + length + 1], dtype=torch.long)
                yield seq[:-1], seq[1:], torch.ones(length, dtype=torch.bool)


class RepeatingCorpus(BatchSource):
    """
    0, 1, ..., period - 1, 0, 1, ... from a random phase: fully memorizable.
    """

    def __init__(self, period: int = 10, vocab: int | None = None, eval_count: int = 8):
        if period < 2:
            raise ArgumentException("period must be >= 2")
        self.period = period
        self.vocab = vocab or period
        self.eval_count = eval_count

    def _row(self, phase: int, length: int) -> np.ndarray:
        return (np.arange(length + 1) + phase) % self.period

    def batch(self, rng: Rng, batch: int, length: int) -> Batch:
        rows = [self._row(int(rng.integers(0, self.period)), length) for _ in range(batch)]
        return _stack(rows, [np.ones(length + 1, dtype=bool)] * batch)

    def eval_windows(self, length: int):
        for i in range(self.eval_count):
            seq = torch.as_tensor(self._row(i % self.period, length), dtype=torch.long)
            yield seq[:-1], seq[1:], torch.ones(length, dtype=torch.bool)


class UniformCorpus(BatchSource):
    """
    i.i.d. uniform tokens; a model can do no better than ppl = vocab.
    """

    def __init__(self, vocab: int, seed: int = 0, eval_count: int = 8):
        self.vocab = vocab
        self.seed = seed
        self.eval_count = eval_count

    def batch(self, rng: Rng, batch: int, length: int) -> Batch:
        rows = [rng.integers(0, self.vocab, size=length + 1) for _ in range(batch)]
        return _stack(rows, [np.ones(length + 1, dtype=bool)] * batch)

    def eval_windows(self, length: int):
        rng = make_rng(self.seed)
        for _ in range(self.eval_count):
            seq = torch.as_tensor(rng.integers(0, self.vocab, size=length + 1), dtype=torch.long)
            yield seq[:-1], seq[1:], torch.ones(length, dtype=torch.bool)


class RecallTask(BatchSource):
    """
    key/value pairs at the start, noise filler, then queries of some keys at the end;
    the loss counts only the recalled values.

    token layout: [0, filler) noise, [filler, filler + keys) keys, the rest values.
    """

    def __init__(self, pairs: int = 4, queries: int = 2, filler: int = 16, keys: int = 16, values: int = 16,
                 eval_seed: int = 1234, eval_count: int = 16):
        if queries > pairs:
            raise ArgumentException("queries must be <= pairs")
        self.pairs = pairs
        self.queries = queries
        self.filler = filler
        self.keys = keys
        self.values = values
        self.vocab = filler + keys + values
        self.eval_seed = eval_seed
        self.eval_count = eval_count

    def sample(self, rng: Rng, length: int) -> Tuple[np.ndarray, np.ndarray]:
        need = 2 * self.pairs + 2 * self.queries
        if length + 1 < need + 1:
            raise ArgumentException(f"recall sequence needs length >= {need}")
        ks = rng.choice(self.keys, size=self.pairs, replace=False) + self.filler
        vs = rng.integers(0, self.values, size=self.pairs) + self.filler + self.keys
        seq = rng.integers(0, self.filler, size=length + 1)
        mask = np.zeros(length + 1, dtype=bool)
        seq[0:2 * self.pairs:2] = ks
        seq[1:2 * self.pairs:2] = vs
        asked = rng.choice(self.pairs, size=self.queries, replace=False)
        tail = length + 1 - 2 * self.queries
        for q, a in enumerate(asked):
            seq[tail + 2 * q] = ks[a]
            seq[tail + 2 * q + 1] = vs[a]
            mask[tail + 2 * q + 1] = True
        return seq, mask

    def batch(self, rng: Rng, batch: int, length: int) -> Batch:
        rows, masks = zip(*(self.sample(rng, length) for _ in range(batch)))
        return _stack(list(rows), list(masks))

    def eval_windows(self, length: int):
        rng = make_rng(self.eval_seed)
        for _ in range(self.eval_count):
            seq, mask = self.sample(rng, length)
            s = torch.as_tensor(seq, dtype=torch.long)
            m = torch.as_tensor(mask, dtype=torch.bool)
            yield s[:-1], s[1:], m[1:]


# ---- passkey ---- #

FILLER = b"The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again. "
# the answer follows the cue directly; the passkey sentence repeats it
QUERY = b" key "
PASSKEY_DIGITS = 5


def _passkey_sentence(digits: bytes) -> bytes:
    return QUERY + digits


def make_passkey_task(rng: Rng, context_len: int, window: int, distance: int | None = None) -> Tuple[np.ndarray, Tuple[int, int]]:
    """
    filler text with a random digit passkey, the cue and the answer at the end.
    returns (tokens of length context_len, (answer_start, answer_end)).

    `distance` is answer_start minus the position of the passkey digits, so the
    query predicting answer digit j looks back distance - 1 tokens: distance <= window
    is inside the sliding window. by default the passkey lands beyond it.
    """
    if context_len <= window:
        raise ArgumentException(f"context_len {context_len} must exceed window {window}")
    smallest, largest = passkey_distance_range(context_len)
    if smallest > largest:
        raise ArgumentException(f"context_len {context_len} is too short for a passkey")
    digits = bytes(ord("0") + int(d) for d in rng.integers(0, 10, size=PASSKEY_DIGITS))
    sentence = _passkey_sentence(digits)
    answer_start = context_len - PASSKEY_DIGITS
    question_start = answer_start - len(QUERY)
    if distance is None:
        low = min(max(window + 1, smallest), largest)
        distance = int(rng.integers(low, largest + 1))
    if not smallest <= distance <= largest:
        raise ArgumentException(f"passkey distance {distance} outside [{smallest}, {largest}] for context {context_len}")
    sentence_at = answer_start - distance - len(QUERY)

    filler = (FILLER * (context_len // len(FILLER) + 2))[:context_len]
    buf = bytearray(filler)
    buf[sentence_at:sentence_at + len(sentence)] = sentence
    buf[question_start:answer_start] = QUERY
    buf[answer_start:context_len] = digits
    tokens = np.frombuffer(bytes(buf), dtype=np.uint8).astype(np.int64)
    return tokens, (answer_start, context_len)


def passkey_distance_range(context_len: int) -> Tuple[int, int]:
    """
    smallest and largest distance make_passkey_task can place.
    the smallest puts the passkey sentence right before the cue.
    """
    answer_start = context_len - PASSKEY_DIGITS
    smallest = PASSKEY_DIGITS + len(QUERY)
    largest = answer_start - len(QUERY)
    return smallest, largest


class PasskeyTask(BatchSource):
    """
    passkey sequences of exactly `length + 1` tokens; the loss counts only the answer digits.
    """

    vocab = 256

    def __init__(self, window: int, max_distance: int | None = None):
        self.window = window
        self.max_distance = max_distance

    def sample(self, rng: Rng, length: int, distance: int | None = None) -> Tuple[np.ndarray, np.ndarray]:
        smallest, largest = passkey_distance_range(length + 1)
        if distance is None:
            hi = min(largest, self.max_distance) if self.max_distance else largest
            distance = int(rng.integers(smallest, max(smallest, hi) + 1))
        tokens, (a, b) = make_passkey_task(rng, length + 1, self.window, distance)
        mask = np.zeros(length + 1, dtype=bool)
        mask[a:b] = True
        return tokens, mask

    def batch(self, rng: Rng, batch: int, length: int) -> Batch:
        rows, masks = zip(*(self.sample(rng, length) for _ in range(batch)))
        return _stack(list(rows), list(masks))
