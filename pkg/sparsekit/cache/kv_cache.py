"""
Fixed-size, truncation-free KV cache.

Two regions:
    selected   at most floor(k) entries chosen by frozen score, pruned irreversibly
    ring       the last `window` positions, not yet candidates for selection
Scores are stored as computed and never recomputed.
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, List, Set

import numpy as np
import torch

from sparsekit.exceptions import ArgumentException, ShapeException, StorageException
from sparsekit.numerics import default_dtype
from sparsekit.ops.stream import StreamState
from sparsekit.ops.sparsek import KBudget
from sparsekit.selection.mask import IrreversibleTopK
from sparsekit.selection.scoring import TimestepNormState

logger = logging.getLogger("sparsekit")

CACHE_MAGIC = b"SPKC"
CACHE_VERSION = 1


@dataclass
class CacheEntries:
    """
    keys / values: (heads, N, head_dim), scores: (N,), positions ascending.
    """
    positions: np.ndarray
    keys: torch.Tensor
    values: torch.Tensor
    scores: torch.Tensor

    def __len__(self) -> int:
        return int(self.positions.size)

    @classmethod
    def empty(cls, heads: int, head_dim: int, dtype: torch.dtype | None = None) -> "CacheEntries":
        dtype = dtype or default_dtype()
        return cls(
            positions=np.zeros(0, dtype=np.int64),
            keys=torch.zeros(heads, 0, head_dim, dtype=dtype),
            values=torch.zeros(heads, 0, head_dim, dtype=dtype),
            scores=torch.zeros(0, dtype=dtype),
        )

    def select(self, index: np.ndarray) -> "CacheEntries":
        idx = torch.as_tensor(index, dtype=torch.long)
        return CacheEntries(
            positions=self.positions[index],
            keys=self.keys.index_select(1, idx),
            values=self.values.index_select(1, idx),
            scores=self.scores.index_select(0, idx),
        )

    def detach(self) -> "CacheEntries":
        return CacheEntries(self.positions, self.keys.detach(), self.values.detach(), self.scores.detach())

    @staticmethod
    def concat(parts: List["CacheEntries"]) -> "CacheEntries":
        return CacheEntries(
            positions=np.concatenate([p.positions for p in parts]),
            keys=torch.cat([p.keys for p in parts], dim=1),
            values=torch.cat([p.values for p in parts], dim=1),
            scores=torch.cat([p.scores for p in parts], dim=0),
        )


@dataclass
class EvictionReport:
    evicted: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.evicted)


class SparseKvCache:
    """
    一个序列 (一层) 的 KV cache, 单一持有者.
    capacity = floor(k); window 槽位单独存放, 不占 capacity.
    KV 条目最多 floor(k) + window 个; evicted 账本不受此限, 每淘汰一个位置加一个整数.
    """

    def __init__(
            self,
            k: float,
            window: int,
            heads: int,
            head_dim: int,
            stop_grad: bool = True,
            linear: bool = False,
            norm_eps: float = 1e-5,
            stream_cap: int | None = None,
    ):
        if k < 0 or window < 0:
            raise ArgumentException(f"cache needs k >= 0 and window >= 0, got k={k}, window={window}")
        self.k = float(k)
        self.window = window
        self.heads = heads
        self.head_dim = head_dim
        self.capacity = int(np.floor(k))
        self.stop_grad = stop_grad
        self.selected = CacheEntries.empty(heads, head_dim)
        self.ring = CacheEntries.empty(heads, head_dim)
        self.tracker = IrreversibleTopK(self.capacity)
        self.stream: StreamState | None = StreamState(k=KBudget(self.k), cap=stream_cap) if k > 0 else None
        self.norm = TimestepNormState(eps=norm_eps)
        self.lin_kv: torch.Tensor | None = None
        self.lin_z: torch.Tensor | None = None
        if linear:
            self.lin_kv = torch.zeros(heads, head_dim, head_dim, dtype=default_dtype())
            self.lin_z = torch.zeros(heads, head_dim, dtype=default_dtype())
        # next absolute position
        self.seen = 0
        self.evicted: Set[int] = set()
        self.peak_entries = 0
        self._staged: List[CacheEntries] = []
        self._rejected: List[int] = []

    @property
    def linear(self) -> bool:
        return self.lin_kv is not None

    def __len__(self) -> int:
        return len(self.selected) + len(self.ring)

    def keep(self, t: torch.Tensor) -> torch.Tensor:
        return t.detach() if self.stop_grad else t

    def insert(self, positions, keys: torch.Tensor, values: torch.Tensor, scores: torch.Tensor) -> None:
        """
        builds a cache by hand from precomputed scores: offer entries to the selected region in
        position order, then call prune_cache. the attention engine pushes through the tracker
        itself and hands its entries to stage / reject.
        """
        positions = np.asarray(positions, dtype=np.int64)
        if keys.shape[1] != positions.size or values.shape[1] != positions.size or scores.shape[0] != positions.size:
            raise ShapeException("insert: positions, keys, values and scores disagree in length")
        admitted = []
        for i, (pos, s) in enumerate(zip(positions.tolist(), scores.detach().tolist())):
            ok, _ = self.tracker.push(pos, s)
            if ok:
                admitted.append(i)
            else:
                self._rejected.append(pos)
        if admitted:
            entries = CacheEntries(positions, keys, values, scores).select(np.asarray(admitted))
            self.stage(entries)

    def stage(self, entries: CacheEntries) -> None:
        """
        entries already pushed through the tracker by the caller.
        """
        if len(entries):
            self._staged.append(entries)

    def reject(self, positions: List[int]) -> None:
        self._rejected.extend(positions)

    def set_ring(self, entries: CacheEntries) -> None:
        if len(entries) > self.window:
            raise ShapeException(f"ring holds at most {self.window} entries, got {len(entries)}")
        self.ring = entries


def prune_cache(cache: SparseKvCache) -> EvictionReport:
    """
    keep exactly the tracker's top-floor(k) positions; everything else leaves for good.
    """
    parts = [cache.selected] + cache._staged
    cache._staged = []
    pool = CacheEntries.concat(parts) if len(parts) > 1 else parts[0]
    members = cache.tracker.member_set()
    keep = np.asarray([p in members for p in pool.positions.tolist()], dtype=bool)
    dropped = [int(p) for p in pool.positions[~keep]] + cache._rejected
    cache._rejected = []
    kept = pool.select(np.flatnonzero(keep))
    order = np.argsort(kept.positions, kind="stable")
    cache.selected = kept.select(order)
    cache.evicted.update(dropped)
    if dropped:
        logger.debug("prune_cache evicted %d positions, %d retained", len(dropped), len(cache.selected))
    return EvictionReport(evicted=sorted(dropped))


# ---- SPKC snapshot ---- #

_HEAD = struct.Struct("<IIIIdQB")
_NORM = struct.Struct("<Qddd")
_STREAM = struct.Struct("<Qdddd qQQ II")


def _write_array(fp: BinaryIO, arr: np.ndarray, dtype: str) -> None:
    fp.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(fp: BinaryIO, count: int, dtype: str) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    data = fp.read(count * itemsize)
    if len(data) != count * itemsize:
        raise StorageException("SPKC snapshot is truncated")
    return np.frombuffer(data, dtype=dtype).copy()


def _read_struct(fp: BinaryIO, st: struct.Struct) -> tuple:
    data = fp.read(st.size)
    if len(data) != st.size:
        raise StorageException("SPKC snapshot is truncated")
    return st.unpack(data)


def _write_entries(fp: BinaryIO, e: CacheEntries) -> None:
    fp.write(struct.pack("<I", len(e)))
    _write_array(fp, e.positions, "<i8")
    _write_array(fp, e.scores.detach().cpu().numpy(), "<f8")
    _write_array(fp, e.keys.detach().cpu().numpy(), "<f8")
    _write_array(fp, e.values.detach().cpu().numpy(), "<f8")


def _read_entries(fp: BinaryIO, heads: int, head_dim: int) -> CacheEntries:
    (n,) = _read_struct(fp, struct.Struct("<I"))
    dtype = default_dtype()
    positions = _read_array(fp, n, "<i8")
    scores = torch.as_tensor(_read_array(fp, n, "<f8"), dtype=dtype)
    keys = torch.as_tensor(_read_array(fp, heads * n * head_dim, "<f8").reshape(heads, n, head_dim), dtype=dtype)
    values = torch.as_tensor(_read_array(fp, heads * n * head_dim, "<f8").reshape(heads, n, head_dim), dtype=dtype)
    return CacheEntries(positions, keys, values, scores)


def dump_cache(cache: SparseKvCache, fp: BinaryIO) -> None:
    if cache._staged or cache._rejected:
        raise StorageException("cache has staged entries, prune before dumping")
    flags = (1 if cache.stop_grad else 0) | (2 if cache.linear else 0) | (4 if cache.stream is not None else 0)
    fp.write(CACHE_MAGIC)
    fp.write(struct.pack("<H", CACHE_VERSION))
    fp.write(_HEAD.pack(cache.heads, cache.head_dim, cache.capacity, cache.window, cache.k, cache.seen, flags))
    norm = cache.norm
    fp.write(_NORM.pack(norm.count, float(norm.mean), float(norm.m2), norm.eps))
    fp.write(struct.pack("<Q", cache.tracker.pushed))
    _write_entries(fp, cache.selected)
    _write_entries(fp, cache.ring)

    if cache.stream is not None:
        s = cache.stream
        cap = s.cap if s.cap is not None else -1
        fp.write(_STREAM.pack(s.t, s.tau, s.sum_f, s.sum_s, s.max_evicted, cap, s.heap_ops, s.truncations,
                              len(s.heap_f), len(s.heap_s)))
        for heap in (s.heap_f, s.heap_s):
            _write_array(fp, np.asarray([v for v, _ in heap], dtype=np.float64), "<f8")
            _write_array(fp, np.asarray([i for _, i in heap], dtype=np.int64), "<i8")
        fp.write(struct.pack("<Q", len(s.evicted)))
        _write_array(fp, np.asarray(sorted(s.evicted), dtype=np.int64), "<i8")

    if cache.linear:
        _write_array(fp, cache.lin_kv.detach().cpu().numpy(), "<f8")
        _write_array(fp, cache.lin_z.detach().cpu().numpy(), "<f8")

    fp.write(struct.pack("<QQ", len(cache.evicted), cache.peak_entries))
    _write_array(fp, np.asarray(sorted(cache.evicted), dtype=np.int64), "<i8")


def load_cache(fp: BinaryIO) -> SparseKvCache:
    magic = fp.read(4)
    if magic != CACHE_MAGIC:
        raise StorageException(f"not a SPKC snapshot (magic {magic!r})")
    (version,) = _read_struct(fp, struct.Struct("<H"))
    if version != CACHE_VERSION:
        raise StorageException(f"unsupported SPKC version {version}")
    heads, head_dim, capacity, window, k, seen, flags = _read_struct(fp, _HEAD)
    cache = SparseKvCache(k, window, heads, head_dim, stop_grad=bool(flags & 1), linear=bool(flags & 2))
    if cache.capacity != capacity:
        raise StorageException(f"SPKC capacity {capacity} does not match k={k}")
    cache.seen = seen
    count, mean, m2, eps = _read_struct(fp, _NORM)
    dtype = default_dtype()
    cache.norm = TimestepNormState(count=count, mean=torch.tensor(mean, dtype=dtype),
                                   m2=torch.tensor(m2, dtype=dtype), eps=eps)
    (pushed,) = _read_struct(fp, struct.Struct("<Q"))
    cache.selected = _read_entries(fp, heads, head_dim)
    cache.ring = _read_entries(fp, heads, head_dim)
    cache.tracker = IrreversibleTopK.from_items(
        capacity,
        list(zip(cache.selected.positions.tolist(), cache.selected.scores.tolist())),
        pushed=pushed,
    )

    if flags & 4:
        t, tau, sum_f, sum_s, max_evicted, cap, heap_ops, truncations, n_f, n_s = _read_struct(fp, _STREAM)
        s = StreamState(k=KBudget(k), cap=None if cap < 0 else cap)
        heaps = []
        for n in (n_f, n_s):
            values = _read_array(fp, n, "<f8")
            index = _read_array(fp, n, "<i8")
            heaps.append([(float(v), int(i)) for v, i in zip(values, index)])
        # stored in heap order, still valid heaps
        s.heap_f, s.heap_s = heaps
        s.t, s.tau, s.sum_f, s.sum_s, s.max_evicted = t, tau, sum_f, sum_s, max_evicted
        s.heap_ops, s.truncations = heap_ops, truncations
        (n_ev,) = _read_struct(fp, struct.Struct("<Q"))
        s.evicted = set(int(i) for i in _read_array(fp, n_ev, "<i8"))
        cache.stream = s
    else:
        cache.stream = None

    if flags & 2:
        cache.lin_kv = torch.as_tensor(_read_array(fp, heads * head_dim * head_dim, "<f8")
                                       .reshape(heads, head_dim, head_dim), dtype=dtype)
        cache.lin_z = torch.as_tensor(_read_array(fp, heads * head_dim, "<f8").reshape(heads, head_dim), dtype=dtype)

    n_ev, peak = _read_struct(fp, struct.Struct("<QQ"))
    cache.evicted = set(int(i) for i in _read_array(fp, n_ev, "<i8"))
    cache.peak_entries = peak
    return cache


def cache_to_bytes(cache: SparseKvCache) -> bytes:
    buf = io.BytesIO()
    dump_cache(cache, buf)
    return buf.getvalue()


def cache_from_bytes(data: bytes) -> SparseKvCache:
    return load_cache(io.BytesIO(data))
