"""
Incremental SparseK over a growing prefix z_1..z_t.

Two min-heaps of (value, index):
    F = {z_i | z_i >= tau + 1}     saturated entries
    S = {z_i | z_i > tau}          nonzero entries, F is a subset of S
Each push inserts the new value relative to the previous tau and resumes the
(u, w) scan from (|F|, |S|) with the threshold rising. Entries popped off S
are evicted for good: tau never decreases, so their mask stays zero.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import List, Set, Tuple

import numpy as np

from sparsekit.exceptions import EmptyStateException, NumericException
from sparsekit.ops.sparsek import KBudget, SparseKSolution, as_budget, degenerate_tau, topk_hard

logger = logging.getLogger("sparsekit")

NEG_INF = float("-inf")

RESUM_EVERY = 1 << 16


@dataclass
class StreamState:
    k: KBudget
    # bound on |S|; None is unbounded.
    cap: int | None = None
    heap_f: List[Tuple[float, int]] = field(default_factory=list)
    heap_s: List[Tuple[float, int]] = field(default_factory=list)
    sum_f: float = 0.0
    sum_s: float = 0.0
    tau: float = NEG_INF
    t: int = 0
    # one index per evicted value, unbounded: t - |S| entries
    evicted: Set[int] = field(default_factory=set)
    max_evicted: float = NEG_INF
    heap_ops: int = 0
    truncations: int = 0

    @property
    def feasible(self) -> bool:
        return self.t >= self.k.k

    @property
    def support_size(self) -> int:
        """
        |S*| of the current solution, the fractional entries.
        """
        if not self.feasible:
            return 0
        return len(self.heap_s) - len(self.heap_f)

    def push(self, z: float) -> float:
        """
        fast path: insert one value, return the new tau.
        """
        z = float(z)
        if not math.isfinite(z):
            raise NumericException(f"stream value must be finite, got {z}", at="stream_push")
        index = self.t
        self.t += 1
        item = (z, index)
        if z > self.tau:
            self._push_s(item)
            if z >= self.tau + 1.0:
                self._push_f(item)
        else:
            self._evict(item)

        self._scan()
        if self.cap is not None:
            self._truncate()
        if self.t % RESUM_EVERY == 0:
            self.resum()
        return self.tau

    def _push_s(self, item):
        heapq.heappush(self.heap_s, item)
        self.sum_s += item[0]
        self.heap_ops += 1

    def _push_f(self, item):
        heapq.heappush(self.heap_f, item)
        self.sum_f += item[0]
        self.heap_ops += 1

    def _pop_f(self):
        item = heapq.heappop(self.heap_f)
        self.sum_f -= item[0]
        self.heap_ops += 1
        return item

    def _pop_s(self):
        item = heapq.heappop(self.heap_s)
        self.sum_s -= item[0]
        self.heap_ops += 1
        self._evict(item)
        return item

    def _evict(self, item):
        self.evicted.add(item[1])
        if item[0] > self.max_evicted:
            self.max_evicted = item[0]

    def _scan(self) -> None:
        k = self.k.k
        while True:
            u = len(self.heap_f)
            w = len(self.heap_s)
            if w < k:
                # fewer candidates than budget: everything stays, mask is all ones.
                self.tau = NEG_INF
                return
            if w > u:
                tau = (self.sum_s - self.sum_f + u - k) / (w - u)
                min_s = self.heap_s[0][0]
                if min_s > tau and (u == 0 or self.heap_f[0][0] >= tau + 1.0):
                    self.tau = max(tau, self.tau)
                    return
            elif u == k:
                nxt = self.max_evicted if self.max_evicted > NEG_INF else None
                self.tau = max(degenerate_tau(self.heap_f[0][0], nxt), self.tau)
                return

            next_w = self.heap_s[0][0]
            next_u = self.heap_f[0][0] - 1.0 if u > 0 else math.inf
            if next_u < next_w:
                self._pop_f()
            else:
                self._pop_s()

    def _truncate(self) -> None:
        # tau is kept; the dropped entry loses its (positive) mass.
        while len(self.heap_s) > self.cap:
            item = self._pop_s()
            self.truncations += 1
            logger.debug("stream heap cap %d dropped a live entry at index %d", self.cap, item[1])

    def resum(self) -> None:
        self.sum_f = math.fsum(v for v, _ in self.heap_f)
        self.sum_s = math.fsum(v for v, _ in self.heap_s)

    def survivors(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        (positions, values) of heap_s sorted by position.
        """
        items = sorted(self.heap_s, key=lambda it: it[1])
        positions = np.asarray([i for _, i in items], dtype=np.int64)
        values = np.asarray([v for v, _ in items], dtype=np.float64)
        return positions, values


def stream_init(k: KBudget | float, cap: int | None = None) -> StreamState:
    return StreamState(k=as_budget(k), cap=cap)


def stream_init_capped(k: KBudget | float) -> StreamState:
    budget = as_budget(k)
    return StreamState(k=budget, cap=4 * budget.ceil)


def stream_solution(state: StreamState) -> SparseKSolution:
    if state.t == 0:
        raise EmptyStateException("stream has no values yet")
    positions, values = state.survivors()
    if not state.feasible:
        return SparseKSolution(
            p=np.ones(values.size),
            tau=NEG_INF,
            u_count=values.size,
            w_count=values.size,
            feasible=False,
            degenerate=True,
            positions=positions,
        )
    p = np.clip(values - state.tau, 0.0, 1.0)
    u_count = int(np.count_nonzero(p >= 1.0))
    w_count = int(np.count_nonzero(p > 0.0))
    return SparseKSolution(
        p=p,
        tau=state.tau,
        u_count=u_count,
        w_count=w_count,
        degenerate=u_count == w_count,
        positions=positions,
    )


def stream_push(state: StreamState, z_t: float) -> SparseKSolution:
    state.push(z_t)
    return stream_solution(state)


def stream_mask(state: StreamState) -> "SelectionMask":
    """
    hard top-floor(k) over the survivors plus the soft weights of the current solution.
    """
    from sparsekit.selection.mask import SelectionMask

    sol = stream_solution(state)
    floor = state.k.floor
    if floor >= 1:
        _, values = state.survivors()
        hard = topk_hard(values, floor)
    else:
        hard = np.zeros_like(sol.p)
    return SelectionMask(
        hard=hard,
        soft=sol.p,
        indices=[int(sol.positions[i]) for i in np.flatnonzero(hard)],
        mode="soft",
        positions=sol.positions,
    )
