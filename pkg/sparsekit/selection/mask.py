from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import List, Literal, Set, Tuple

import numpy as np

from sparsekit.exceptions import ArgumentException
from sparsekit.ops.sparsek import KBudget, as_budget, sparsek, topk_hard

SelectionMode = Literal["hard", "soft", "straight_through"]

SELECTION_MODES = ("hard", "soft", "straight_through")


@dataclass
class SelectionMask:
    """
    hard: m_topk, soft: m_sparsek, both over `positions`.
    indices 是被选中的位置 (hard == 1), 升序, 0-based.
    """
    hard: np.ndarray
    soft: np.ndarray
    indices: List[int]
    mode: SelectionMode = "soft"
    positions: np.ndarray | None = None

    def weights(self) -> np.ndarray:
        """
        forward weights of the selected entries under `mode`.
        """
        if self.mode == "soft":
            return self.soft * self.hard
        return self.hard.copy()


def build_mask(u_prefix, k: KBudget | float, mode: SelectionMode = "soft") -> SelectionMask:
    if mode not in SELECTION_MODES:
        raise ArgumentException(f"unknown selection mode {mode}")
    budget = as_budget(k)
    u = np.asarray(u_prefix, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise ArgumentException("build_mask needs a nonempty score prefix")
    sol = sparsek(u, budget)
    if budget.floor >= 1:
        hard = topk_hard(u, budget.floor)
    else:
        hard = np.zeros_like(u)
    return SelectionMask(
        hard=hard,
        soft=sol.p,
        indices=[int(i) for i in np.flatnonzero(hard)],
        mode=mode,
        positions=np.arange(u.size),
    )


class IrreversibleTopK:
    """
    维护一个不断增长的前缀上 top-k 的位置集合.
    分数一旦给出就不再改变, 所以被挤出去的位置永远不会回来.
    平分时保留更早的位置.
    """

    def __init__(self, k: int):
        if k < 0:
            raise ArgumentException(f"top-k capacity must be >= 0, got {k}")
        self.k = k
        # (score, -position): heap[0] is the first to go.
        self._heap: List[Tuple[float, int]] = []
        self._members: Set[int] = set()
        self.pushed = 0

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, position: int, score: float) -> Tuple[bool, int | None]:
        """
        returns (admitted, dropped position or None).
        a rejected newcomer is reported as dropped itself.
        """
        self.pushed += 1
        item = (float(score), -position)
        if self.k == 0:
            return False, position
        if len(self._heap) < self.k:
            heapq.heappush(self._heap, item)
            self._members.add(position)
            return True, None
        if item > self._heap[0]:
            out = heapq.heapreplace(self._heap, item)
            dropped = -out[1]
            self._members.discard(dropped)
            self._members.add(position)
            return True, dropped
        return False, position

    def members(self) -> List[int]:
        return sorted(self._members)

    def member_set(self) -> Set[int]:
        return self._members

    def __contains__(self, position: int) -> bool:
        return position in self._members

    def items(self) -> List[Tuple[int, float]]:
        return sorted((-neg, s) for s, neg in self._heap)

    @classmethod
    def from_items(cls, k: int, items: List[Tuple[int, float]], pushed: int = 0) -> "IrreversibleTopK":
        tracker = cls(k)
        for position, score in items:
            heapq.heappush(tracker._heap, (float(score), -int(position)))
            tracker._members.add(int(position))
        tracker.pushed = pushed
        return tracker
