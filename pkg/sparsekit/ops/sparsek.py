"""
SparseK: Euclidean projection of a score vector onto
C = {p | 0 <= p <= 1, sum(p) = k}, its threshold, its Jacobian-vector product,
and the hard top-k / straight-through variants.

    p* = clamp(z - tau, 0, 1)
    tau = (sum_{u* < j <= w*} z_(j) + u* - k) / (w* - u*)

u* counts saturated entries (p == 1), w* counts nonzero entries.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from sparsekit.exceptions import ArgumentException, NumericException, ShapeException

logger = logging.getLogger("sparsekit")

NEG_INF = float("-inf")


@dataclass(frozen=True)
class KBudget:
    """
    selection budget k of the constraint set; real values are allowed.
    """
    k: float

    def __post_init__(self):
        if not (isinstance(self.k, (int, float)) and math.isfinite(self.k) and self.k > 0):
            raise ArgumentException(f"selection budget k must be a positive real, got {self.k}")

    @property
    def floor(self) -> int:
        return int(math.floor(self.k))

    @property
    def ceil(self) -> int:
        return int(math.ceil(self.k))


def as_budget(k: KBudget | float | int) -> KBudget:
    if isinstance(k, KBudget):
        return k
    return KBudget(float(k))


@dataclass
class SparseKSolution:
    p: np.ndarray
    tau: float
    u_count: int
    w_count: int
    # m < k: nothing can be pruned, p is all ones.
    feasible: bool = True
    # empty support: the budget is met by saturated entries alone.
    degenerate: bool = False
    # original indices of the entries of p; None means 0..m-1.
    positions: np.ndarray | None = None

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero((self.p > 0.0) & (self.p < 1.0))

    @property
    def support_mask(self) -> np.ndarray:
        return (self.p > 0.0) & (self.p < 1.0)

    def to_dict(self) -> dict:
        tau = self.tau if math.isfinite(self.tau) else None
        data = {
            "p": [float(x) for x in self.p],
            "tau": tau,
            "u_count": int(self.u_count),
            "w_count": int(self.w_count),
        }
        if self.positions is not None:
            data["positions"] = [int(x) for x in self.positions]
        return data


@dataclass
class PartialSortStats:
    calls: int = 0
    fallbacks: int = 0

    @property
    def fallback_rate(self) -> float:
        return self.fallbacks / self.calls if self.calls else 0.0


partial_stats = PartialSortStats()


def _as_vector(z, what: str = "z") -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeException(f"{what} must be a vector, got shape {arr.shape}", at=what)
    if arr.size == 0:
        raise ArgumentException(f"{what} must not be empty", at=what)
    if not np.all(np.isfinite(arr)):
        raise NumericException(f"{what} contains NaN or Inf", at=what)
    return arr


def _infeasible(m: int) -> SparseKSolution:
    return SparseKSolution(
        p=np.ones(m, dtype=np.float64),
        tau=NEG_INF,
        u_count=m,
        w_count=m,
        feasible=False,
        degenerate=True,
    )


def degenerate_tau(upper_saturated: float, next_value: float | None) -> float:
    """
    any tau in [z_(u+1), z_(u) - 1] gives the same p; report its midpoint.
    `upper_saturated` is z_(u), `next_value` is z_(u+1) (None past the end).
    """
    hi = upper_saturated - 1.0
    lo = next_value if next_value is not None else hi - 2.0
    return 0.5 * (lo + hi)


def solution_from_tau(z: np.ndarray, tau: float, degenerate: bool = False) -> SparseKSolution:
    p = np.clip(z - tau, 0.0, 1.0)
    u_count = int(np.count_nonzero(p >= 1.0))
    w_count = int(np.count_nonzero(p > 0.0))
    return SparseKSolution(
        p=p,
        tau=float(tau),
        u_count=u_count,
        w_count=w_count,
        degenerate=degenerate or u_count == w_count,
    )


def _scan_ascending(zs: np.ndarray, k: float) -> Tuple[float, bool] | None:
    """
    zs sorted descending, len(zs) >= k.
    (u, w) pairs are visited from (m, m) downward, i.e. with the threshold
    rising; the first pair with z_(w) > tau and z_(u) >= tau + 1 is the answer.
    """
    m = zs.size
    cs = np.concatenate(([0.0], np.cumsum(zs)))
    u = w = m
    while w > 0:
        if w > u:
            tau = (cs[w] - cs[u] + u - k) / (w - u)
            if zs[w - 1] > tau and (u == 0 or zs[u - 1] >= tau + 1.0):
                return float(tau), False
        elif u == k:
            nxt = float(zs[u]) if u < m else None
            return degenerate_tau(float(zs[u - 1]), nxt), True

        next_w = zs[w - 1]
        next_u = zs[u - 1] - 1.0 if u > 0 else math.inf
        if next_u < next_w:
            u -= 1
        else:
            w -= 1
    return None


def _bisect_tau(z: np.ndarray, k: float, iters: int = 200) -> float:
    lo = float(z.min()) - 1.0
    hi = float(z.max())
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.clip(z - mid, 0.0, 1.0).sum() > k:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sparsek(z, k: KBudget | float) -> SparseKSolution:
    budget = as_budget(k)
    z = _as_vector(z)
    m = z.size
    if m < budget.k:
        return _infeasible(m)

    order = np.argsort(-z, kind="stable")
    zs = z[order]
    scanned = _scan_ascending(zs, budget.k)
    if scanned is None:
        # only reachable through rounding at a breakpoint.
        logger.warning("sparsek scan found no (u, w) pair, falling back to bisection; m=%d k=%s", m, budget.k)
        return solution_from_tau(z, _bisect_tau(z, budget.k))
    tau, degenerate = scanned
    return solution_from_tau(z, tau, degenerate)


def _scan_descending(zs: np.ndarray, k: float, next_value: float, m: int) -> Tuple[float, bool] | None:
    """
    zs: the c largest values sorted descending; next_value = z_(c+1).
    Visits (u, w) with the threshold falling and checks the full interval
    conditions; returns None once a pair would need w > c.
    """
    c = zs.size

    def val(j: int) -> float:
        # 1-based order statistic
        return float(zs[j - 1]) if j <= c else next_value

    cs = np.concatenate(([0.0], np.cumsum(zs)))
    u = w = 0
    while True:
        w_break = val(w + 1) if w < m else -math.inf
        u_break = val(u + 1) - 1.0
        if w_break >= u_break:
            if w >= c:
                return None
            w += 1
        else:
            u += 1

        if w > u:
            tau = (cs[w] - cs[u] + u - k) / (w - u)
            if (u == 0 or val(u) >= tau + 1.0) and val(u + 1) < tau + 1.0 \
                    and val(w) > tau and (w == m or val(w + 1) <= tau):
                return float(tau), False
        elif u == k:
            nxt = val(u + 1) if u < m else None
            hi = val(u) - 1.0
            if nxt is None or nxt <= hi:
                return degenerate_tau(val(u), nxt), True


def sparsek_partial(
        z,
        k: KBudget | float,
        sort_cap: int | None = None,
        stats: PartialSortStats | None = None,
) -> SparseKSolution:
    """
    SparseK over a partial selection of the `sort_cap` largest scores,
    O(m log sort_cap). Falls back to the full sort when the support reaches past the cap.
    """
    budget = as_budget(k)
    stats = stats if stats is not None else partial_stats
    cap = sort_cap if sort_cap is not None else 4 * budget.ceil
    if cap < budget.ceil:
        raise ArgumentException(f"sort_cap {cap} must be >= ceil(k) = {budget.ceil}")
    z = _as_vector(z)
    m = z.size
    stats.calls += 1
    if m < budget.k:
        return _infeasible(m)
    if cap >= m:
        return sparsek(z, budget)

    idx = np.argpartition(-z, cap - 1)[:cap]
    top = z[idx]
    order = np.lexsort((idx, -top))
    zs = top[order]
    rest = np.ones(m, dtype=bool)
    rest[idx] = False
    next_value = float(z[rest].max())

    scanned = _scan_descending(zs, budget.k, next_value, m)
    if scanned is None:
        stats.fallbacks += 1
        logger.info("sparsek_partial: support exceeds sort_cap=%d (m=%d, k=%s), exact fallback", cap, m, budget.k)
        return sparsek(z, budget)
    tau, degenerate = scanned
    return solution_from_tau(z, tau, degenerate)


def sparsek_jvp(sol: SparseKSolution, v) -> np.ndarray:
    """
    J(z) v = s * (v - mean_S(v)), s the indicator of the fractional set.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != sol.p.shape:
        raise ShapeException(f"jvp vector shape {v.shape} != solution shape {sol.p.shape}")
    s = sol.support_mask
    out = np.zeros_like(v)
    if not s.any():
        return out
    v_hat = v[s].mean()
    out[s] = v[s] - v_hat
    return out


def topk_hard(z, k: int) -> np.ndarray:
    """
    indicator of the k largest entries; ties keep the lower index.
    """
    if k < 1:
        raise ArgumentException(f"topk_hard needs k >= 1, got {k}")
    z = _as_vector(z)
    m = z.size
    out = np.zeros(m, dtype=np.float64)
    if m <= k:
        out[:] = 1.0
        return out
    order = np.argsort(-z, kind="stable")
    out[order[:k]] = 1.0
    return out


def sparsek_st(z, k: KBudget | float) -> Tuple[np.ndarray, SparseKSolution]:
    """
    straight-through: hard top-floor(k) forward, SparseK solution carries the backward.
    """
    budget = as_budget(k)
    carrier = sparsek(z, budget)
    if budget.floor < 1:
        return np.zeros_like(carrier.p), carrier
    return topk_hard(z, budget.floor), carrier


def kkt_certificate(z, sol: SparseKSolution, k: KBudget | float) -> float:
    """
    Largest violation of primal feasibility, dual sign and stationarity
    p - z - mu + nu + tau = 0 with mu = tau - z on zeros, nu = z - 1 - tau on ones.
    """
    budget = as_budget(k)
    z = _as_vector(z)
    p = sol.p
    tau = sol.tau
    if not sol.feasible:
        return 0.0
    zero = p <= 0.0
    full = p >= 1.0
    mu = np.where(zero, tau - z, 0.0)
    nu = np.where(full, z - 1.0 - tau, 0.0)
    stationarity = p - z - mu + nu + tau
    worst = [
        abs(float(p.sum()) - budget.k),
        float(np.max(-p, initial=0.0)),
        float(np.max(p - 1.0, initial=0.0)),
        float(np.max(-mu, initial=0.0)),
        float(np.max(-nu, initial=0.0)),
        float(np.max(np.abs(stationarity), initial=0.0)),
    ]
    return max(worst)


# ---- torch bridge ---- #

class SparseKFunction(torch.autograd.Function):
    """
    row-wise SparseK over the last dim; backward is the JVP (J is symmetric).
    """

    @staticmethod
    def forward(ctx, z: torch.Tensor, k: float):
        rows = z.detach().cpu().numpy().reshape(-1, z.shape[-1])
        ps = np.empty_like(rows, dtype=np.float64)
        supports = np.zeros_like(rows, dtype=np.float64)
        for i, row in enumerate(rows):
            sol = sparsek(row, k)
            ps[i] = sol.p
            supports[i] = sol.support_mask
        p = torch.as_tensor(ps.reshape(z.shape), dtype=z.dtype)
        s = torch.as_tensor(supports.reshape(z.shape), dtype=z.dtype)
        ctx.save_for_backward(s)
        return p

    @staticmethod
    def backward(ctx, grad: torch.Tensor):
        s, = ctx.saved_tensors
        count = s.sum(dim=-1, keepdim=True).clamp(min=1.0)
        mean = (grad * s).sum(dim=-1, keepdim=True) / count
        return s * (grad - mean), None


def sparsek_tensor(z: torch.Tensor, k: float) -> torch.Tensor:
    return SparseKFunction.apply(z, float(as_budget(k).k))


def sparsek_st_tensor(z: torch.Tensor, k: float) -> torch.Tensor:
    """
    soft - stop_grad(soft) + hard
    """
    budget = as_budget(k)
    soft = sparsek_tensor(z, budget.k)
    rows = z.detach().cpu().numpy().reshape(-1, z.shape[-1])
    if budget.floor >= 1:
        hard_rows = np.stack([topk_hard(row, budget.floor) for row in rows])
    else:
        hard_rows = np.zeros_like(rows)
    hard = torch.as_tensor(hard_rows.reshape(z.shape), dtype=z.dtype)
    return soft - soft.detach() + hard


__all__ = [
    "KBudget", "as_budget", "SparseKSolution", "PartialSortStats", "partial_stats",
    "sparsek", "sparsek_partial", "sparsek_jvp", "topk_hard", "sparsek_st",
    "kkt_certificate", "solution_from_tau", "degenerate_tau",
    "SparseKFunction", "sparsek_tensor", "sparsek_st_tensor",
]
