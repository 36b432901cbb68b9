import itertools
import math

import numpy as np
import pytest
import torch

from sparsekit.exceptions import ArgumentException, NumericException, ShapeException
from sparsekit.numerics import finite_diff_jvp, make_rng, relative_error
from sparsekit.ops.sparsek import (
    KBudget, PartialSortStats, SparseKSolution, kkt_certificate, sparsek, sparsek_jvp, sparsek_partial,
    sparsek_st, sparsek_st_tensor, sparsek_tensor, topk_hard,
)


def enumerate_oracle(z: np.ndarray, k: float) -> float:
    """
    brute force over every (u, w) pair of the sorted scores, returns tau.
    """
    zs = np.sort(z)[::-1]
    m = zs.size
    for u in range(0, m + 1):
        for w in range(u + 1, m + 1):
            tau = (zs[u:w].sum() + u - k) / (w - u)
            upper_ok = u == 0 or zs[u - 1] >= tau + 1
            inner_ok = zs[u] < tau + 1 and zs[w - 1] > tau
            lower_ok = w == m or zs[w] <= tau
            if upper_ok and inner_ok and lower_ok:
                return tau
    return None


def bisect_oracle(z: np.ndarray, k: float, iters: int = 200) -> np.ndarray:
    lo, hi = z.min() - 1.0, z.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.clip(z - mid, 0, 1).sum() > k:
            lo = mid
        else:
            hi = mid
    return np.clip(z - 0.5 * (lo + hi), 0, 1)


def sparsemax(z: np.ndarray) -> np.ndarray:
    zs = np.sort(z)[::-1]
    cs = np.cumsum(zs)
    ks = np.arange(1, z.size + 1)
    support = zs - (cs - 1) / ks > 0
    r = ks[support][-1]
    tau = (cs[r - 1] - 1) / r
    return np.maximum(z - tau, 0)


def test_hand_example():
    sol = sparsek([0.9, 0.5, 0.1], 2)
    assert np.allclose(sol.p, [1.0, 0.7, 0.3], atol=1e-12)
    assert abs(sol.tau + 0.2) < 1e-12
    assert sol.u_count == 1
    assert sol.w_count == 3
    assert abs(enumerate_oracle(np.array([0.9, 0.5, 0.1]), 2) + 0.2) < 1e-12


def test_constant_scores_split_budget():
    for c in (-3.0, 0.0, 1.7):
        sol = sparsek([c, c, c], 2)
        assert np.allclose(sol.p, [2 / 3] * 3, atol=1e-12)
        assert abs(sol.tau - (c - 2 / 3)) < 1e-12


def test_k_equals_m_saturates():
    rng = make_rng(0)
    for m in (1, 3, 9):
        sol = sparsek(rng.standard_normal(m), m)
        assert np.array_equal(sol.p, np.ones(m))
        assert sol.feasible


def test_fewer_scores_than_budget():
    sol = sparsek([0.3, -0.2], 3)
    assert not sol.feasible
    assert np.array_equal(sol.p, np.ones(2))
    assert sol.to_dict()["tau"] is None


def test_invalid_inputs():
    for bad in (0, -1, float("nan"), float("inf")):
        with pytest.raises(ArgumentException):
            sparsek([0.1, 0.2], bad)
    with pytest.raises(NumericException):
        sparsek([0.1, float("nan")], 1)
    with pytest.raises(ShapeException):
        sparsek([[0.1, 0.2]], 1)
    assert KBudget(2.5).floor == 2
    assert KBudget(2.5).ceil == 3


def test_k1_recovers_sparsemax():
    rng = make_rng(7)
    checked = 0
    for _ in range(200):
        z = rng.standard_normal(int(rng.integers(2, 12))) * 0.3
        expected = sparsemax(z)
        if expected.max() >= 1.0:
            continue
        checked += 1
        assert np.allclose(sparsek(z, 1).p, expected, atol=1e-12)
    assert checked > 50


def test_matches_enumeration_and_bisection():
    rng = make_rng(11)
    for _ in range(300):
        m = int(rng.integers(1, 20))
        z = rng.standard_normal(m) * float(rng.uniform(0.1, 3.0))
        k = float(rng.uniform(0.2, m))
        sol = sparsek(z, k)
        assert abs(sol.p.sum() - k) < 1e-9
        assert np.allclose(sol.p, bisect_oracle(z, k), atol=1e-9)
        tau = enumerate_oracle(z, k)
        if tau is not None and not sol.degenerate:
            assert abs(sol.tau - tau) < 1e-9


def random_feasible(rng, m: int, k: float, count: int) -> np.ndarray:
    """
    `count` points of {0 <= q <= 1, sum q = k}: uniform boxes rescaled toward 0 or toward 1.
    """
    u = rng.uniform(size=(count, m))
    total = u.sum(axis=1, keepdims=True)
    down = u * (k / total)
    up = 1.0 - (1.0 - u) * ((m - k) / (m - total))
    return np.where(total >= k, down, up)


def test_projection_optimality_and_kkt():
    rng = make_rng(5)
    for _ in range(1000):
        m = int(rng.integers(2, 65))
        z = rng.standard_normal(m) * 1.5
        k = float(rng.uniform(0.5, m))
        sol = sparsek(z, k)
        assert abs(sol.p.sum() - k) < 1e-9
        assert kkt_certificate(z, sol, k) < 1e-9
        best = float(((sol.p - z) ** 2).sum())
        far = random_feasible(rng, m, k, 5000)
        # short segments toward the solution stay feasible and cover its neighbourhood
        near = sol.p + rng.uniform(0.0, 0.05, size=(5000, 1)) * (random_feasible(rng, m, k, 5000) - sol.p)
        points = np.concatenate([far, near])
        assert np.allclose(points.sum(axis=1), k)
        margin = ((points - z) ** 2).sum(axis=1) - best
        assert margin.min() >= -1e-9


def test_idempotent_on_feasible_points():
    rng = make_rng(9)
    for _ in range(50):
        m = int(rng.integers(2, 16))
        k = float(rng.uniform(0.5, m - 0.1))
        z = bisect_oracle(rng.standard_normal(m), k)
        assert np.allclose(sparsek(z, k).p, z, atol=1e-12)


def test_translation_and_permutation():
    rng = make_rng(13)
    z = rng.standard_normal(10)
    base = sparsek(z, 3.5)
    shifted = sparsek(z + 4.25, 3.5)
    assert np.allclose(base.p, shifted.p, atol=1e-12)
    assert abs(shifted.tau - base.tau - 4.25) < 1e-12
    perm = rng.permutation(10)
    assert np.allclose(sparsek(z[perm], 3.5).p, base.p[perm], atol=1e-12)


def test_monotone_in_each_score():
    z = np.array([0.4, 0.1, -0.3, 0.8])
    before = sparsek(z, 2).p
    z[1] += 0.2
    after = sparsek(z, 2).p
    assert after[1] >= before[1]


def test_partial_matches_full():
    sol = sparsek_partial([0.9, 0.5, 0.1], 2, sort_cap=3)
    assert np.allclose(sol.p, sparsek([0.9, 0.5, 0.1], 2).p, atol=1e-12)

    stats = PartialSortStats()
    rng = make_rng(17)
    for _ in range(100):
        z = rng.standard_normal(1000)
        got = sparsek_partial(z, 16, sort_cap=64, stats=stats)
        assert np.allclose(got.p, sparsek(z, 16).p, atol=1e-12)
    assert stats.calls == 100
    assert stats.fallback_rate <= 0.01


def test_partial_fallback_and_cap():
    # a flat tail pushes the support past the cap
    z = np.concatenate(([5.0], np.zeros(50)))
    stats = PartialSortStats()
    got = sparsek_partial(z, 4, sort_cap=8, stats=stats)
    assert np.allclose(got.p, sparsek(z, 4).p, atol=1e-12)
    assert stats.fallbacks == 1

    rng = make_rng(19)
    for _ in range(20):
        z = rng.standard_normal(30)
        assert np.allclose(sparsek_partial(z, 2.5, sort_cap=30).p, sparsek(z, 2.5).p, atol=1e-12)

    with pytest.raises(ArgumentException):
        sparsek_partial(z, 5, sort_cap=4)


def test_jvp_cases():
    sol = SparseKSolution(p=np.array([1.0, 0.5, 0.5]), tau=0.0, u_count=1, w_count=3)
    assert np.allclose(sparsek_jvp(sol, [1.0, 1.0, 1.0]), [0, 0, 0])
    assert np.allclose(sparsek_jvp(sol, [0.0, 4.0, 2.0]), [0, 1, -1])

    saturated = SparseKSolution(p=np.array([1.0, 1.0, 0.0]), tau=0.0, u_count=2, w_count=2)
    assert np.array_equal(sparsek_jvp(saturated, [3.0, 1.0, 2.0]), np.zeros(3))

    with pytest.raises(ShapeException):
        sparsek_jvp(sol, [1.0, 2.0])


def test_jvp_finite_differences():
    rng = make_rng(23)
    checked = 0
    while checked < 200:
        m = int(rng.integers(2, 16))
        z = rng.standard_normal(m)
        k = float(rng.uniform(0.5, m))
        sol = sparsek(z, k)
        gaps = np.minimum(np.abs(z - sol.tau), np.abs(z - sol.tau - 1))
        if sol.degenerate or gaps.min() < 1e-4:
            continue
        v = rng.standard_normal(m)
        numeric = finite_diff_jvp(lambda t: sparsek(t, k).p, z, v)
        assert relative_error(sparsek_jvp(sol, v), numeric) < 1e-4
        checked += 1


def test_topk_hard():
    assert topk_hard([0.9, 0.5, 0.1], 2).tolist() == [1, 1, 0]
    assert topk_hard([5, 5, 1], 1).tolist() == [1, 0, 0]
    assert topk_hard([0.3, 0.2], 3).tolist() == [1, 1]
    with pytest.raises(ArgumentException):
        topk_hard([0.3], 0)


def test_straight_through():
    hard, carrier = sparsek_st([0.9, 0.5, 0.1], 2)
    assert hard.tolist() == [1, 1, 0]
    assert np.allclose(carrier.p, [1.0, 0.7, 0.3])

    hard, carrier = sparsek_st([0.2, 0.1], 2)
    assert hard.tolist() == [1, 1]
    assert np.array_equal(sparsek_jvp(carrier, [1.0, -2.0]), np.zeros(2))


def test_torch_bridge_backward_is_jvp():
    z = torch.tensor([0.9, 0.5, 0.1, 0.45], requires_grad=True)
    g = torch.tensor([0.3, -1.0, 2.0, 0.5])
    p = sparsek_tensor(z, 2)
    p.backward(g)
    sol = sparsek(z.detach().numpy(), 2)
    assert np.allclose(p.detach().numpy(), sol.p)
    assert np.allclose(z.grad.numpy(), sparsek_jvp(sol, g.numpy()), atol=1e-12)

    z2 = z.detach().clone().requires_grad_(True)
    st = sparsek_st_tensor(z2, 2)
    assert st.detach().tolist() == [1.0, 1.0, 0.0, 0.0]
    st.backward(g)
    assert torch.allclose(z2.grad, z.grad)


def test_torch_bridge_gradcheck():
    z = torch.tensor([[0.9, 0.5, 0.1, 0.45], [1.4, -0.3, 0.2, 0.05]], requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: sparsek_tensor(t, 1.5), (z,), eps=1e-6, atol=1e-6)


def test_every_pair_enumerated_small():
    # exhaustive over a grid of small instances
    grid = [-0.5, 0.0, 0.3, 1.2]
    for z in itertools.product(grid, repeat=3):
        z = np.array(z)
        for k in (0.5, 1.0, 2.0, 2.5):
            sol = sparsek(z, k)
            assert abs(sol.p.sum() - k) < 1e-9
            assert np.allclose(sol.p, bisect_oracle(z, k), atol=1e-9)
            assert math.isfinite(sol.tau)
