import math

import numpy as np
import pytest

from expertbits.allocation import (
    BitPlan,
    assign_bits,
    plan_memory_estimate,
    three_level_assign,
    three_level_counts,
    three_level_regime,
    two_level_assign,
)
from expertbits.errors import InfeasibleBudgetError, InvalidArgumentError
from expertbits.ranking import RankedOrder

from helpers import data_cases


def ranked(k: int, layer_id: int = 0) -> RankedOrder:
    # A ranking that isn't just the ids in order.
    return RankedOrder(layer_id=layer_id, order=list(reversed(range(k))), zeta=3.0)


@pytest.mark.parametrize("case", data_cases("allocation", "two_level"))
def test_two_level(case):
    k = case["k"]
    b_h, b_l = case["levels"]
    plan = two_level_assign(ranked(k), b_h, b_l, case["avg_bits"])
    high = case["high"]
    assert plan.counts == {b_l: k - high, b_h: high}
    order = ranked(k).order
    assert [plan.assignment[e] for e in order] == [b_h] * high + [b_l] * (k - high)
    assert plan.achieved_avg_bits <= case["avg_bits"] + 1e-12


@pytest.mark.parametrize("case", data_cases("allocation", "three_level"))
def test_three_level(case):
    k = case["k"]
    assert three_level_regime(3, 1, case["avg_bits"]) == case["regime"]
    assert list(three_level_counts(k, 3, 2, 1, case["avg_bits"])) == case["counts"]
    plan = three_level_assign(ranked(k), 3, 2, 1, case["avg_bits"])
    n_h, n_m, n_l = case["counts"]
    assert [plan.assignment[e] for e in ranked(k).order] == [3] * n_h + [2] * n_m + [1] * n_l
    assert plan.levels == [1, 2, 3]


def test_regime_boundaries():
    # The boundaries themselves belong to the middle regime.
    assert three_level_regime(3, 1, 3 - 2 / 3) == "B"
    assert three_level_regime(3, 1, 3 - 4 / 3) == "B"
    assert three_level_regime(3, 1, 2.34) == "A"
    assert three_level_regime(3, 1, 1.66) == "C"


def oracle_counts(k: int, b_avg: float) -> tuple[int, int, int]:
    """Exhaustive search of the three-level program for levels 3, 2, 1."""
    budget = b_avg * k + 1e-9
    options = [
        (n_h, k - n_h - n_l, n_l)
        for n_h in range(k + 1)
        for n_l in range(k + 1 - n_h)
        if 3 * n_h + 2 * (k - n_h - n_l) + n_l <= budget
    ]
    if b_avg > 3 - 2 / 3:
        return max(options, key=lambda c: (c[0], -c[2]))
    if b_avg >= 3 - 4 / 3:
        balanced = [c for c in options if c[2] <= c[1]]
        if balanced:
            return max(balanced, key=lambda c: (c[0], -c[2]))
    return max(options, key=lambda c: (-c[2], c[0]))


@pytest.mark.parametrize("k", [4, 8, 16, 64])
def test_three_level_matches_search(k):
    rng = np.random.default_rng(k)
    regimes = [(3 - 2 / 3 + 1e-6, 3.0), (3 - 4 / 3, 3 - 2 / 3), (1.0, 3 - 4 / 3 - 1e-6)]
    for low, high in regimes:
        for b_avg in rng.uniform(low, high, size=50):
            counts = three_level_counts(k, 3, 2, 1, b_avg)
            assert counts == oracle_counts(k, b_avg), b_avg
            assert sum(counts) == k
            assert 3 * counts[0] + 2 * counts[1] + counts[2] <= b_avg * k + 1e-9


@pytest.mark.parametrize("k", [4, 8, 16, 64])
def test_two_level_matches_kappa(k):
    rng = np.random.default_rng(k + 1)
    for b_avg in rng.uniform(2, 4, size=50):
        plan = two_level_assign(ranked(k), 4, 2, b_avg)
        kappa = (b_avg - 2) / 2
        assert plan.counts[4] == math.floor(kappa * k + 1e-9)
        assert plan.achieved_avg_bits <= b_avg + 1e-12
        # One more high-precision expert would break the budget.
        if plan.counts[2]:
            assert (plan.counts[4] + 1) * 4 + (plan.counts[2] - 1) * 2 > b_avg * k


@pytest.mark.parametrize("k", [3, 8, 21])
def test_two_level_more_budget_never_lowers_bits(k):
    budgets = np.linspace(2, 4, 41)
    plans = [two_level_assign(ranked(k), 4, 2, b_avg) for b_avg in budgets]
    for lower, higher in zip(plans, plans[1:]):
        assert all(higher.assignment[e] >= lower.assignment[e] for e in range(k))
    assert all(bits == 2 for bits in plans[0].assignment.values())
    assert all(bits == 4 for bits in plans[-1].assignment.values())


def test_rank_monotonicity():
    plan = three_level_assign(ranked(16), 3, 2, 1, 2.1)
    bits = [plan.assignment[e] for e in ranked(16).order]
    assert bits == sorted(bits, reverse=True)


def test_assign_bits_dispatch():
    plan = assign_bits(ranked(2), [2, 3], 2.5)
    assert plan.assignment == {1: 3, 0: 2}
    plan = assign_bits(ranked(8), [1, 3, 2], 2.0)
    assert plan.counts == {1: 2, 2: 4, 3: 2}
    with pytest.raises(InvalidArgumentError):
        assign_bits(ranked(4), [3], 3)
    with pytest.raises(InvalidArgumentError):
        assign_bits(ranked(4), [4, 3, 2, 1], 3)


def test_bad_budgets():
    with pytest.raises(InvalidArgumentError):
        two_level_assign(ranked(4), 3, 2, 3.5)
    with pytest.raises(InvalidArgumentError):
        two_level_assign(ranked(4), 2, 3, 2.5)
    with pytest.raises(InfeasibleBudgetError) as exc_info:
        three_level_assign(ranked(4), 3, 2, 1, 0.5)
    assert exc_info.value.code == "infeasible-budget"
    with pytest.raises(InvalidArgumentError):
        three_level_assign(ranked(4), 3, 2, 1, 3.5)
    with pytest.raises(InvalidArgumentError):
        two_level_assign(ranked(0), 3, 2, 2.5)


def test_plan_json():
    plan = two_level_assign(ranked(4, layer_id=2), 3, 2, 2.5)
    data = plan.to_json()
    assert data["counts"] == [{"bits": 2, "count": 2}, {"bits": 3, "count": 2}]
    assert data["assignment"][0] == {"expert_id": 0, "bits": 2}
    assert BitPlan.from_json(data) == plan


def test_memory_estimate():
    plan = two_level_assign(ranked(8), 3, 2, 2.5)
    # 20 bits * 10**9 params / 8 bits per byte.
    assert plan_memory_estimate(plan, 10**9) == pytest.approx(2.5)
    assert plan_memory_estimate([plan, plan], 10**9) == pytest.approx(5.0)
    assert plan_memory_estimate(plan, 10**9, non_expert_params=10**9) == pytest.approx(4.5)


def test_memory_estimate_mixtral_shape():
    # 32 layers of 8 experts, three 4096 x 14336 matrices each, everything
    # at 2 bits.
    params_per_expert = 3 * 4096 * 14336
    plans = [two_level_assign(ranked(8, layer), 3, 2, 2.0) for layer in range(32)]
    gb = plan_memory_estimate(
        plans, params_per_expert, non_expert_params=1_600_000_000, non_expert_bits=2
    )
    assert gb == pytest.approx(13.1, rel=0.15)
