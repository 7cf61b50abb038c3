"""Turn an expert ranking and a target average bit-width into bit assignments."""

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from expertbits.errors import InfeasibleBudgetError, InvalidArgumentError
from expertbits.ranking import RankedOrder

logger = logging.getLogger(__name__)

# Budgets are compared against b_avg * k rounded to this many decimals, so
# decimal targets like 2.3 bits over 10 experts admit 23 bits.
BUDGET_DECIMALS = 9

GB = 10**9


@dataclass
class BitPlan:
    layer_id: int
    # Distinct bit-widths, ascending.
    levels: list[int]
    counts: dict[int, int]
    assignment: dict[int, int]
    target_avg_bits: float
    achieved_avg_bits: float

    @property
    def k(self) -> int:
        return len(self.assignment)

    def to_json(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "levels": list(self.levels),
            "counts": [{"bits": b, "count": self.counts.get(b, 0)} for b in self.levels],
            "assignment": [
                {"expert_id": e, "bits": b} for e, b in sorted(self.assignment.items())
            ],
            "target_avg_bits": self.target_avg_bits,
            "achieved_avg_bits": self.achieved_avg_bits,
        }

    @classmethod
    def from_json(cls, data: dict) -> "BitPlan":
        return cls(
            layer_id=data["layer_id"],
            levels=list(data["levels"]),
            counts={c["bits"]: c["count"] for c in data["counts"]},
            assignment={a["expert_id"]: a["bits"] for a in data["assignment"]},
            target_avg_bits=data["target_avg_bits"],
            achieved_avg_bits=data["achieved_avg_bits"],
        )


def _budget(b_avg: float, k: int) -> float:
    return round(b_avg * k, BUDGET_DECIMALS)


def _make_plan(order: RankedOrder, tiers: list[tuple[int, int]], b_avg: float) -> BitPlan:
    """Hand out bits down the ranking: `tiers` is [(bits, how_many), ...] best first."""
    assignment = {}
    experts = iter(order.order)
    for bits, count in tiers:
        for _ in range(count):
            assignment[next(experts)] = bits
    k = len(order.order)
    counts = Counter(assignment.values())
    levels = sorted({bits for bits, _ in tiers})
    return BitPlan(
        layer_id=order.layer_id,
        levels=levels,
        counts={b: counts.get(b, 0) for b in levels},
        assignment=assignment,
        target_avg_bits=b_avg,
        achieved_avg_bits=sum(assignment.values()) / k,
    )


def _check_order(order: RankedOrder) -> int:
    k = len(order.order)
    if k == 0:
        raise InvalidArgumentError(f"layer {order.layer_id} has no experts")
    return k


def two_level_assign(order: RankedOrder, b_h: int, b_l: int, b_avg: float) -> BitPlan:
    """Give the top kappa fraction of the ranking b_h bits, the rest b_l.

    kappa = (b_avg - b_l) / (b_h - b_l), and the number of high-precision
    experts is rounded down so the budget is never exceeded.
    """
    if not b_l < b_h:
        raise InvalidArgumentError(f"need b_l < b_h, got b_l={b_l}, b_h={b_h}")
    if not b_l <= b_avg <= b_h:
        raise InvalidArgumentError(f"average bits {b_avg} is outside [{b_l}, {b_h}]")
    k = _check_order(order)
    # n_h is the largest count with n_h * b_h + (k - n_h) * b_l within budget.
    spare = _budget(b_avg, k) - k * b_l
    n_h = min(k, math.floor(round(spare / (b_h - b_l), BUDGET_DECIMALS)))
    plan = _make_plan(order, [(b_h, n_h), (b_l, k - n_h)], b_avg)
    logger.debug(
        "layer %d: %d experts at %d bits, %d at %d", order.layer_id, n_h, b_h, k - n_h, b_l
    )
    return plan


def three_level_regime(b_h: int, b_l: int, b_avg: float) -> str:
    """Which of the three objectives applies to this target: "A", "B" or "C"."""
    upper = b_h - (b_h - b_l) / 3
    lower = b_h - 2 * (b_h - b_l) / 3
    if b_avg > upper:
        return "A"
    if b_avg >= lower:
        return "B"
    return "C"


def three_level_counts(k: int, b_h: int, b_m: int, b_l: int, b_avg: float) -> tuple[int, int, int]:
    """Solve the three-level counting problem by enumerating (n_h, n_l).

    Regime A: most experts at b_h, then fewest at b_l.
    Regime B: most experts at b_h with no more at b_l than at b_m, then fewest
        at b_l.  If nothing satisfies n_l <= n_m, regime C applies instead.
    Regime C: fewest experts at b_l, then most at b_h.
    """
    budget = _budget(b_avg, k)
    feasible = []
    for n_h in range(k + 1):
        for n_l in range(k - n_h + 1):
            n_m = k - n_h - n_l
            if n_h * b_h + n_m * b_m + n_l * b_l <= budget:
                feasible.append((n_h, n_m, n_l))
    if not feasible:
        raise InfeasibleBudgetError(
            f"{b_avg} bits/expert can't hold {k} experts at {b_l} bits or more"
        )

    regime = three_level_regime(b_h, b_l, b_avg)
    if regime == "B":
        balanced = [c for c in feasible if c[2] <= c[1]]
        if balanced:
            return min(balanced, key=lambda c: (-c[0], c[2]))
        logger.warning("No balanced three-level split for %g bits; minimizing low experts", b_avg)
        regime = "C"
    if regime == "A":
        return min(feasible, key=lambda c: (-c[0], c[2]))
    return min(feasible, key=lambda c: (c[2], -c[0]))


def three_level_assign(order: RankedOrder, b_h: int, b_m: int, b_l: int, b_avg: float) -> BitPlan:
    """Split the ranking into b_h, b_m and b_l experts, top to bottom."""
    if not b_l < b_m < b_h:
        raise InvalidArgumentError(f"need b_l < b_m < b_h, got {b_l}, {b_m}, {b_h}")
    if b_avg > b_h:
        raise InvalidArgumentError(f"average bits {b_avg} is above the top level {b_h}")
    k = _check_order(order)
    if b_avg < b_l:
        raise InfeasibleBudgetError(f"{b_avg} bits/expert is below the lowest level {b_l}")
    n_h, n_m, n_l = three_level_counts(k, b_h, b_m, b_l, b_avg)
    logger.debug("layer %d: three-level split %d/%d/%d", order.layer_id, n_h, n_m, n_l)
    return _make_plan(order, [(b_h, n_h), (b_m, n_m), (b_l, n_l)], b_avg)


def assign_bits(order: RankedOrder, levels: Sequence[int], b_avg: float) -> BitPlan:
    """Two- or three-level assignment, depending on how many levels are given."""
    levels = sorted(set(levels), reverse=True)
    if len(levels) == 2:
        return two_level_assign(order, levels[0], levels[1], b_avg)
    if len(levels) == 3:
        return three_level_assign(order, levels[0], levels[1], levels[2], b_avg)
    raise InvalidArgumentError(f"need two or three distinct bit levels, got {levels}")


def plan_memory_estimate(
    plans: BitPlan | Sequence[BitPlan],
    params_per_expert: int,
    non_expert_params: int = 0,
    non_expert_bits: int = 16,
) -> float:
    """Weight storage in GB (10**9 bytes) for a layer plan or a whole model.

    Quantization scales and zero points are not counted.
    """
    if isinstance(plans, BitPlan):
        plans = [plans]
    expert_bits = sum(bits for plan in plans for bits in plan.assignment.values())
    total_bits = expert_bits * params_per_expert + non_expert_params * non_expert_bits
    return total_bits / 8 / GB
