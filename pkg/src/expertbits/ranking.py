"""Ordering experts from most to least deserving of precision.

The default ordering sorts experts by ascending change in router norm, then
promotes outlier experts whose maximum intra-neuron variance is at least zeta
times that of an expert ranked above them.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

from expertbits.errors import (
    DuplicateExpertError,
    InvalidArgumentError,
    UndefinedStatisticError,
)
from expertbits.metrics import ExpertMetrics

logger = logging.getLogger(__name__)

DEFAULT_ZETA = 3.0


@dataclass
class RankedOrder:
    layer_id: int
    # Expert ids, position 0 gets the most precision.
    order: list[int]
    zeta: float
    promotions_applied: int = 0
    # Experts placed ahead of their turn in the incoming order.
    promoted: set[int] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.order)


RankingFunc = Callable[[list[ExpertMetrics], float, int], RankedOrder]

RANKINGS: dict[str, RankingFunc] = {}


def ranking(name: str):
    """Decorator to register a ranking strategy."""

    def decorator(func: RankingFunc) -> RankingFunc:
        RANKINGS[name] = func
        return func

    return decorator


def _check_unique(metrics: list[ExpertMetrics]) -> None:
    seen = set()
    for m in metrics:
        if m.expert_id in seen:
            raise DuplicateExpertError(f"expert {m.expert_id} appears more than once")
        seen.add(m.expert_id)


def rank_by_lambda(metrics: list[ExpertMetrics]) -> list[int]:
    """Expert ids by ascending norm change, ties by ascending id."""
    _check_unique(metrics)
    return [m.expert_id for m in sorted(metrics, key=lambda m: (m.norm_change, m.expert_id))]


def dominates(maxvar_r: float, maxvar_e: float, zeta: float) -> bool:
    """Should an expert with `maxvar_r` be ranked above one with `maxvar_e`?"""
    return maxvar_r >= zeta * maxvar_e and maxvar_r > maxvar_e


def maxvar_promote(
    order: Iterable[int],
    maxvar: dict[int, float],
    zeta: float = DEFAULT_ZETA,
    layer_id: int = 0,
) -> RankedOrder:
    """Move outlier-variance experts above the experts they dominate.

    The incoming order is processed front to back.  Before an expert is placed,
    every unplaced expert that dominates it is placed first (depth first, in
    incoming order).  The result has no expert dominating one placed before it.
    """
    if not zeta > 1:
        raise InvalidArgumentError(f"zeta must be greater than 1, not {zeta}")
    order = list(order)
    if any(maxvar[e] < 0 for e in order):
        raise InvalidArgumentError("MaxVar values must be non-negative")

    placed: list[int] = []
    is_placed: set[int] = set()
    promoted: set[int] = set()

    def place(start: int) -> None:
        # Frames of (expert, index of the next candidate in `order`).
        stack = [(start, 0)]
        while stack:
            e, i = stack.pop()
            while i < len(order):
                r = order[i]
                i += 1
                if r not in is_placed and r != e and dominates(maxvar[r], maxvar[e], zeta):
                    promoted.add(r)
                    stack.append((e, i))
                    stack.append((r, 0))
                    break
            else:
                if e not in is_placed:
                    is_placed.add(e)
                    placed.append(e)

    for e in order:
        if e not in is_placed:
            place(e)

    if promoted:
        logger.debug("layer %d: promoted experts %s", layer_id, sorted(promoted))
    return RankedOrder(
        layer_id=layer_id,
        order=placed,
        zeta=zeta,
        promotions_applied=len(promoted),
        promoted=promoted,
    )


def check_fixpoint(ranked: RankedOrder, maxvar: dict[int, float]) -> bool:
    """Is no expert dominated by one ranked below it?"""
    order = ranked.order
    return not any(
        dominates(maxvar[order[j]], maxvar[order[i]], ranked.zeta)
        for i in range(len(order))
        for j in range(i + 1, len(order))
    )


@ranking("lambda-maxvar")
def rank_lambda_maxvar(metrics: list[ExpertMetrics], zeta: float, layer_id: int) -> RankedOrder:
    order = rank_by_lambda(metrics)
    maxvar = {m.expert_id: m.maxvar for m in metrics}
    return maxvar_promote(order, maxvar, zeta, layer_id)


@ranking("lambda")
def rank_lambda_only(metrics: list[ExpertMetrics], zeta: float, layer_id: int) -> RankedOrder:
    return RankedOrder(layer_id=layer_id, order=rank_by_lambda(metrics), zeta=zeta)


def _rank_descending(metrics: list[ExpertMetrics], key: str) -> list[int]:
    _check_unique(metrics)
    missing = [m.expert_id for m in metrics if getattr(m, key) is None]
    if missing:
        raise UndefinedStatisticError(f"{key} is unknown for experts {missing}")
    return [m.expert_id for m in sorted(metrics, key=lambda m: (-getattr(m, key), m.expert_id))]


@ranking("maxvar")
def rank_maxvar_only(metrics: list[ExpertMetrics], zeta: float, layer_id: int) -> RankedOrder:
    return RankedOrder(layer_id=layer_id, order=_rank_descending(metrics, "maxvar"), zeta=zeta)


@ranking("frequency")
def rank_by_frequency(metrics: list[ExpertMetrics], zeta: float, layer_id: int) -> RankedOrder:
    order = _rank_descending(metrics, "activation_frequency")
    return RankedOrder(layer_id=layer_id, order=order, zeta=zeta)


@ranking("weight")
def rank_by_weight(metrics: list[ExpertMetrics], zeta: float, layer_id: int) -> RankedOrder:
    order = _rank_descending(metrics, "activation_weight")
    return RankedOrder(layer_id=layer_id, order=order, zeta=zeta)


def rank_experts(
    metrics: list[ExpertMetrics],
    strategy: str = "lambda-maxvar",
    zeta: float = DEFAULT_ZETA,
    layer_id: int = 0,
) -> RankedOrder:
    if strategy not in RANKINGS:
        raise InvalidArgumentError(
            f"unknown ranking {strategy!r}, choose from {', '.join(RANKINGS)}"
        )
    if not zeta > 1:
        raise InvalidArgumentError(f"zeta must be greater than 1, not {zeta}")
    return RANKINGS[strategy](metrics, zeta, layer_id)
