import numpy as np
import pytest

from expertbits.errors import (
    DuplicateExpertError,
    InvalidArgumentError,
    UndefinedStatisticError,
)
from expertbits.metrics import ExpertMetrics
from expertbits.ranking import (
    RANKINGS,
    check_fixpoint,
    maxvar_promote,
    rank_by_lambda,
    rank_experts,
)

from helpers import data_cases


def metrics_for(lambdas, maxvars, **extra) -> list[ExpertMetrics]:
    return [
        ExpertMetrics(expert_id=i, norm_change=lam, norm_is_surrogate=False, maxvar=mv, **extra)
        for i, (lam, mv) in enumerate(zip(lambdas, maxvars))
    ]


def test_rank_by_lambda():
    metrics = metrics_for([0.5, -0.2, 0.5, 0.1], [1, 1, 1, 1])
    assert rank_by_lambda(metrics) == [1, 3, 0, 2]


def test_rank_by_lambda_duplicates():
    metrics = metrics_for([0.1, 0.2], [1, 1])
    metrics[1].expert_id = 0
    with pytest.raises(DuplicateExpertError):
        rank_by_lambda(metrics)


@pytest.mark.parametrize("case", data_cases("ranking", "promotion"))
def test_promotion(case):
    maxvar = dict(enumerate(case["maxvar"]))
    ranked = maxvar_promote(range(len(maxvar)), maxvar, case["zeta"])
    assert ranked.order == case["order"]
    assert ranked.promotions_applied == case["promotions"]
    assert check_fixpoint(ranked, maxvar)


def test_promotion_through_rank_experts():
    metrics = metrics_for([0.1, 0.2, 0.3], [1, 10, 100])
    ranked = rank_experts(metrics, zeta=3.0, layer_id=7)
    assert ranked.layer_id == 7
    assert ranked.order == [2, 1, 0]
    assert ranked.promoted == {1, 2}


def test_promotion_bad_input():
    with pytest.raises(InvalidArgumentError):
        maxvar_promote([0, 1], {0: 1.0, 1: 2.0}, zeta=1.0)
    with pytest.raises(InvalidArgumentError):
        maxvar_promote([0, 1], {0: -1.0, 1: 2.0})


@pytest.mark.parametrize("zeta", [1.5, 3.0, 10.0])
def test_fixpoint_property(zeta):
    rng = np.random.default_rng(int(zeta * 10))
    for _ in range(300):
        k = int(rng.integers(1, 20))
        maxvar = dict(enumerate(rng.lognormal(0, 2, size=k)))
        incoming = list(rng.permutation(k))
        ranked = maxvar_promote(incoming, maxvar, zeta)
        order = ranked.order
        assert sorted(order) == list(range(k))
        for i in range(k):
            for j in range(i + 1, k):
                assert maxvar[order[j]] < zeta * maxvar[order[i]]
        again = maxvar_promote(order, maxvar, zeta)
        assert again.order == order
        assert again.promotions_applied == 0


def test_promotion_ignores_scale():
    rng = np.random.default_rng(8)
    for _ in range(100):
        k = int(rng.integers(2, 16))
        maxvar = dict(enumerate(rng.lognormal(0, 2, size=k)))
        expected = maxvar_promote(range(k), maxvar, 3.0)
        # Powers of two scale exactly.
        for c in [2.0**-10, 8.0, 2.0**20]:
            scaled = {e: c * v for e, v in maxvar.items()}
            ranked = maxvar_promote(range(k), scaled, 3.0)
            assert ranked.order == expected.order
            assert ranked.promoted == expected.promoted


def test_promotion_with_a_large_zeta():
    rng = np.random.default_rng(9)
    maxvar = dict(enumerate(rng.uniform(1, 10, size=12)))
    incoming = [int(e) for e in rng.permutation(12)]
    ranked = maxvar_promote(incoming, maxvar, zeta=11.0)
    assert ranked.order == incoming
    assert ranked.promotions_applied == 0
    assert ranked.promoted == set()


def test_promotion_of_a_long_chain():
    # Every expert dominates all the ones ranked before it.
    k = 1500
    maxvar = {e: 1.02**e for e in range(k)}
    ranked = maxvar_promote(range(k), maxvar, zeta=1.01)
    assert ranked.order == list(reversed(range(k)))
    assert ranked.promotions_applied == k - 1
    assert check_fixpoint(ranked, maxvar)


def test_registry():
    assert set(RANKINGS) == {"lambda-maxvar", "lambda", "maxvar", "frequency", "weight"}
    metrics = metrics_for([0.1, 0.2, 0.3], [1, 10, 100])
    assert rank_experts(metrics, "lambda").order == [0, 1, 2]
    assert rank_experts(metrics, "maxvar").order == [2, 1, 0]


def test_activation_rankings():
    metrics = metrics_for([0.1, 0.2, 0.3], [1, 1, 1])
    for m, freq, weight in zip(metrics, [3.0, 5.0, 5.0], [0.2, 0.9, 0.5]):
        m.activation_frequency = freq
        m.activation_weight = weight
    assert rank_experts(metrics, "frequency").order == [1, 2, 0]
    assert rank_experts(metrics, "weight").order == [1, 2, 0]
    metrics[0].activation_weight = None
    with pytest.raises(UndefinedStatisticError):
        rank_experts(metrics, "weight")


def test_rank_experts_bad_arguments():
    metrics = metrics_for([0.1], [1])
    with pytest.raises(InvalidArgumentError, match="unknown ranking"):
        rank_experts(metrics, "random")
    with pytest.raises(InvalidArgumentError):
        rank_experts(metrics, zeta=0.5)
