"""Per-expert statistics used to rank experts for quantization."""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import stats

from expertbits.errors import (
    InvalidArgumentError,
    ShapeMismatchError,
    UndefinedStatisticError,
)
from expertbits.moe import (
    LESS_PREVALENT,
    MoEModel,
    Sequence,
    Token,
    TokenSet,
    route,
    stack,
)
from expertbits.utils import as_finite_array

logger = logging.getLogger(__name__)

NeuronAxis = Literal["row", "column"]

# An expert counts as aligned to a token at initialization when its empirical
# proficiency on the token is at least this.
ALIGNMENT_THRESHOLD = 0.1

# Gating values are compared to 1/l with this much slack.
GATING_ATOL = 1e-12

# Sequences are routed in chunks of this many to bound memory.
CHUNK = 250


@dataclass
class ExpertTensorSet:
    """One expert's routers and first-layer weights."""

    expert_id: int
    router_final: np.ndarray
    w1: np.ndarray
    router_init: np.ndarray | None = None
    neuron_axis: NeuronAxis = "row"
    activation_frequency: float | None = None
    activation_weight: float | None = None

    @property
    def d(self) -> int:
        return self.w1.shape[1] if self.neuron_axis == "row" else self.w1.shape[0]


@dataclass
class ExpertMetrics:
    expert_id: int
    # The change in router norm, or the final norm when it's a surrogate.
    norm_change: float
    norm_is_surrogate: bool
    maxvar: float
    activation_frequency: float | None = None
    activation_weight: float | None = None

    def to_json(self) -> dict:
        return {
            "expert_id": self.expert_id,
            "lambda": self.norm_change,
            "lambda_is_surrogate": self.norm_is_surrogate,
            "maxvar": self.maxvar,
            "activation_frequency": self.activation_frequency,
            "activation_weight": self.activation_weight,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExpertMetrics":
        return cls(
            expert_id=data["expert_id"],
            norm_change=data["lambda"],
            norm_is_surrogate=data["lambda_is_surrogate"],
            maxvar=data["maxvar"],
            activation_frequency=data.get("activation_frequency"),
            activation_weight=data.get("activation_weight"),
        )


@dataclass
class ActivationDiagnostics:
    sigma_by_token: dict[str, float]
    proficiency_by_token: dict[str, float]


@dataclass
class InitDiagnostics:
    C1: float
    C2: float
    Cp: float
    gamma_by_token: dict[str, float]

    def to_json(self) -> dict:
        return {
            "C1": self.C1,
            "C2": self.C2,
            "Cp": self.Cp,
            "gamma_by_token": dict(self.gamma_by_token),
        }


def router_norm_change(w0, wT) -> float:
    """How much the router's l2 norm grew during training."""
    w0 = as_finite_array(w0, "initial router")
    wT = as_finite_array(wT, "final router")
    if w0.shape != wT.shape:
        raise ShapeMismatchError(f"router shapes differ: {w0.shape} and {wT.shape}")
    return float(np.linalg.norm(wT) - np.linalg.norm(w0))


def router_norm_surrogate(wT) -> float:
    """The final router norm, standing in for the change when w0 is unknown."""
    return float(np.linalg.norm(as_finite_array(wT, "final router")))


def max_intra_neuron_variance(W1, neuron_axis: NeuronAxis = "row") -> float:
    """The largest population variance of any one neuron's weights."""
    W1 = as_finite_array(W1, "first-layer weights")
    if W1.ndim != 2 or W1.size == 0:
        raise InvalidArgumentError(f"expected a non-empty matrix, got shape {W1.shape}")
    if neuron_axis not in ("row", "column"):
        raise InvalidArgumentError(f"neuron axis must be row or column, not {neuron_axis!r}")
    along = 1 if neuron_axis == "row" else 0
    return float(np.max(np.var(W1, axis=along)))


def expert_metrics(tensors: ExpertTensorSet, surrogate: bool = False) -> ExpertMetrics:
    """Compute the ranking statistics of one expert.

    The surrogate is used when asked for, or when there is no initial router.
    """
    use_surrogate = surrogate or tensors.router_init is None
    if use_surrogate:
        norm_change = router_norm_surrogate(tensors.router_final)
    else:
        norm_change = router_norm_change(tensors.router_init, tensors.router_final)
    return ExpertMetrics(
        expert_id=tensors.expert_id,
        norm_change=norm_change,
        norm_is_surrogate=use_surrogate,
        maxvar=max_intra_neuron_variance(tensors.w1, tensors.neuron_axis),
        activation_frequency=tensors.activation_frequency,
        activation_weight=tensors.activation_weight,
    )


def _chunks(sequences: list[Sequence]):
    for start in range(0, len(sequences), CHUNK):
        yield sequences[start : start + CHUNK]


def routing_statistics(model: MoEModel, sequences: list[Sequence]) -> list[tuple[float, float]]:
    """Average tokens routed, and average gating mass, per expert per sequence."""
    if not sequences:
        raise UndefinedStatisticError("routing statistics need at least one sequence")
    counts = np.zeros(model.k)
    weights = np.zeros(model.k)
    for chunk in _chunks(sequences):
        X, _ = stack(chunk)
        routing = route(model, X)
        batch, _, l = routing.selected.shape
        counts += batch * l
        weights += routing.gating.sum(axis=(0, 2))
    total = len(sequences)
    return [(float(c / total), float(w / total)) for c, w in zip(counts, weights)]


def expert_activation(W1, v) -> float:
    """Summed ReLU response of an expert's neurons (rows of W1) to v."""
    W1 = np.asarray(W1, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if W1.ndim != 2 or W1.shape[1] != v.shape[-1]:
        raise ShapeMismatchError(f"can't apply {W1.shape} neurons to a {v.shape} vector")
    return float(np.maximum(W1 @ v, 0.0).sum())


def proficiency_table(
    model: MoEModel,
    sequences: list[Sequence],
    tokens: dict[str, Token],
) -> dict[str, np.ndarray]:
    """Proficiency of every expert on each of `tokens`.

    The proficiency of expert s on token v is the fraction of sequences
    containing v in which s selects v with a gating value of at least 1/l.
    Tokens that appear in no sequence get NaN.
    """
    hits = {name: np.zeros(model.k) for name in tokens}
    present = dict.fromkeys(tokens, 0)
    threshold = 1.0 / model.l - GATING_ATOL
    for chunk in _chunks(sequences):
        X, _ = stack(chunk)
        routing = route(model, X)
        for b, seq in enumerate(chunk):
            for name, token in tokens.items():
                positions = seq.positions_of(token)
                if positions.size == 0:
                    continue
                present[name] += 1
                chosen = np.isin(routing.selected[b], positions)
                strong = chosen & (routing.gating[b] >= threshold)
                hits[name] += strong.any(axis=-1)
    return {
        name: hits[name] / present[name] if present[name] else np.full(model.k, np.nan)
        for name in tokens
    }


def proficiency(model: MoEModel, sequences: list[Sequence], expert_id: int, v: Token) -> float:
    """How often expert `expert_id` picks token v with gating of at least 1/l."""
    if not 0 <= expert_id < model.k:
        raise InvalidArgumentError(f"no expert {expert_id} in a model of {model.k}")
    table = proficiency_table(model, sequences, {"v": v})
    value = float(table["v"][expert_id])
    if np.isnan(value):
        raise UndefinedStatisticError(f"no sequence contains token {v}")
    return value


def activation_diagnostics(
    model: MoEModel,
    ts: TokenSet,
    sequences: list[Sequence],
    expert_id: int,
) -> ActivationDiagnostics:
    """Activation and proficiency of one expert on the task-relevant tokens."""
    relevant = ts.task_relevant
    table = proficiency_table(model, sequences, relevant)
    return ActivationDiagnostics(
        sigma_by_token={
            name: expert_activation(model.experts[expert_id], ts.vector(token))
            for name, token in relevant.items()
        },
        proficiency_by_token={name: float(table[name][expert_id]) for name in relevant},
    )


def _order_ranks(order_a, order_b) -> tuple[np.ndarray, np.ndarray]:
    order_a = list(order_a)
    order_b = list(order_b)
    if sorted(order_a) != sorted(order_b) or len(set(order_a)) != len(order_a):
        raise InvalidArgumentError("rank correlation needs two orders of the same elements")
    position_b = {e: i for i, e in enumerate(order_b)}
    ranks_a = np.arange(len(order_a), dtype=np.float64)
    ranks_b = np.array([position_b[e] for e in order_a], dtype=np.float64)
    return ranks_a, ranks_b


def score_correlation(scores_a, scores_b) -> tuple[float, float]:
    """Spearman rho and Kendall tau-b between two score vectors.

    Tied scores get average ranks.  Fewer than two elements, or a constant
    vector, count as perfectly correlated.
    """
    a = stats.rankdata(scores_a, method="average")
    b = stats.rankdata(scores_b, method="average")
    if len(a) < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return 1.0, 1.0
    rho = stats.spearmanr(a, b).statistic
    tau = stats.kendalltau(a, b, variant="b").statistic
    return float(rho), float(tau)


def rank_correlation(order_a, order_b) -> tuple[float, float]:
    """Spearman rho and Kendall tau between two orderings of the same experts."""
    ranks_a, ranks_b = _order_ranks(order_a, order_b)
    return score_correlation(ranks_a, ranks_b)


def init_diagnostics(
    model: MoEModel,
    ts: TokenSet,
    sample: list[Sequence],
    threshold: float = ALIGNMENT_THRESHOLD,
) -> InitDiagnostics:
    """Constants describing an untrained model.

    C1 is the largest router norm, C2 the largest neuron norm, Cp the smallest
    router margin <w_s, q - q'> over distinct tokens q, q' (the task-irrelevant
    and task-relevant columns, plus -o1 and -o2).  gamma_v is the fraction of
    the matching sign group whose proficiency on v at initialization is at
    least `threshold`.
    """
    if not sample:
        raise UndefinedStatisticError("init diagnostics need a sample of sequences")
    C1 = float(np.max(np.linalg.norm(model.routers, axis=1)))
    C2 = float(np.max(np.linalg.norm(model.experts, axis=2)))

    # Routing scores of every expert on P and on -o1, -o2.
    columns = np.hstack([ts.P, -ts.P[:, [ts.o1_index, ts.o2_index]]])
    scores = model.routers @ columns
    Cp = float(np.min(scores.min(axis=1) - scores.max(axis=1)))

    table = proficiency_table(model, sample, ts.task_relevant)
    gamma = {}
    for name, values in table.items():
        label = 1 if name.endswith("o1") else -1
        group = model.sign_group(label)
        if not group:
            gamma[name] = 0.0
            continue
        aligned = [s for s in group if not np.isnan(values[s]) and values[s] >= threshold]
        gamma[name] = len(aligned) / len(group)
    logger.debug("init diagnostics: C1=%g C2=%g Cp=%g gamma=%s", C1, C2, Cp, gamma)
    return InitDiagnostics(C1=C1, C2=C2, Cp=Cp, gamma_by_token=gamma)


def less_prevalent_gamma(diagnostics: InitDiagnostics, label: int) -> float:
    """gamma for the less prevalent token of class `label`."""
    return diagnostics.gamma_by_token[LESS_PREVALENT[label]]

