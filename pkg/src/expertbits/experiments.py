"""Experiments on trained synthetic models.

* lemma1_report: do the experts that specialize to the rare tokens end up with
  smaller router-norm growth and smaller activations than those that
  specialize to the common tokens?
* bit_gap_experiment: how many fewer bits do the experts outside the top
  group need, compared with the uniform bits needed for zero test error?
* surrogate_study: does the final router norm order the experts the way the
  change in norm does?
* zeta_sweep: how many experts does each zeta move in a ranking?
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from expertbits.errors import ExperimentFailedError, InvalidArgumentError
from expertbits.jsonio import SCHEMA_VERSION
from expertbits.manifest import LayerTensors, ModelTensors, write_manifest
from expertbits.metrics import (
    ExpertMetrics,
    ExpertTensorSet,
    expert_activation,
    init_diagnostics,
    less_prevalent_gamma,
    max_intra_neuron_variance,
    proficiency_table,
    score_correlation,
)
from expertbits.moe import (
    LESS_PREVALENT,
    MORE_PREVALENT,
    RELEVANT_NAMES,
    TOKEN_LABEL,
    MoEModel,
)
from expertbits.planner import LayerMetrics
from expertbits.quantizer import quantize_dequantize
from expertbits.ranking import DEFAULT_ZETA, rank_by_lambda, rank_experts
from expertbits.synthetic import SyntheticConfig, TrainingRun, error_rate, train

logger = logging.getLogger(__name__)


def ratio_bound(alpha: float) -> float:
    """(1 - 2 alpha) / (2 alpha), the smallest activation ratio the theory allows."""
    return (1 - 2 * alpha) / (2 * alpha)


def bit_gap_bound(alpha: float) -> float:
    return math.log2(ratio_bound(alpha))


def bit_reduction_bound(alpha: float, b_u: float) -> float:
    """Bits the low-precision experts can drop, given uniform requirement b_u."""
    if not 0 < alpha < 0.5:
        raise InvalidArgumentError(f"alpha must be in (0, 0.5), not {alpha}")
    return b_u - math.log2(1 + alpha / (1 - alpha) * (2**b_u - 1))


def _finite_or_none(value: float) -> float | None:
    return None if value is None or not math.isfinite(value) else float(value)


def specializations(table: dict[str, np.ndarray], signs) -> list[str | None]:
    """Each expert's token of highest proficiency among its own class's tokens.

    An expert of sign +1 can only specialize to +o1 or -o1, one of sign -1
    only to +o2 or -o2.  Ties go to the less prevalent token.  Experts that
    never pick a relevant token strongly are specialized to nothing.
    """
    rare = set(LESS_PREVALENT.values())
    result = []
    for s, sign in enumerate(signs):
        names = [name for name in RELEVANT_NAMES if TOKEN_LABEL[name] == sign]
        values = {name: float(np.nan_to_num(table[name][s], nan=-1.0)) for name in names}
        best = max(names, key=lambda name: (values[name], name in rare))
        result.append(best if values[best] > 0 else None)
    return result


@dataclass
class LambdaOrdering:
    label: int
    less_prevalent_experts: list[int]
    more_prevalent_experts: list[int]
    pairs: int
    pairs_ordered: int

    @property
    def holds(self) -> bool:
        return self.pairs_ordered == self.pairs

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "less_prevalent_experts": self.less_prevalent_experts,
            "more_prevalent_experts": self.more_prevalent_experts,
            "pairs": self.pairs,
            "pairs_ordered": self.pairs_ordered,
            "holds": self.holds,
        }


@dataclass
class ExpertReport:
    expert_id: int
    sign: int
    specialization: str | None
    norm_change: float
    proficiency_init: dict[str, float]
    proficiency_final: dict[str, float]
    sigma: dict[str, float]
    projection_init: dict[str, float]
    projection_final: dict[str, float]

    @property
    def proficiency_increased(self) -> bool | None:
        if self.specialization is None:
            return None
        before = self.proficiency_init[self.specialization]
        after = self.proficiency_final[self.specialization]
        return bool(after > np.nan_to_num(before, nan=-1.0))

    @property
    def projection_increased(self) -> bool | None:
        if self.specialization is None:
            return None
        name = self.specialization
        return bool(self.projection_final[name] > self.projection_init[name])

    def to_json(self) -> dict:
        def clean(values):
            return {name: _finite_or_none(v) for name, v in values.items()}

        return {
            "expert_id": self.expert_id,
            "sign": self.sign,
            "specialization": self.specialization,
            "lambda": self.norm_change,
            "proficiency_init": clean(self.proficiency_init),
            "proficiency_final": clean(self.proficiency_final),
            "sigma": clean(self.sigma),
            "router_projection_init": clean(self.projection_init),
            "router_projection_final": clean(self.projection_final),
            "proficiency_increased": self.proficiency_increased,
            "projection_increased": self.projection_increased,
        }


@dataclass
class Lemma1Report:
    alpha: float
    experts: list[ExpertReport]
    unlearned_tokens: list[str]
    orderings: list[LambdaOrdering]
    min_activation_ratio: float | None
    final_test_error: float

    @property
    def valid(self) -> bool:
        return not self.unlearned_tokens

    @property
    def ratio_bound(self) -> float:
        return ratio_bound(self.alpha)

    @property
    def lambda_ordering_holds(self) -> bool | None:
        if not self.valid:
            return None
        return all(o.holds for o in self.orderings)

    @property
    def activation_ratio_holds(self) -> bool | None:
        if not self.valid or self.min_activation_ratio is None:
            return None
        return self.min_activation_ratio >= self.ratio_bound

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "alpha": self.alpha,
            "valid": self.valid,
            "unlearned_tokens": self.unlearned_tokens,
            "lambda_ordering": [o.to_json() for o in self.orderings],
            "lambda_ordering_holds": self.lambda_ordering_holds,
            "min_activation_ratio": _finite_or_none(self.min_activation_ratio),
            "ratio_bound": self.ratio_bound,
            "activation_ratio_holds": self.activation_ratio_holds,
            "final_test_error": self.final_test_error,
            "experts": [e.to_json() for e in self.experts],
        }


def _projections(model: MoEModel, run: TrainingRun, s: int) -> dict[str, float]:
    ts = run.token_set
    return {
        name: float(model.routers[s] @ ts.vector(token))
        for name, token in ts.task_relevant.items()
    }


def lemma1_report(run: TrainingRun) -> Lemma1Report:
    """Check the specialization claims on a trained run.

    Comparisons are made only between experts of the same sign group.
    """
    ts = run.token_set
    relevant = ts.task_relevant
    initial, final = run.initial, run.final
    table_init = proficiency_table(initial, run.held_out, relevant)
    table_final = proficiency_table(final, run.held_out, relevant)
    special = specializations(table_final, final.signs)
    norm_change = np.linalg.norm(final.routers, axis=1) - np.linalg.norm(initial.routers, axis=1)

    experts = []
    for s in range(final.k):
        experts.append(
            ExpertReport(
                expert_id=s,
                sign=int(final.signs[s]),
                specialization=special[s],
                norm_change=float(norm_change[s]),
                proficiency_init={name: float(table_init[name][s]) for name in relevant},
                proficiency_final={name: float(table_final[name][s]) for name in relevant},
                sigma={
                    name: expert_activation(final.experts[s], ts.vector(token))
                    for name, token in relevant.items()
                },
                projection_init=_projections(initial, run, s),
                projection_final=_projections(final, run, s),
            )
        )

    unlearned = [
        name
        for name in RELEVANT_NAMES
        if not any(
            e.specialization == name and final.signs[e.expert_id] == TOKEN_LABEL[name]
            for e in experts
        )
    ]
    if unlearned:
        logger.warning("no expert specialized to %s; run is invalid", ", ".join(unlearned))

    orderings = []
    ratios = []
    for label in (+1, -1):
        group = [experts[s] for s in final.sign_group(label)]
        rare = LESS_PREVALENT[label]
        common = MORE_PREVALENT[label]
        less = [e for e in group if e.specialization == rare]
        more = [e for e in group if e.specialization == common]
        pairs = [(a, b) for a in less for b in more]
        orderings.append(
            LambdaOrdering(
                label=label,
                less_prevalent_experts=[e.expert_id for e in less],
                more_prevalent_experts=[e.expert_id for e in more],
                pairs=len(pairs),
                pairs_ordered=sum(a.norm_change < b.norm_change for a, b in pairs),
            )
        )
        for a, b in pairs:
            if a.sigma[rare] > 0:
                ratios.append(b.sigma[common] / a.sigma[rare])

    return Lemma1Report(
        alpha=run.config.alpha,
        experts=experts,
        unlearned_tokens=unlearned,
        orderings=orderings,
        min_activation_ratio=min(ratios) if ratios else None,
        final_test_error=run.final_test_error,
    )


def quantize_first_layers(model: MoEModel, bits) -> MoEModel:
    """Quantize every expert's first layer, one group per neuron, without zero points.

    `bits` is one bit-width for all experts or a sequence with one per expert.
    """
    if np.ndim(bits) == 0:
        bits = [int(bits)] * model.k
    if len(bits) != model.k:
        raise InvalidArgumentError(f"{len(bits)} bit-widths for {model.k} experts")
    experts = np.empty_like(model.experts)
    for s in range(model.k):
        # Neurons are the columns of the transposed d x m matrix.
        W = model.experts[s].T
        experts[s] = quantize_dequantize(W, bits[s], axis="column", mode="zero_point_free").T
    return model.with_experts(experts)


def high_precision_experts(run: TrainingRun, zeta: float = DEFAULT_ZETA) -> set[int]:
    """The experts kept at high precision in each sign group.

    Each group is ranked by ascending router-norm change with MaxVar
    promotion, and its top ceil(kappa * size) experts are kept, where kappa
    covers both the experts aligned to the rare token at initialization and
    those specialized to it at the end of training.
    """
    initial, final = run.initial, run.final
    cfg = run.config
    diagnostics = init_diagnostics(initial, run.token_set, run.held_out, cfg.alignment_threshold)
    table = proficiency_table(final, run.held_out, run.token_set.task_relevant)
    special = specializations(table, final.signs)
    norm_change = np.linalg.norm(final.routers, axis=1) - np.linalg.norm(initial.routers, axis=1)

    keep = set()
    for label in (+1, -1):
        group = final.sign_group(label)
        specialized = sum(special[s] == LESS_PREVALENT[label] for s in group) / len(group)
        kappa = max(less_prevalent_gamma(diagnostics, label), specialized)
        metrics = [
            ExpertMetrics(
                expert_id=s,
                norm_change=float(norm_change[s]),
                norm_is_surrogate=False,
                maxvar=max_intra_neuron_variance(final.experts[s]),
            )
            for s in group
        ]
        ranked = rank_experts(metrics, "lambda-maxvar", zeta, layer_id=0)
        count = math.ceil(kappa * len(group))
        keep.update(ranked.order[:count])
        logger.debug("group %+d: kappa %.3f keeps %s", label, kappa, ranked.order[:count])
    return keep


def min_uniform_bits(run: TrainingRun, bit_range: Seq[int]) -> int | None:
    """Fewest bits for all experts that keep the evaluation error at zero."""
    low, high = bit_range
    for bits in range(low, high + 1):
        if error_rate(quantize_first_layers(run.final, bits), run.evaluation) == 0:
            return bits
    return None


def mixed_bits(k: int, keep: set[int], b_h: int, b_l: int) -> list[int]:
    return [b_h if s in keep else b_l for s in range(k)]


BITGAP_HEADER = [
    "alpha",
    "b_h",
    "b_l",
    "gap",
    "bound",
    "reduction_bound",
    "mixed_test_error",
]


@dataclass
class BitGapRow:
    alpha: float
    b_h: int
    b_l: int
    bound: float
    reduction_bound: float
    mixed_test_error: float

    @property
    def gap(self) -> int:
        return self.b_h - self.b_l

    def as_row(self) -> list:
        return [
            self.alpha,
            self.b_h,
            self.b_l,
            self.gap,
            self.bound,
            self.reduction_bound,
            self.mixed_test_error,
        ]


def bit_gap_for_run(run: TrainingRun, bit_range: Seq[int], zeta: float = DEFAULT_ZETA) -> BitGapRow:
    alpha = run.config.alpha
    if run.final_test_error > 0:
        raise ExperimentFailedError(
            f"alpha={alpha}: full-precision test error is {run.final_test_error}, not 0"
        )
    b_h = min_uniform_bits(run, bit_range)
    if b_h is None:
        raise ExperimentFailedError(
            f"alpha={alpha}: no uniform bit-width in {bit_range[0]}..{bit_range[1]} "
            + "reaches zero test error"
        )
    keep = high_precision_experts(run, zeta)
    k = run.final.k
    b_l = b_h
    for bits in range(bit_range[0], b_h):
        quantized = quantize_first_layers(run.final, mixed_bits(k, keep, b_h, bits))
        if error_rate(quantized, run.evaluation) == 0:
            b_l = bits
            break
    mixed = quantize_first_layers(run.final, mixed_bits(k, keep, b_h, b_l))
    row = BitGapRow(
        alpha=alpha,
        b_h=b_h,
        b_l=b_l,
        bound=bit_gap_bound(alpha),
        reduction_bound=bit_reduction_bound(alpha, b_h),
        mixed_test_error=error_rate(mixed, run.evaluation),
    )
    logger.info("alpha=%g: b_h=%d, b_l=%d, %d experts kept high", alpha, b_h, b_l, len(keep))
    return row


def steps_for_alpha(cfg: SyntheticConfig, alpha: float) -> int:
    """cfg.steps, rescaled from cfg.alpha to `alpha`.

    The steps needed to fit the data grow as 1 / alpha, and training much
    longer than that lets the test error creep back up.
    """
    return round(cfg.steps * cfg.alpha / alpha)


def bit_gap_experiment(
    cfg: SyntheticConfig,
    alphas: Seq[float] | None = None,
    bit_range: Seq[int] | None = None,
    zeta: float = DEFAULT_ZETA,
) -> list[BitGapRow]:
    """Train at each alpha and find the uniform and mixed bit requirements."""
    alphas = cfg.alphas if alphas is None else alphas
    bit_range = cfg.bit_range if bit_range is None else bit_range
    rows = []
    for alpha in alphas:
        run = train(cfg.replace(alpha=alpha, steps=steps_for_alpha(cfg, alpha)))
        rows.append(bit_gap_for_run(run, bit_range, zeta))
    return rows


@dataclass
class SurrogateStudy:
    spearman: float
    kendall: float
    final_norm_order: list[int]
    norm_change_order: list[int]

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "spearman": self.spearman,
            "kendall": self.kendall,
            "final_norm_order": self.final_norm_order,
            "norm_change_order": self.norm_change_order,
        }


def surrogate_study(run: TrainingRun) -> SurrogateStudy:
    """Rank agreement of final router norms with router norm changes."""
    final_norms = np.linalg.norm(run.final.routers, axis=1)
    changes = final_norms - np.linalg.norm(run.initial.routers, axis=1)
    rho, tau = score_correlation(final_norms, changes)

    def order(values):
        return [int(s) for s in np.argsort(values, kind="stable")]

    return SurrogateStudy(
        spearman=rho,
        kendall=tau,
        final_norm_order=order(final_norms),
        norm_change_order=order(changes),
    )


ZETA_SWEEP_HEADER = ["zeta", "experts", "moved", "fraction_moved"]


@dataclass
class ZetaSweepRow:
    zeta: float
    experts: int
    moved: int

    @property
    def fraction_moved(self) -> float:
        return self.moved / self.experts if self.experts else 0.0

    def as_row(self) -> list:
        return [self.zeta, self.experts, self.moved, self.fraction_moved]


def zeta_sweep(layers: Seq[LayerMetrics], zetas: Seq[float]) -> list[ZetaSweepRow]:
    """For each zeta, count experts ranked above their router-norm position."""
    rows = []
    for zeta in zetas:
        experts = moved = 0
        for layer in layers:
            base = {e: i for i, e in enumerate(rank_by_lambda(layer.experts))}
            ranked = rank_experts(layer.experts, "lambda-maxvar", zeta, layer.layer_id)
            experts += len(ranked)
            moved += sum(i < base[e] for i, e in enumerate(ranked.order))
        rows.append(ZetaSweepRow(zeta=zeta, experts=experts, moved=moved))
    return rows


def run_tensors(run: TrainingRun, model_name: str = "synthetic-moe") -> ModelTensors:
    """A trained run as a one-layer model for the checkpoint pipeline."""
    layer = LayerTensors(layer_id=0)
    for s in range(run.final.k):
        layer.experts.append(
            ExpertTensorSet(
                expert_id=s,
                router_init=run.initial.routers[s],
                router_final=run.final.routers[s],
                w1=run.final.experts[s],
                neuron_axis="row",
            )
        )
    return ModelTensors(model_name=model_name, layers=[layer])


def export_run(run: TrainingRun, directory: str | Path) -> None:
    write_manifest(directory, run_tensors(run))
