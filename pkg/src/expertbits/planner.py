"""The checkpoint pipeline: metrics, then a plan, then quantized weights."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from expertbits.allocation import BitPlan, assign_bits, plan_memory_estimate
from expertbits.errors import ManifestError
from expertbits.jsonio import SCHEMA_VERSION, read_json, write_json
from expertbits.manifest import LayerTensors, ModelTensors, write_manifest
from expertbits.metrics import ExpertMetrics, ExpertTensorSet, expert_metrics
from expertbits.quantizer import (
    Axis,
    Mode,
    QuantReport,
    quantize_with_params,
    reconstruction_report,
)
from expertbits.ranking import DEFAULT_ZETA, RankedOrder, rank_experts

logger = logging.getLogger(__name__)


@dataclass
class LayerMetrics:
    layer_id: int
    experts: list[ExpertMetrics]

    def to_json(self) -> dict:
        return {"layer_id": self.layer_id, "experts": [m.to_json() for m in self.experts]}


def layer_metrics(layer: LayerTensors, surrogate: bool = False) -> LayerMetrics:
    """Metrics of every expert in a layer.

    If any expert lacks an initial router, the whole layer uses the surrogate
    so its experts stay comparable.
    """
    use_surrogate = surrogate or not layer.has_init_routers
    experts = [expert_metrics(tensors, surrogate=use_surrogate) for tensors in layer.experts]
    return LayerMetrics(layer_id=layer.layer_id, experts=experts)


def model_metrics(model: ModelTensors, surrogate: bool = False) -> list[LayerMetrics]:
    return [layer_metrics(layer, surrogate) for layer in model.layers]


def metrics_document(model_name: str, layers: list[LayerMetrics]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "model_name": model_name,
        "layers": [layer.to_json() for layer in layers],
    }


def read_metrics(path: str | Path) -> tuple[str, list[LayerMetrics]]:
    data = read_json(path, schema="metrics")
    layers = [
        LayerMetrics(
            layer_id=layer["layer_id"],
            experts=[ExpertMetrics.from_json(e) for e in layer["experts"]],
        )
        for layer in data["layers"]
    ]
    return data["model_name"], layers


@dataclass
class LayerPlan:
    metrics: LayerMetrics
    ranked: RankedOrder
    plan: BitPlan

    @property
    def layer_id(self) -> int:
        return self.plan.layer_id

    def to_json(self) -> dict:
        by_id = {m.expert_id: m for m in self.metrics.experts}
        ranking = [
            {
                "expert_id": e,
                "lambda": by_id[e].norm_change,
                "lambda_is_surrogate": by_id[e].norm_is_surrogate,
                "maxvar": by_id[e].maxvar,
                "promoted": e in self.ranked.promoted,
            }
            for e in self.ranked.order
        ]
        return {"layer_id": self.layer_id, "ranking": ranking, "plan": self.plan.to_json()}


@dataclass
class PlanFile:
    model_name: str
    zeta: float
    levels: list[int]
    target_avg_bits: float
    ranking: str
    layers: list[LayerPlan] = field(default_factory=list)
    memory_gb: float | None = None

    @property
    def achieved_avg_bits(self) -> float:
        bits = [b for layer in self.layers for b in layer.plan.assignment.values()]
        return sum(bits) / len(bits) if bits else 0.0

    @property
    def plans(self) -> list[BitPlan]:
        return [layer.plan for layer in self.layers]

    def to_json(self) -> dict:
        summary = {
            "zeta": self.zeta,
            "levels": sorted(self.levels, reverse=True),
            "target_avg_bits": self.target_avg_bits,
            "achieved_avg_bits": self.achieved_avg_bits,
            "ranking": self.ranking,
        }
        if self.memory_gb is not None:
            summary["memory_gb"] = self.memory_gb
        return {
            "schema_version": SCHEMA_VERSION,
            "model_name": self.model_name,
            "global": summary,
            "layers": [layer.to_json() for layer in self.layers],
        }


def plan_layers(
    model_name: str,
    layers: Sequence[LayerMetrics],
    levels: Sequence[int],
    avg_bits: float,
    zeta: float = DEFAULT_ZETA,
    strategy: str = "lambda-maxvar",
) -> PlanFile:
    """Rank and assign bits to every layer independently."""
    plan_file = PlanFile(
        model_name=model_name,
        zeta=zeta,
        levels=sorted(set(levels), reverse=True),
        target_avg_bits=avg_bits,
        ranking=strategy,
    )
    for metrics in layers:
        ranked = rank_experts(metrics.experts, strategy, zeta, metrics.layer_id)
        plan = assign_bits(ranked, levels, avg_bits)
        plan_file.layers.append(LayerPlan(metrics=metrics, ranked=ranked, plan=plan))
        if ranked.promotions_applied > len(ranked) // 2:
            logger.warning(
                "layer %d: zeta %g promoted %d of %d experts",
                metrics.layer_id,
                zeta,
                ranked.promotions_applied,
                len(ranked),
            )
    return plan_file


def add_memory_estimate(
    plan_file: PlanFile,
    params_per_expert: int,
    non_expert_params: int = 0,
    non_expert_bits: int = 16,
) -> None:
    plan_file.memory_gb = plan_memory_estimate(
        plan_file.plans, params_per_expert, non_expert_params, non_expert_bits
    )


def write_plan(path: str | Path, plan_file: PlanFile) -> None:
    write_json(path, plan_file.to_json(), schema="plan")


def read_plan(path: str | Path) -> dict[int, BitPlan]:
    """The bit plan of each layer in a plan file, by layer id."""
    data = read_json(path, schema="plan")
    return {layer["layer_id"]: BitPlan.from_json(layer["plan"]) for layer in data["layers"]}


@dataclass
class ExpertQuantization:
    expert_id: int
    bits: int
    report: QuantReport

    def to_json(self) -> dict:
        return {"expert_id": self.expert_id, "bits": self.bits, **self.report.to_json()}


def quantize_expert(
    tensors: ExpertTensorSet,
    bits: int,
    axis: Axis | None = None,
    mode: Mode = "affine",
) -> tuple[ExpertTensorSet, QuantReport]:
    """Quantize an expert's first layer; routers are left alone.

    By default there is one quantization group per neuron.
    """
    axis = axis or tensors.neuron_axis
    w1_hat, params = quantize_with_params(tensors.w1, bits, axis, mode)
    report = reconstruction_report(tensors.w1, w1_hat, params)
    quantized = ExpertTensorSet(
        expert_id=tensors.expert_id,
        router_final=tensors.router_final,
        router_init=tensors.router_init,
        w1=w1_hat,
        neuron_axis=tensors.neuron_axis,
        activation_frequency=tensors.activation_frequency,
        activation_weight=tensors.activation_weight,
    )
    return quantized, report


def quantize_model(
    model: ModelTensors,
    plans: dict[int, BitPlan],
    out_dir: str | Path,
    axis: Axis | None = None,
    mode: Mode = "affine",
) -> dict:
    """Apply a plan to a model, writing a quantized manifest and a report.

    Returns the report, which is also written as quant_report.json.
    """
    out_dir = Path(out_dir)
    quantized = ModelTensors(model_name=model.model_name)
    layer_reports = []
    all_within = True
    all_levels = True
    for layer in model.layers:
        plan = plans.get(layer.layer_id)
        if plan is None:
            raise ManifestError(f"plan has no layer {layer.layer_id}")
        new_layer = LayerTensors(layer_id=layer.layer_id)
        expert_reports = []
        for tensors in layer.experts:
            if tensors.expert_id not in plan.assignment:
                raise ManifestError(
                    f"plan for layer {layer.layer_id} has no expert {tensors.expert_id}"
                )
            bits = plan.assignment[tensors.expert_id]
            new_tensors, report = quantize_expert(tensors, bits, axis, mode)
            new_layer.experts.append(new_tensors)
            expert_reports.append(ExpertQuantization(tensors.expert_id, bits, report).to_json())
            all_within = all_within and report.within_bound()
            all_levels = all_levels and report.levels_within_bits()
        quantized.layers.append(new_layer)
        layer_reports.append({"layer_id": layer.layer_id, "experts": expert_reports})
        logger.debug("quantized layer %d", layer.layer_id)

    write_manifest(out_dir, quantized)
    report = {
        "schema_version": SCHEMA_VERSION,
        "model_name": model.model_name,
        "axis": axis or "neuron",
        "mode": mode,
        "within_bound": all_within,
        "levels_within_bits": all_levels,
        "layers": layer_reports,
    }
    write_json(out_dir / "quant_report.json", report, schema="quant_report")
    return report
