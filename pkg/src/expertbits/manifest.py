"""Model manifests: a directory of MQT1 tensors described by manifest.json.

::

    {
      "schema_version": 1,
      "model_name": "tiny-moe",
      "layers": [
        {"layer_id": 0, "experts": [
          {"expert_id": 0, "router_init": "l0/e0.router0.mqt" or null,
           "router_final": "l0/e0.router.mqt", "w1": "l0/e0.w1.mqt",
           "neuron_axis": "row"},
          ...
        ]}
      ]
    }

Paths are relative to the manifest's directory.  A layer with any null
router_init is planned with the final-norm surrogate.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from expertbits.errors import DuplicateExpertError, ShapeMismatchError
from expertbits.jsonio import SCHEMA_VERSION, read_json, write_json
from expertbits.metrics import ExpertTensorSet
from expertbits.tensorfile import read_tensor, write_tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class LayerTensors:
    layer_id: int
    experts: list[ExpertTensorSet] = field(default_factory=list)

    @property
    def has_init_routers(self) -> bool:
        return all(e.router_init is not None for e in self.experts)


@dataclass
class ModelTensors:
    model_name: str
    layers: list[LayerTensors] = field(default_factory=list)

    @property
    def expert_count(self) -> int:
        return sum(len(layer.experts) for layer in self.layers)


def _load_expert(root: Path, entry: dict, layer_id: int) -> ExpertTensorSet:
    router_final = read_tensor(root / entry["router_final"])
    router_init = None
    if entry.get("router_init") is not None:
        router_init = read_tensor(root / entry["router_init"])
    w1 = read_tensor(root / entry["w1"])
    tensors = ExpertTensorSet(
        expert_id=entry["expert_id"],
        router_final=router_final,
        router_init=router_init,
        w1=w1,
        neuron_axis=entry.get("neuron_axis", "row"),
        activation_frequency=entry.get("activation_frequency"),
        activation_weight=entry.get("activation_weight"),
    )

    where = f"layer {layer_id} expert {tensors.expert_id}"
    if router_final.ndim != 1:
        raise ShapeMismatchError(f"{where}: router must be a vector, got {router_final.shape}")
    if w1.ndim != 2:
        raise ShapeMismatchError(f"{where}: w1 must be a matrix, got {w1.shape}")
    if router_init is not None and router_init.shape != router_final.shape:
        raise ShapeMismatchError(
            f"{where}: initial router {router_init.shape} vs final {router_final.shape}"
        )
    if tensors.d != router_final.shape[0]:
        raise ShapeMismatchError(
            f"{where}: router length {router_final.shape[0]} doesn't match w1 {w1.shape} "
            + f"with neurons as {tensors.neuron_axis}s"
        )
    return tensors


def load_manifest(directory: str | Path) -> ModelTensors:
    """Read and validate every tensor a manifest names."""
    root = Path(directory)
    data = read_json(root / MANIFEST_NAME, schema="manifest")
    model = ModelTensors(model_name=data["model_name"])
    seen_layers = set()
    for layer_entry in data["layers"]:
        layer_id = layer_entry["layer_id"]
        if layer_id in seen_layers:
            raise DuplicateExpertError(f"layer {layer_id} appears more than once")
        seen_layers.add(layer_id)
        layer = LayerTensors(layer_id=layer_id)
        seen = set()
        for entry in layer_entry["experts"]:
            if entry["expert_id"] in seen:
                raise DuplicateExpertError(
                    f"layer {layer_id}: expert {entry['expert_id']} appears more than once"
                )
            seen.add(entry["expert_id"])
            layer.experts.append(_load_expert(root, entry, layer_id))
        if not layer.has_init_routers:
            logger.info("layer %d has no initial routers, will use the norm surrogate", layer_id)
        model.layers.append(layer)
    return model


def expert_paths(layer_id: int, expert_id: int) -> dict[str, str]:
    prefix = f"layer{layer_id}/expert{expert_id}"
    return {
        "router_init": f"{prefix}.router_init.mqt",
        "router_final": f"{prefix}.router_final.mqt",
        "w1": f"{prefix}.w1.mqt",
    }


def write_manifest(directory: str | Path, model: ModelTensors) -> None:
    """Write a model's tensors and its manifest.json."""
    root = Path(directory)
    layers = []
    for layer in model.layers:
        experts = []
        for expert in layer.experts:
            paths = expert_paths(layer.layer_id, expert.expert_id)
            write_tensor(root / paths["router_final"], expert.router_final)
            write_tensor(root / paths["w1"], expert.w1)
            entry = {
                "expert_id": expert.expert_id,
                "router_final": paths["router_final"],
                "w1": paths["w1"],
                "neuron_axis": expert.neuron_axis,
                "router_init": None,
            }
            if expert.router_init is not None:
                write_tensor(root / paths["router_init"], expert.router_init)
                entry["router_init"] = paths["router_init"]
            if expert.activation_frequency is not None:
                entry["activation_frequency"] = expert.activation_frequency
            if expert.activation_weight is not None:
                entry["activation_weight"] = expert.activation_weight
            experts.append(entry)
        layers.append({"layer_id": layer.layer_id, "experts": experts})
    payload = {"schema_version": SCHEMA_VERSION, "model_name": model.model_name, "layers": layers}
    write_json(root / MANIFEST_NAME, payload, schema="manifest")


def random_model_tensors(
    model_name: str,
    layers: int,
    experts: int,
    d: int,
    m: int,
    seed: int,
    init_std: float = 0.01,
) -> ModelTensors:
    """A model of random tensors, for fixtures and smoke tests."""
    rng = np.random.default_rng(seed)
    model = ModelTensors(model_name=model_name)
    for layer_id in range(layers):
        layer = LayerTensors(layer_id=layer_id)
        for expert_id in range(experts):
            layer.experts.append(
                ExpertTensorSet(
                    expert_id=expert_id,
                    router_init=rng.normal(0.0, init_std, d).astype(np.float32),
                    router_final=rng.normal(0.0, rng.uniform(0.5, 2.0), d).astype(np.float32),
                    w1=rng.normal(0.0, rng.uniform(0.5, 2.0), (m, d)).astype(np.float32),
                )
            )
        model.layers.append(layer)
    return model
