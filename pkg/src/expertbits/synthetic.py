"""Training the synthetic mixture-of-experts from scratch.

The loss used for gradients is the unclipped 1 - y f(x), with the routing
sets and gating values of each step frozen from that step's forward pass.
Reported losses are the hinge max(1 - y f(x), 0).
"""

import dataclasses
import json
import logging
import tomllib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from expertbits.errors import FileAccessError, InvalidArgumentError, TrainingDivergedError
from expertbits.jsonio import SCHEMA_VERSION, validate
from expertbits.metrics import (
    ALIGNMENT_THRESHOLD,
    CHUNK,
    expert_activation,
    proficiency_table,
)
from expertbits.moe import (
    RELEVANT_NAMES,
    MoEModel,
    Sequence,
    TokenSet,
    batch_output,
    gather,
    make_token_set,
    random_model,
    route,
    sample_sequences,
    stack,
)

logger = logging.getLogger(__name__)

RNG_STREAMS = ("init", "train", "held_out", "eval")


@dataclass
class SyntheticConfig:
    d: int = 200
    k: int = 20
    m: int = 800
    n: int = 100
    l: int = 5
    alpha: float = 0.1
    batch_size: int = 256
    eta_e: float = 0.2
    eta_r: float = 0.2
    steps: int = 300
    init_std: float = 0.01
    seed: int = 0
    checkpoint_every: int = 25
    eval_samples: int = 2000
    held_out_samples: int = 2000
    alignment_threshold: float = ALIGNMENT_THRESHOLD
    # Used by the bit-gap experiment.
    alphas: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.2])
    bit_range: list[int] = field(default_factory=lambda: [1, 12])

    def __post_init__(self):
        self.validate()

    @classmethod
    def ci(cls, **overrides) -> "SyntheticConfig":
        """A small configuration that trains in seconds."""
        values = dict(d=64, k=8, m=64, n=20, l=3, steps=100)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        data = dict(data)
        data.pop("schema_version", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidArgumentError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticConfig":
        """Read a configuration from a .toml or .json file."""
        path = Path(path)
        try:
            if path.suffix == ".toml":
                with path.open("rb") as f:
                    data = tomllib.load(f)
            elif path.suffix == ".json":
                data = json.loads(path.read_text(encoding="utf-8"))
            else:
                raise InvalidArgumentError(f"config must be .toml or .json, not {path.name}")
        except FileNotFoundError:
            raise InvalidArgumentError(f"no config file {path}") from None
        except OSError as exc:
            raise FileAccessError(f"couldn't read {path}: {exc.strerror or exc}") from exc
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise InvalidArgumentError(f"couldn't parse {path}: {exc}") from None
        return cls.from_dict(data)

    def replace(self, **changes) -> "SyntheticConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        problems = []
        if self.d < 4:
            problems.append(f"d must be at least 4, not {self.d}")
        if self.k < 2 or self.k % 2:
            problems.append(f"k must be even and at least 2, not {self.k}")
        if not 1 <= self.l <= self.n:
            problems.append(f"need 1 <= l <= n, got l={self.l}, n={self.n}")
        if not 0 < self.alpha < 0.25:
            problems.append(f"alpha must be in (0, 0.25), not {self.alpha}")
        if any(not 0 < a < 0.25 for a in self.alphas):
            problems.append(f"every bit-gap alpha must be in (0, 0.25): {self.alphas}")
        if len(self.bit_range) != 2 or not 1 <= self.bit_range[0] <= self.bit_range[1]:
            problems.append(f"bit range must be [low, high], 1 <= low <= high: {self.bit_range}")
        for name in ("m", "batch_size", "checkpoint_every", "eval_samples", "held_out_samples"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        for name in ("steps", "seed", "eta_e", "eta_r", "init_std"):
            if getattr(self, name) < 0:
                problems.append(f"{name} can't be negative")
        if problems:
            raise InvalidArgumentError("; ".join(problems))

    def to_json(self) -> dict:
        data = dataclasses.asdict(self)
        data["schema_version"] = SCHEMA_VERSION
        validate(data, "run_config")
        return data

    def rngs(self) -> dict[str, np.random.Generator]:
        """Independent generators for each use of randomness in a run."""
        children = np.random.SeedSequence(self.seed).spawn(len(RNG_STREAMS))
        return {name: np.random.default_rng(c) for name, c in zip(RNG_STREAMS, children)}


def init_model(cfg: SyntheticConfig, rng: np.random.Generator | None = None) -> MoEModel:
    """A freshly initialized model for `cfg`."""
    if rng is None:
        rng = cfg.rngs()["init"]
    return random_model(cfg.k, cfg.m, cfg.d, cfg.l, cfg.init_std, rng)


@dataclass
class Gradients:
    routers: np.ndarray
    experts: np.ndarray
    # Model outputs on the batch, from the same forward pass.
    f: np.ndarray


def batch_gradients(model: MoEModel, X: np.ndarray, y: np.ndarray) -> Gradients:
    """Batch-averaged gradients of 1 - y f(x) for a B x n x d batch."""
    B = X.shape[0]
    routing = route(model, X)
    d_routers = np.zeros_like(model.routers)
    d_experts = np.zeros_like(model.experts)
    f = np.zeros(B)
    for s in range(model.k):
        Xs = gather(X, routing.selected[:, s, :])
        G = routing.gating[:, s, :]
        pre = Xs @ model.experts[s].T
        acts = np.maximum(pre, 0.0).sum(axis=-1)
        f += model.signs[s] * (G * acts).sum(axis=-1)

        coef = -y[:, None] * model.signs[s] * G
        weighted = coef[:, :, None] * (pre >= 0)
        d_experts[s] = weighted.reshape(-1, model.m).T @ Xs.reshape(-1, model.d) / B

        x_bar = np.einsum("bl,bld->bd", G, Xs)
        centered = Xs - x_bar[:, None, :]
        d_routers[s] = np.einsum("bl,bld->d", coef * acts, centered) / B
    return Gradients(routers=d_routers, experts=d_experts, f=f)


def hinge_loss(f: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.maximum(1.0 - y * f, 0.0)))


def sgd_step(
    model: MoEModel,
    batch: list[Sequence],
    eta_e: float,
    eta_r: float,
) -> tuple[MoEModel, float]:
    """One SGD step; returns the new model and the batch's mean hinge loss."""
    X, y = stack(batch)
    grads = batch_gradients(model, X, y)
    with np.errstate(over="ignore", invalid="ignore"):
        new_model = MoEModel(
            routers=model.routers - eta_r * grads.routers,
            experts=model.experts - eta_e * grads.experts,
            signs=model.signs,
            l=model.l,
        )
    if not (np.all(np.isfinite(new_model.routers)) and np.all(np.isfinite(new_model.experts))):
        raise TrainingDivergedError(
            f"weights became non-finite (eta_e={eta_e}, eta_r={eta_r}); "
            + "try a smaller learning rate"
        )
    return new_model, hinge_loss(grads.f, y)


def outputs(model: MoEModel, sequences: list[Sequence]) -> tuple[np.ndarray, np.ndarray]:
    """Model outputs and labels for a list of sequences."""
    fs = []
    ys = []
    for start in range(0, len(sequences), CHUNK):
        X, y = stack(sequences[start : start + CHUNK])
        fs.append(batch_output(model, X))
        ys.append(y)
    return np.concatenate(fs), np.concatenate(ys)


def error_rate(model: MoEModel, sequences: list[Sequence]) -> float:
    """Fraction of sequences with y f(x) <= 0."""
    f, y = outputs(model, sequences)
    return float(np.mean(y * f <= 0))


def test_error(
    model: MoEModel,
    ts: TokenSet,
    alpha: float,
    n: int,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    """Misclassification rate on `n_samples` fresh sequences."""
    if n_samples < 1:
        raise InvalidArgumentError(f"need at least one sample, not {n_samples}")
    return error_rate(model, sample_sequences(ts, alpha, n, n_samples, rng))


TRACE_HEADER = (
    ["step", "expert_id", "lambda"]
    + [f"sigma_{name}" for name in RELEVANT_NAMES]
    + [f"proficiency_{name}" for name in RELEVANT_NAMES]
    + ["train_loss", "test_error"]
)


@dataclass
class TraceRow:
    step: int
    expert_id: int
    norm_change: float
    sigma: dict[str, float]
    proficiency: dict[str, float]
    train_loss: float
    test_error: float

    def as_row(self) -> list:
        return (
            [self.step, self.expert_id, self.norm_change]
            + [self.sigma[name] for name in RELEVANT_NAMES]
            + [self.proficiency[name] for name in RELEVANT_NAMES]
            + [self.train_loss, self.test_error]
        )


@dataclass
class TrainingRun:
    config: SyntheticConfig
    token_set: TokenSet
    initial: MoEModel
    final: MoEModel
    # Fixed samples for diagnostics and for measuring test error.
    held_out: list[Sequence]
    evaluation: list[Sequence]
    traces: list[TraceRow] = field(default_factory=list)

    @property
    def final_test_error(self) -> float:
        return error_rate(self.final, self.evaluation)


def checkpoint(run: TrainingRun, model: MoEModel, step: int) -> list[TraceRow]:
    """Trace rows for every expert of `model` at `step`."""
    ts = run.token_set
    relevant = ts.task_relevant
    table = proficiency_table(model, run.held_out, relevant)
    f, y = outputs(model, run.held_out)
    loss = hinge_loss(f, y)
    err = error_rate(model, run.evaluation)
    initial_norms = np.linalg.norm(run.initial.routers, axis=1)
    norm_change = np.linalg.norm(model.routers, axis=1) - initial_norms
    rows = []
    for s in range(model.k):
        rows.append(
            TraceRow(
                step=step,
                expert_id=s,
                norm_change=float(norm_change[s]),
                sigma={
                    name: expert_activation(model.experts[s], ts.vector(token))
                    for name, token in relevant.items()
                },
                proficiency={name: float(table[name][s]) for name in relevant},
                train_loss=loss,
                test_error=err,
            )
        )
    logger.info("step %d: train loss %.4f, test error %.4f", step, loss, err)
    return rows


def train(cfg: SyntheticConfig) -> TrainingRun:
    """Train a model from scratch, recording traces at every checkpoint.

    Everything random comes from `cfg.seed`, so equal configs give identical
    runs.
    """
    rngs = cfg.rngs()
    ts = make_token_set(cfg.d, cfg.seed)
    initial = init_model(cfg, rngs["init"])
    run = TrainingRun(
        config=cfg,
        token_set=ts,
        initial=initial,
        final=initial.copy(),
        held_out=sample_sequences(ts, cfg.alpha, cfg.n, cfg.held_out_samples, rngs["held_out"]),
        evaluation=sample_sequences(ts, cfg.alpha, cfg.n, cfg.eval_samples, rngs["eval"]),
    )
    model = run.final
    run.traces.extend(checkpoint(run, model, 0))
    for step in range(1, cfg.steps + 1):
        batch = sample_sequences(ts, cfg.alpha, cfg.n, cfg.batch_size, rngs["train"])
        model, loss = sgd_step(model, batch, cfg.eta_e, cfg.eta_r)
        logger.debug("step %d: batch loss %.4f", step, loss)
        if step % cfg.checkpoint_every == 0 or step == cfg.steps:
            run.traces.extend(checkpoint(run, model, step))
    run.final = model
    return run
