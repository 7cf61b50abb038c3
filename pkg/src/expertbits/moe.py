"""The synthetic two-layer mixture-of-experts and its data.

Tokens are columns of an orthonormal matrix P.  Two columns, o1 and o2, are
task relevant: a sequence holds exactly one of +o1, -o1 (label +1) or +o2, -o2
(label -1).  The signed ones +o1/+o2 are the less prevalent tokens, appearing
with probability alpha; the rest of the sequence is filled with task-irrelevant
columns.

The model has k experts.  Expert s has a router vector w_s, a first layer of m
ReLU neurons (stored as rows of an m x d matrix) and a fixed second layer
a_s * 1.  Routing is expert-choice: each expert picks the l tokens of a
sequence with the largest scores <w_s, x_j>, and weights them with a softmax
over those l scores.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from expertbits.errors import InvalidArgumentError, ShapeMismatchError

logger = logging.getLogger(__name__)

# How many seed substreams to try before giving up on a QR draw.
QR_ATTEMPTS = 10


class Token(NamedTuple):
    index: int
    sign: int

    def __str__(self) -> str:
        return f"{'+' if self.sign > 0 else '-'}{self.index}"


@dataclass(frozen=True, eq=False)
class TokenSet:
    # d x d orthonormal matrix, one token per column.
    P: np.ndarray
    o1_index: int = 0
    o2_index: int = 1

    @property
    def d(self) -> int:
        return self.P.shape[0]

    @property
    def task_relevant(self) -> dict[str, Token]:
        """The four task-relevant tokens by name."""
        return {
            "+o1": Token(self.o1_index, +1),
            "-o1": Token(self.o1_index, -1),
            "+o2": Token(self.o2_index, +1),
            "-o2": Token(self.o2_index, -1),
        }

    @property
    def irrelevant_indices(self) -> np.ndarray:
        relevant = {self.o1_index, self.o2_index}
        return np.array([i for i in range(self.P.shape[1]) if i not in relevant])

    def vector(self, token: Token) -> np.ndarray:
        return token.sign * self.P[:, token.index]


# The names of the task-relevant tokens, less prevalent first within a class.
RELEVANT_NAMES = ("+o1", "-o1", "+o2", "-o2")

# Which class each task-relevant token belongs to.
TOKEN_LABEL = {"+o1": +1, "-o1": +1, "+o2": -1, "-o2": -1}

# The less prevalent token of each class, and its more prevalent partner.
LESS_PREVALENT = {+1: "+o1", -1: "+o2"}
MORE_PREVALENT = {+1: "-o1", -1: "-o2"}


@dataclass(frozen=True, eq=False)
class Sequence:
    """One input sequence: n tokens drawn from the columns of `basis`."""

    basis: np.ndarray
    tokens: np.ndarray
    signs: np.ndarray
    label: int
    relevant_position: int = -1

    @classmethod
    def from_vectors(cls, x, label: int = 1) -> "Sequence":
        """Make a sequence from an explicit n x d matrix of token vectors."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise InvalidArgumentError(f"token matrix must be 2-d, got shape {x.shape}")
        n = x.shape[0]
        return cls(basis=x.T, tokens=np.arange(n), signs=np.ones(n), label=label)

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def x(self) -> np.ndarray:
        """The n x d matrix of token vectors."""
        return self.basis[:, self.tokens].T * self.signs[:, None]

    def positions_of(self, token: Token) -> np.ndarray:
        return np.flatnonzero((self.tokens == token.index) & (self.signs == token.sign))


@dataclass
class MoEModel:
    # k x d, one router per expert.
    routers: np.ndarray
    # k x m x d, neurons as rows.
    experts: np.ndarray
    # k signs of the fixed second layers.
    signs: np.ndarray
    l: int

    @property
    def k(self) -> int:
        return self.routers.shape[0]

    @property
    def m(self) -> int:
        return self.experts.shape[1]

    @property
    def d(self) -> int:
        return self.routers.shape[1]

    @property
    def positive_experts(self) -> list[int]:
        return [s for s in range(self.k) if self.signs[s] > 0]

    @property
    def negative_experts(self) -> list[int]:
        return [s for s in range(self.k) if self.signs[s] < 0]

    def sign_group(self, label: int) -> list[int]:
        """The experts connected to the output with the sign of `label`."""
        return self.positive_experts if label > 0 else self.negative_experts

    def copy(self) -> "MoEModel":
        return MoEModel(
            routers=self.routers.copy(),
            experts=self.experts.copy(),
            signs=self.signs.copy(),
            l=self.l,
        )

    def with_experts(self, experts: np.ndarray) -> "MoEModel":
        """A model sharing routers and signs, with different first layers."""
        return MoEModel(routers=self.routers, experts=experts, signs=self.signs, l=self.l)


@dataclass
class Routing:
    """Expert-choice routing of a batch of sequences."""

    # B x k x l token positions chosen by each expert, best first.
    selected: np.ndarray
    # B x k x l softmax gating values of the chosen tokens.
    gating: np.ndarray


@dataclass
class ForwardResult:
    f: float
    # k x l token positions chosen by each expert.
    selected: np.ndarray
    # k x l gating values.
    gating: np.ndarray
    # k x l summed ReLU activations of the chosen tokens.
    activations: np.ndarray = field(repr=False)


def make_token_set(d: int, seed: int) -> TokenSet:
    """Orthonormal tokens from the QR decomposition of a seeded Gaussian matrix."""
    if d < 4:
        raise InvalidArgumentError(f"token dimension must be at least 4, not {d}")
    for attempt in range(QR_ATTEMPTS):
        rng = np.random.default_rng([seed, attempt])
        try:
            Q, R = np.linalg.qr(rng.standard_normal((d, d)))
        except np.linalg.LinAlgError:
            logger.warning("QR failed for seed %d attempt %d", seed, attempt)
            continue
        if np.min(np.abs(np.diag(R))) > 1e-10 and _orthonormality_error(Q) <= 1e-6:
            return TokenSet(P=Q)
        logger.warning("Degenerate Gaussian draw for seed %d attempt %d", seed, attempt)
    raise InvalidArgumentError(f"couldn't make an orthonormal token set for seed {seed}")


def _orthonormality_error(P: np.ndarray) -> float:
    return float(np.max(np.abs(P.T @ P - np.eye(P.shape[1]))))


def sample_sequence(ts: TokenSet, alpha: float, n: int, rng: np.random.Generator) -> Sequence:
    """Draw one labeled sequence from the data model."""
    if not 0 < alpha < 0.25:
        raise InvalidArgumentError(f"alpha must be in (0, 0.25), not {alpha}")
    label = 1 if rng.random() < 0.5 else -1
    less_prevalent = rng.random() < alpha
    position = int(rng.integers(n))
    irrelevant = ts.irrelevant_indices
    tokens = irrelevant[rng.integers(len(irrelevant), size=n)]
    signs = np.ones(n)
    tokens[position] = ts.o1_index if label > 0 else ts.o2_index
    signs[position] = 1.0 if less_prevalent else -1.0
    return Sequence(
        basis=ts.P,
        tokens=tokens,
        signs=signs,
        label=label,
        relevant_position=position,
    )


def sample_sequences(
    ts: TokenSet,
    alpha: float,
    n: int,
    count: int,
    rng: np.random.Generator,
) -> list[Sequence]:
    return [sample_sequence(ts, alpha, n, rng) for _ in range(count)]


def random_model(
    k: int,
    m: int,
    d: int,
    l: int,
    init_std: float,
    rng: np.random.Generator,
) -> MoEModel:
    """Gaussian initialization; the first k/2 experts are positively connected."""
    routers = rng.normal(0.0, init_std, size=(k, d))
    experts = rng.normal(0.0, init_std, size=(k, m, d))
    signs = np.where(np.arange(k) < k // 2, 1.0, -1.0)
    return MoEModel(routers=routers, experts=experts, signs=signs, l=l)


def stack(sequences: list[Sequence]) -> tuple[np.ndarray, np.ndarray]:
    """Token tensor (B x n x d) and labels (B) for a batch of sequences."""
    if not sequences:
        raise InvalidArgumentError("empty batch of sequences")
    n = sequences[0].n
    if any(seq.n != n for seq in sequences):
        raise ShapeMismatchError("sequences in a batch must have the same length")
    X = np.stack([seq.x for seq in sequences])
    y = np.array([seq.label for seq in sequences], dtype=np.float64)
    return X, y


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def route(model: MoEModel, X: np.ndarray) -> Routing:
    """Expert-choice routing of a B x n x d batch.

    Ties in routing score go to the lower sequence position.
    """
    if X.shape[-1] != model.d:
        raise ShapeMismatchError(f"tokens have dimension {X.shape[-1]}, model has {model.d}")
    if model.l > X.shape[1]:
        raise InvalidArgumentError(f"can't select {model.l} of {X.shape[1]} tokens")
    scores = np.einsum("bnd,kd->bkn", X, model.routers)
    selected = np.argsort(-scores, axis=-1, kind="stable")[..., : model.l]
    top = np.take_along_axis(scores, selected, axis=-1)
    return Routing(selected=selected, gating=softmax(top))


def gather(X: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """The B x l x d token vectors at `positions` (B x l) of each sequence."""
    return X[np.arange(X.shape[0])[:, None], positions]


def expert_outputs(model: MoEModel, X: np.ndarray, routing: Routing) -> np.ndarray:
    """Summed ReLU activations (B x k x l) of every routed token."""
    B = X.shape[0]
    acts = np.empty((B, model.k, model.l))
    for s in range(model.k):
        Xs = gather(X, routing.selected[:, s, :])
        acts[:, s, :] = np.maximum(Xs @ model.experts[s].T, 0.0).sum(axis=-1)
    return acts


def batch_output(model: MoEModel, X: np.ndarray) -> np.ndarray:
    """Model outputs f(x) for a B x n x d batch."""
    routing = route(model, X)
    acts = expert_outputs(model, X, routing)
    return np.einsum("k,bkl->b", model.signs, routing.gating * acts)


def forward(model: MoEModel, seq: Sequence) -> ForwardResult:
    """Evaluate the model on one sequence, keeping the routing details."""
    X = seq.x[None]
    routing = route(model, X)
    acts = expert_outputs(model, X, routing)
    f = float(np.einsum("k,kl->", model.signs, routing.gating[0] * acts[0]))
    return ForwardResult(
        f=f,
        selected=routing.selected[0],
        gating=routing.gating[0],
        activations=acts[0],
    )
