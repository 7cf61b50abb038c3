"""Uniform quantize-dequantize of weight matrices.

Weights are split into groups (rows or columns).  Each group gets its own bin
size and zero point:

    delta = (max - min) / (2**bits - 1)
    z = -round(min / delta) - 2**(bits - 1)
    W_hat = delta * (round(W / delta + z) - z)

Rounding is round-half-to-even everywhere (``np.round``).  When a group edge
lands exactly on a rounding tie, both ends can round outward and give
2**bits + 1 codes, so codes are clamped to a window of 2**bits.  Away from
ties the clamp changes nothing, and clamped values stay within delta/2.  A
constant group has delta 0 and is passed through unchanged.
"""

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from expertbits.errors import InvalidArgumentError, ShapeMismatchError
from expertbits.utils import as_finite_array

Axis = Literal["column", "row"]
Mode = Literal["affine", "zero_point_free"]

AXES = ("column", "row")
MODES = ("affine", "zero_point_free")

# Relative slack when checking the delta/2 error bound in floating point.
BOUND_RTOL = 1e-9


@dataclass(frozen=True)
class QuantGroupParams:
    bits: int
    delta: float
    zero_point: int
    group_axis: Axis = "column"


@dataclass
class QuantReport:
    per_group_max_abs_error: list[float]
    frobenius_error: float
    distinct_levels_per_group: list[int]
    deltas: list[float] = field(default_factory=list)
    bits: int | None = None

    @property
    def max_abs_error(self) -> float:
        return max(self.per_group_max_abs_error, default=0.0)

    def within_bound(self) -> bool:
        """Does every group with delta > 0 stay within delta/2?"""
        for err, delta in zip(self.per_group_max_abs_error, self.deltas):
            if delta > 0 and err > delta / 2 * (1 + BOUND_RTOL):
                return False
        return True

    def levels_within_bits(self) -> bool:
        """Does every group use at most 2**bits distinct values?"""
        if self.bits is None:
            return True
        return max(self.distinct_levels_per_group, default=0) <= 2**self.bits

    def to_json(self) -> dict:
        return {
            "max_abs_error": self.max_abs_error,
            "frobenius_error": self.frobenius_error,
            "max_distinct_levels": max(self.distinct_levels_per_group, default=0),
            "within_bound": self.within_bound(),
            "levels_within_bits": self.levels_within_bits(),
        }


def _check_bits(bits: int) -> None:
    if int(bits) != bits or bits < 1:
        raise InvalidArgumentError(f"bits must be an integer >= 1, not {bits!r}")


def _check_choice(value: str, choices: tuple[str, ...], what: str) -> None:
    if value not in choices:
        raise InvalidArgumentError(f"{what} must be one of {', '.join(choices)}, not {value!r}")


def _as_groups(W: np.ndarray, axis: Axis) -> np.ndarray:
    """View W so that each row is one quantization group."""
    return W.T if axis == "column" else W


def _group_stats(G: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-group bin size and zero point for a groups-as-rows matrix."""
    lo = G.min(axis=1)
    hi = G.max(axis=1)
    delta = (hi - lo) / (2**bits - 1)
    safe = np.where(delta > 0, delta, 1.0)
    zero_point = np.where(delta > 0, -np.round(lo / safe) - 2 ** (bits - 1), 0.0)
    return delta, zero_point


def quant_params(group, bits: int, group_axis: Axis = "column") -> QuantGroupParams:
    """Bin size and zero point for one group of weights."""
    _check_bits(bits)
    values = as_finite_array(group, "quantization group").ravel()
    if values.size == 0:
        raise InvalidArgumentError("quantization group is empty")
    delta, zero_point = _group_stats(values[None, :], bits)
    return QuantGroupParams(
        bits=int(bits),
        delta=float(delta[0]),
        zero_point=int(zero_point[0]),
        group_axis=group_axis,
    )


def quantize_with_params(
    W,
    bits: int,
    axis: Axis = "row",
    mode: Mode = "affine",
) -> tuple[np.ndarray, list[QuantGroupParams]]:
    """Quantize-dequantize W, also returning the parameters of each group."""
    _check_bits(bits)
    _check_choice(axis, AXES, "axis")
    _check_choice(mode, MODES, "mode")
    W = as_finite_array(W, "weight matrix")
    if W.ndim != 2 or W.size == 0:
        raise InvalidArgumentError(f"expected a non-empty matrix, got shape {W.shape}")

    G = _as_groups(W, axis)
    delta, zero_point = _group_stats(G, bits)
    safe = np.where(delta > 0, delta, 1.0)[:, None]
    levels = 2**bits
    if mode == "affine":
        z = zero_point[:, None]
        half = levels // 2
        codes = np.clip(np.round(G / safe + z), -half, half - 1)
        G_hat = safe * (codes - z)
    else:
        low = np.ceil(G.min(axis=1, keepdims=True) / safe - 0.5)
        codes = np.clip(np.round(G / safe), low, low + levels - 1)
        G_hat = safe * codes
    G_hat = np.where(delta[:, None] > 0, G_hat, G)

    params = [
        QuantGroupParams(bits=int(bits), delta=float(d), zero_point=int(z), group_axis=axis)
        for d, z in zip(delta, zero_point)
    ]
    W_hat = G_hat.T if axis == "column" else G_hat
    return np.ascontiguousarray(W_hat), params


def quantize_dequantize(W, bits: int, axis: Axis = "row", mode: Mode = "affine") -> np.ndarray:
    """Quantize W to `bits` per group and map it back to reals."""
    return quantize_with_params(W, bits, axis, mode)[0]


def reconstruction_report(W, W_hat, params: list[QuantGroupParams]) -> QuantReport:
    """Measure how far W_hat is from W, group by group."""
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if W.shape != W_hat.shape or W.ndim != 2:
        raise ShapeMismatchError(f"can't compare shapes {W.shape} and {W_hat.shape}")
    axis = params[0].group_axis if params else "row"
    G = _as_groups(W, axis)
    G_hat = _as_groups(W_hat, axis)
    if params and len(params) != G.shape[0]:
        raise ShapeMismatchError(f"{len(params)} group parameters for {G.shape[0]} groups")

    errors = np.abs(G - G_hat)
    return QuantReport(
        per_group_max_abs_error=[float(e) for e in errors.max(axis=1)],
        frobenius_error=float(np.linalg.norm(W - W_hat)),
        distinct_levels_per_group=[len(np.unique(row)) for row in G_hat],
        deltas=[p.delta for p in params],
        bits=params[0].bits if params else None,
    )
