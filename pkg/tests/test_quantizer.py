import numpy as np
import pytest

from expertbits.errors import InvalidArgumentError, NonFiniteError, ShapeMismatchError
from expertbits.quantizer import (
    MODES,
    quant_params,
    quantize_dequantize,
    quantize_with_params,
    reconstruction_report,
)

from helpers import data_cases


@pytest.mark.parametrize("case", data_cases("quantizer", "quant_params"))
def test_quant_params(case):
    params = quant_params(case["group"], case["bits"])
    assert params.bits == case["bits"]
    assert params.delta == case["delta"]
    assert params.zero_point == case["zero_point"]


@pytest.mark.parametrize("case", data_cases("quantizer", "quantize"))
def test_quantize_column(case):
    W = np.array(case["column"], dtype=float)[:, None]
    W_hat = quantize_dequantize(W, case["bits"], axis="column", mode=case["mode"])
    assert W_hat[:, 0].tolist() == case["expected"]
    # The same group laid out as a row.
    W_hat_row = quantize_dequantize(W.T, case["bits"], axis="row", mode=case["mode"])
    assert W_hat_row[0].tolist() == case["expected"]


@pytest.mark.parametrize("bits", [0, -1, 2.5])
def test_bad_bits(bits):
    with pytest.raises(InvalidArgumentError):
        quant_params([0, 1], bits)
    with pytest.raises(InvalidArgumentError):
        quantize_dequantize(np.eye(2), bits)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite(bad):
    with pytest.raises(NonFiniteError) as exc_info:
        quant_params([0, bad], 2)
    assert exc_info.value.code == "non-finite"
    with pytest.raises(NonFiniteError):
        quantize_dequantize(np.array([[0.0, bad]]), 2)


def test_bad_choices():
    with pytest.raises(InvalidArgumentError):
        quantize_dequantize(np.eye(2), 2, axis="diagonal")
    with pytest.raises(InvalidArgumentError):
        quantize_dequantize(np.eye(2), 2, mode="stochastic")
    with pytest.raises(InvalidArgumentError):
        quant_params([], 2)


def test_groups_are_independent():
    W = np.array([[0.0, 1.0, 2.0, 3.0], [0.0, 10.0, 20.0, 30.0]])
    W_hat, params = quantize_with_params(W, 2, axis="row")
    assert [p.delta for p in params] == [1.0, 10.0]
    np.testing.assert_array_equal(W_hat, W)
    W_hat, params = quantize_with_params(W, 1, axis="column")
    assert len(params) == 4
    assert all(p.group_axis == "column" for p in params)


def test_modes_agree_on_grid_minimum():
    # min is 0, a multiple of delta, so the zero point changes nothing.
    W = np.array([[0.0, 1.2, 3.0]])
    affine = quantize_dequantize(W, 2, mode="affine")
    free = quantize_dequantize(W, 2, mode="zero_point_free")
    np.testing.assert_array_equal(affine, [[0.0, 1.0, 3.0]])
    np.testing.assert_array_equal(affine, free)


def test_grid_values_are_exact():
    # Dequantized values always lie on multiples of delta, so the grid's
    # minimum has to be one too.
    rng = np.random.default_rng(17)
    base = 0.25 * rng.integers(-20, 20, size=(5, 1))
    W = base + 0.25 * rng.integers(0, 16, size=(5, 12))
    # Make sure every row spans the whole grid.
    W[:, 0] = base[:, 0]
    W[:, 1] = base[:, 0] + 0.25 * 15
    W_hat = quantize_dequantize(W, 4, axis="row")
    np.testing.assert_allclose(W_hat, W, rtol=0, atol=1e-12)


def test_report_identity():
    W = np.arange(12, dtype=float).reshape(3, 4)
    report = reconstruction_report(W, W, [])
    assert report.max_abs_error == 0
    assert report.frobenius_error == 0
    assert report.distinct_levels_per_group == [4, 4, 4]


def test_report_worked_example():
    W = np.array([[0.0, 0.4, 1.0]])
    W_hat, params = quantize_with_params(W, 1, axis="row")
    report = reconstruction_report(W, W_hat, params)
    assert report.max_abs_error == pytest.approx(0.4)
    assert report.frobenius_error == pytest.approx(0.4)
    assert report.within_bound()
    assert report.to_json()["max_distinct_levels"] == 2
    assert report.to_json()["levels_within_bits"]


@pytest.mark.parametrize("mode", MODES)
def test_levels_at_rounding_ties(mode):
    W = np.array([[0.5, 1.2, 2.2, 3.2, 3.5]])
    W_hat, params = quantize_with_params(W, 2, axis="row", mode=mode)
    report = reconstruction_report(W, W_hat, params)
    assert report.distinct_levels_per_group == [4]
    assert report.max_abs_error == pytest.approx(0.5)
    assert report.within_bound()
    assert report.levels_within_bits()
    # Rounding both ties outward would use a fifth level.
    unclamped = reconstruction_report(W, np.array([[0.0, 1, 2, 3, 4]]), params)
    assert not unclamped.levels_within_bits()
    assert not unclamped.to_json()["levels_within_bits"]


def test_report_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        reconstruction_report(np.zeros((2, 3)), np.zeros((3, 2)), [])


def random_matrix(rng: np.random.Generator, kind: str) -> np.ndarray:
    shape = tuple(rng.integers(1, 9, size=2))
    if kind == "gaussian":
        return rng.normal(0, rng.uniform(0.01, 10), size=shape)
    if kind == "uniform":
        return rng.uniform(-5, 5, size=shape)
    W = rng.normal(size=shape)
    W[rng.random(shape[0]) < 0.5] = rng.normal()
    return W


@pytest.mark.parametrize("mode", ["affine", "zero_point_free"])
@pytest.mark.parametrize("axis", ["row", "column"])
def test_error_bound_suite(axis, mode):
    rng = np.random.default_rng([1, len(axis), len(mode)])
    kinds = ["gaussian", "uniform", "constant-rows"]
    for i in range(1000):
        W = random_matrix(rng, kinds[i % 3])
        bits = int(rng.integers(1, 9))
        W_hat, params = quantize_with_params(W, bits, axis=axis, mode=mode)
        report = reconstruction_report(W, W_hat, params)
        assert report.within_bound(), (i, bits)
        assert max(report.distinct_levels_per_group) <= 2**bits
        for err, p in zip(report.per_group_max_abs_error, params):
            if p.delta == 0:
                assert err == 0
        again = quantize_dequantize(W_hat, bits, axis=axis, mode=mode)
        np.testing.assert_allclose(again, W_hat, rtol=1e-12, atol=1e-12 * np.abs(W).max())


def test_noise_is_symmetric():
    rng = np.random.default_rng(5)
    W = rng.normal(size=(200, 200))
    W_hat, params = quantize_with_params(W, 4, axis="column", mode="zero_point_free")
    noise = W_hat - W
    deltas = np.array([p.delta for p in params])
    assert np.all(np.abs(noise) <= deltas[None, :] / 2 * (1 + 1e-9))
    assert abs(np.mean(noise / deltas[None, :])) < 0.01
