"""Test suite for propensity curves."""

import json

import numpy as np
import pytest

from tinyultr.exceptions import EstimationError, ParseError, ValidationError
from tinyultr.propensity import PropensityCurve, PropensityMethod


def test_normalized():
    curve = PropensityCurve.normalized([0.8, 0.4, 0.2, 0.0], PropensityMethod.ALL_PAIRS)

    np.testing.assert_allclose(curve.values, [1.0, 0.5, 0.25, 1e-6])
    assert curve.n_ranks == len(curve) == 4


def test_normalized_clips_above_one():
    curve = PropensityCurve.normalized([0.5, 0.75], PropensityMethod.PIVOT_RANK)

    np.testing.assert_array_equal(curve.values, [1.0, 1.0])


@pytest.mark.parametrize("values", [[], [0.0, 0.5], [np.nan, 0.5]], ids=["empty", "zero", "nan"])
def test_normalized_invalid(values):
    with pytest.raises(EstimationError):
        PropensityCurve.normalized(values, PropensityMethod.ALL_PAIRS)


@pytest.mark.parametrize(
    "values",
    [[], [0.9, 0.5], [1.0, 0.0], [1.0, 1.2]],
    ids=["empty", "rank one", "zero", "above one"],
)
def test_curve_invalid(values):
    with pytest.raises(ValidationError):
        PropensityCurve(values, PropensityMethod.GROUND_TRUTH)


def test_curve_read_only():
    curve = PropensityCurve([1.0, 0.5], "ground-truth")

    assert curve.method == PropensityMethod.GROUND_TRUTH

    with pytest.raises(ValueError):
        curve.values[1] = 0.3


def test_at():
    curve = PropensityCurve([1.0, 0.5, 0.25], PropensityMethod.GROUND_TRUTH)

    np.testing.assert_array_equal(curve.at([1, 3, 2]), [1.0, 0.25, 0.5])
    np.testing.assert_array_equal(curve.at([4, 10]), [0.25, 0.25])

    with pytest.raises(ValueError):
        curve.at([0])


def test_save_and_load(fs):
    curve = PropensityCurve([1.0, 0.5, 0.25], PropensityMethod.ADJACENT_PAIR)
    curve.save("/curves/adjacent.json")

    with open("/curves/adjacent.json", "r") as fp:
        assert json.load(fp) == {"method": "adjacent-pair", "values": [1.0, 0.5, 0.25]}

    result = PropensityCurve.load("/curves/adjacent.json")

    assert result.method == PropensityMethod.ADJACENT_PAIR
    np.testing.assert_array_equal(result.values, curve.values)


@pytest.mark.parametrize(
    "data",
    [{"values": [1.0]}, {"method": "guess", "values": [1.0]}, {"method": "rem"}],
    ids=["method missing", "method unknown", "values"],
)
def test_from_dict_malformed(data):
    with pytest.raises(ParseError):
        PropensityCurve.from_dict(data)


def test_from_dict_invalid_values():
    with pytest.raises(ValidationError):
        PropensityCurve.from_dict({"method": "rem", "values": [1.0, 2.0]})


def test_load_missing(fs):
    with pytest.raises(FileNotFoundError):
        PropensityCurve.load("/curves/missing.json")


def test_harvesting_methods():
    assert PropensityMethod.harvesting() == [
        PropensityMethod.ADJACENT_PAIR,
        PropensityMethod.PIVOT_RANK,
        PropensityMethod.ALL_PAIRS,
    ]
    assert "pair-debias" in PropensityMethod.values()
