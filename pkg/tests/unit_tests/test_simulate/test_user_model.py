"""Test suite for the simulated user and logging policy."""

import numpy as np
import pytest

import tinyultr.simulate

from tinyultr.exceptions import ValidationError
from tinyultr.propensity import PropensityMethod
from tinyultr.simulate import LoggingPolicy, PolicyKind, UserModelConfig


@pytest.mark.parametrize(
    "k,eta,expected",
    [(1, 1.0, 1.0), (2, 1.0, 0.5), (4, 2.0, 0.0625), (7, 0.0, 1.0), (3, 0.5, 3 ** -0.5)],
    ids=["top", "second", "squared", "no bias", "mild"],
)
def test_position_bias(k, eta, expected):
    assert tinyultr.simulate.position_bias(k, eta) == pytest.approx(expected)


def test_position_bias_vector():
    result = tinyultr.simulate.position_bias(np.array([1, 2, 4]), 2.0)

    np.testing.assert_allclose(result, [1.0, 0.25, 0.0625])


def test_position_bias_invalid_rank():
    with pytest.raises(ValueError):
        tinyultr.simulate.position_bias(0, 1.0)


@pytest.mark.parametrize(
    "grade,expected",
    [(0, 0.1), (1, 0.16), (2, 0.28), (4, 1.0)],
    ids=["irrelevant", "marginal", "relevant", "perfect"],
)
def test_relevance_to_click_prob(grade, expected):
    assert tinyultr.simulate.relevance_to_click_prob(grade, UserModelConfig()) == pytest.approx(expected)


@pytest.mark.parametrize("grade", [-1, 5], ids=["below", "above"])
def test_relevance_to_click_prob_invalid(grade):
    with pytest.raises(ValueError):
        tinyultr.simulate.relevance_to_click_prob(grade, UserModelConfig())


@pytest.mark.parametrize(
    "kwargs",
    [{"eta": -0.5}, {"max_rank": 0}, {"epsilon_minus": 1.0}, {"swap_fraction": 1.5}, {"max_grade": 0}],
    ids=["eta", "max_rank", "epsilon_minus", "swap_fraction", "max_grade"],
)
def test_user_model_invalid(kwargs):
    with pytest.raises(ValidationError):
        UserModelConfig(**kwargs)


def test_user_model_from_dict():
    cfg = UserModelConfig.from_dict({"eta": 2.0, "max_rank": 5})

    assert cfg == UserModelConfig(eta=2.0, max_rank=5)

    with pytest.raises(ValidationError):
        UserModelConfig.from_dict({"severity": 2.0})


def test_logging_policy_kind():
    assert LoggingPolicy("feature-linear").kind == PolicyKind.FEATURE_LINEAR
    assert LoggingPolicy.from_dict({"noise_sigma": 0.5}).kind == PolicyKind.ORACLE_NOISY


@pytest.mark.parametrize(
    "kwargs", [{"kind": "lambdamart"}, {"noise_sigma": -1.0}], ids=["kind", "noise"]
)
def test_logging_policy_invalid(kwargs):
    with pytest.raises(ValidationError):
        LoggingPolicy(**kwargs)


def test_policy_scores_oracle(judged):
    query = judged.queries[1]
    rng = np.random.default_rng(0)

    scores = tinyultr.simulate.policy_scores(LoggingPolicy(noise_sigma=0.0), query, rng)

    np.testing.assert_array_equal(scores, [4.0, 1.0, 3.0])


def test_policy_scores_feature_linear(judged):
    policy = LoggingPolicy(PolicyKind.FEATURE_LINEAR, noise_sigma=0.0, weight_seed=5)
    query = judged.queries[1]

    a = tinyultr.simulate.policy_scores(policy, query, np.random.default_rng(0))
    b = tinyultr.simulate.policy_scores(policy, query, np.random.default_rng(1))

    assert a.shape == (3,)
    np.testing.assert_array_equal(a, b)


def test_ground_truth():
    curve = tinyultr.simulate.ground_truth(UserModelConfig(eta=1.0, max_rank=4))

    assert curve.method == PropensityMethod.GROUND_TRUTH
    np.testing.assert_allclose(curve.values, [1.0, 0.5, 1 / 3, 0.25])


def test_ground_truth_no_bias():
    curve = tinyultr.simulate.ground_truth(UserModelConfig(eta=0.0, max_rank=3))

    np.testing.assert_array_equal(curve.values, [1.0, 1.0, 1.0])
