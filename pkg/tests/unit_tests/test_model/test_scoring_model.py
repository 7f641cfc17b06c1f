"""Test suite for the scoring model."""

import json
import os

import numpy as np
import pytest
import scipy.special

import tinyultr.model

from tinyultr.exceptions import ParseError


@pytest.fixture
def features():
    return np.random.default_rng(0).normal(size=(6, 4))


def _numeric_grad(model, features, upstream, name, train_mode=False, seed=0, eps=1e-6):
    param = model.params[name]
    result = np.zeros_like(param)

    for index in np.ndindex(param.shape):
        original = param[index]
        param[index] = original + eps
        up = upstream @ model.forward(features, train_mode, seed)
        param[index] = original - eps
        down = upstream @ model.forward(features, train_mode, seed)
        param[index] = original
        result[index] = (up - down) / (2.0 * eps)

    return result


def test_init_model():
    model = tinyultr.model.init_model(4, (8, 3), n_ranks=5, seed=1)

    assert model.layer_dims == [(4, 8), (8, 3), (3, 1)]
    assert model.params["weight_0"].shape == (4, 8)
    assert np.all(np.abs(model.params["weight_0"]) <= np.sqrt(6.0 / 4))
    np.testing.assert_array_equal(model.params["bias_1"], np.zeros(3))
    np.testing.assert_allclose(model.position_logits, np.full(5, scipy.special.logit(0.9)))
    assert model.n_ranks == 5
    assert model.decay_names == {"weight_0", "weight_1", "weight_2"}
    assert model.network_names == ["weight_0", "bias_0", "weight_1", "bias_1", "weight_2", "bias_2"]


def test_init_model_pairwise():
    model = tinyultr.model.init_model(2, (), n_ranks=3, pairwise=True)

    assert model.position_logits is None
    np.testing.assert_array_equal(model.params[tinyultr.model.PROPENSITIES_PLUS], np.ones(3))
    np.testing.assert_array_equal(model.params[tinyultr.model.PROPENSITIES_MINUS], np.ones(3))
    assert sorted(model.position_params) == [tinyultr.model.PROPENSITIES_MINUS, tinyultr.model.PROPENSITIES_PLUS]


def test_init_model_deterministic():
    a = tinyultr.model.init_model(4, (8,), seed=3)
    b = tinyultr.model.init_model(4, (8,), seed=3)
    c = tinyultr.model.init_model(4, (8,), seed=4)

    np.testing.assert_array_equal(a.params["weight_0"], b.params["weight_0"])
    assert not np.array_equal(a.params["weight_0"], c.params["weight_0"])


@pytest.mark.parametrize(
    "input_dim,hidden_dims", [(0, ()), (3, (4, 0))], ids=["input", "hidden"]
)
def test_init_model_invalid(input_dim, hidden_dims):
    with pytest.raises(ValueError):
        tinyultr.model.init_model(input_dim, hidden_dims)


def test_log1p_transform():
    np.testing.assert_allclose(
        tinyultr.model.log1p_transform([-np.e + 1.0, 0.0, 3.0]), [-1.0, 0.0, np.log(4.0)]
    )


def test_forward_linear(features):
    model = tinyultr.model.init_model(4, (), seed=0)
    model.params["bias_0"][:] = 0.5

    expected = tinyultr.model.log1p_transform(features) @ model.params["weight_0"][:, 0] + 0.5

    np.testing.assert_allclose(model.forward(features), expected)


def test_forward_shape(features):
    model = tinyultr.model.init_model(4, (8, 8), seed=0)

    assert model.forward(features).shape == (6,)

    with pytest.raises(ValueError):
        model.forward(features[:, :3])


@pytest.mark.parametrize("hidden_dims", [(), (8,), (8, 8)], ids=["linear", "one layer", "two layers"])
def test_forward_permutation_equivariant(features, hidden_dims):
    model = tinyultr.model.init_model(4, hidden_dims, seed=2)
    order = np.random.default_rng(1).permutation(len(features))

    np.testing.assert_allclose(model.forward(features[order]), model.forward(features)[order], rtol=1e-12)


@pytest.mark.parametrize("hidden_dims", [(), (5,), (6, 3)], ids=["linear", "one layer", "two layers"])
def test_grad_matches_finite_differences(features, hidden_dims):
    model = tinyultr.model.init_model(4, hidden_dims, seed=2)

    for name in model.network_names:
        model.params[name] = model.params[name] + 0.01 * np.arange(model.params[name].size).reshape(
            model.params[name].shape
        )

    upstream = np.random.default_rng(1).normal(size=6)
    grads = model.grad(features, upstream)

    assert sorted(grads) == sorted(model.network_names)

    for name in model.network_names:
        np.testing.assert_allclose(
            grads[name], _numeric_grad(model, features, upstream, name), rtol=1e-4, atol=1e-6
        )


def test_grad_with_dropout(features):
    model = tinyultr.model.init_model(4, (16,), dropout=0.5, seed=2)
    upstream = np.ones(6)
    seed = (7, 1, 2)
    grads = model.grad(features, upstream, train_mode=True, seed=seed)

    np.testing.assert_allclose(
        grads["weight_0"],
        _numeric_grad(model, features, upstream, "weight_0", train_mode=True, seed=seed),
        rtol=1e-4,
        atol=1e-6,
    )


def test_dropout(features):
    model = tinyultr.model.init_model(4, (32,), dropout=0.5, seed=0)

    np.testing.assert_array_equal(model.forward(features, True, 1), model.forward(features, True, 1))
    assert not np.array_equal(model.forward(features, True, 1), model.forward(features, True, 2))
    np.testing.assert_array_equal(model.forward(features), model.forward(features, False, 9))


def test_dropout_invalid():
    with pytest.raises(ValueError):
        tinyultr.model.init_model(4, (8,), dropout=1.0)


def test_grad_invalid_upstream(features):
    model = tinyultr.model.init_model(4, (), seed=0)

    with pytest.raises(ValueError):
        model.grad(features, np.ones(5))


def test_copy_is_independent():
    model = tinyultr.model.init_model(2, (3,), n_ranks=2, seed=0)
    clone = model.copy()
    clone.params["weight_0"][0, 0] += 1.0
    clone.params[tinyultr.model.POSITION_LOGITS][1] = 0.0

    assert model.params["weight_0"][0, 0] != clone.params["weight_0"][0, 0]
    assert model.position_logits[1] == pytest.approx(scipy.special.logit(0.9))


def test_save_and_load(fs, features):
    model = tinyultr.model.init_model(4, (5, 3), n_ranks=4, dropout=0.2, seed=5)

    written = tinyultr.model.save(model, "/models/naive.json")

    assert written == ["/models/naive.json", "/models/naive.bin"]

    result = tinyultr.model.load("/models/naive.json")

    assert result.hidden_dims == (5, 3)
    assert result.dropout == 0.2
    assert list(result.params) == list(model.params)

    for name, value in model.params.items():
        np.testing.assert_array_equal(result.params[name], value)

    np.testing.assert_array_equal(result.forward(features), model.forward(features))


def test_load_missing_blob(fs):
    tinyultr.model.save(tinyultr.model.init_model(2, ()), "/models/m.json")
    os.remove("/models/m.bin")

    with pytest.raises(FileNotFoundError):
        tinyultr.model.load("/models/m.json")


def test_load_not_a_checkpoint(fs):
    fs.create_file("/models/other.json", contents=json.dumps({"format": "other"}))

    with pytest.raises(ParseError):
        tinyultr.model.load("/models/other.json")


def test_load_truncated_blob(fs):
    tinyultr.model.save(tinyultr.model.init_model(2, (3,)), "/models/m.json")

    with open("/models/m.bin", "rb") as fp:
        data = fp.read()

    with open("/models/m.bin", "wb") as fp:
        fp.write(data + data[:8])

    with pytest.raises(ParseError):
        tinyultr.model.load("/models/m.json")
