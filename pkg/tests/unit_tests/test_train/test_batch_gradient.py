"""Test suite for the composed batch gradient: objective, position parameters and network together."""

import contextlib

import mock
import numpy as np
import pytest

import tinyultr.losses
import tinyultr.model
import tinyultr.train

from tinyultr.losses import LossKind, LossSpec
from tinyultr.propensity import PropensityCurve, PropensityMethod

from conftest import make_session

N_RANKS = 6
N_FEATURES = 5
STEP = 1e-7

# Targets and weights the objectives hold constant within a step.
HELD = ("regression_em_targets", "dla_weights")


def _sessions(n=20, seed=17):
    rng = np.random.default_rng(seed)
    sessions = []

    for i in range(n):
        size = int(rng.integers(2, 6))

        if i % 2:
            ranks = np.sort(rng.choice(np.arange(1, N_RANKS + 1), size=size, replace=False))
        else:
            ranks = np.arange(1, size + 1)

        clicks = np.zeros(size, dtype=np.int64)
        clicks[rng.choice(size, size=int(rng.integers(1, size)), replace=False)] = 1

        sessions.append(make_session(i, clicks, rng.normal(size=(size, N_FEATURES)), ranks))

    return sessions


def _model(kind, hidden_dims):
    rng = np.random.default_rng(29)
    model = tinyultr.model.init_model(
        N_FEATURES, hidden_dims, n_ranks=N_RANKS, seed=3, pairwise=kind is LossKind.PAIR_DEBIAS
    )

    for name, value in model.position_params.items():
        if name == tinyultr.model.POSITION_LOGITS:
            value[:] = rng.normal(size=value.shape)
        else:
            value[:] = rng.uniform(0.5, 1.5, size=value.shape)

    return model


def _spec(kind):
    curve = None

    if kind.needs_curve:
        curve = PropensityCurve(1.0 / np.arange(1, N_RANKS + 1), PropensityMethod.GROUND_TRUTH)

    return LossSpec(kind, curve=curve, l1_weight=0.01)


def _recorder(name, recorded):
    original = getattr(tinyultr.losses, name)

    def record(*args, **kwargs):
        result = original(*args, **kwargs)
        recorded[name].append(result)

        return result

    return record


def _patched(side_effects):
    stack = contextlib.ExitStack()

    for name, side_effect in side_effects.items():
        stack.enter_context(mock.patch(f"tinyultr.losses.{name}", side_effect=side_effect))

    return stack


def _central_differences(model, total):
    result = {}

    for name, value in model.params.items():
        numeric = np.zeros_like(value)

        for idx in np.ndindex(value.shape):
            original = value[idx]

            value[idx] = original + STEP
            plus = total()
            value[idx] = original - STEP
            minus = total()
            value[idx] = original

            numeric[idx] = (plus - minus) / (2.0 * STEP)

        result[name] = numeric

    return result


@pytest.mark.parametrize(
    "hidden_dims",
    [(), (64,), pytest.param((32,) * 4, marks=pytest.mark.slow)],
    ids=["linear", "one hidden layer", "four hidden layers"],
)
@pytest.mark.parametrize("kind", list(LossKind), ids=LossKind.values())
def test_batch_gradient_matches_central_differences(kind, hidden_dims):
    sessions = _sessions()
    model = _model(kind, hidden_dims)
    spec = _spec(kind)
    recorded = {name: [] for name in HELD}

    with _patched({name: _recorder(name, recorded) for name in HELD}):
        __, grads = tinyultr.train.batch_gradient(model, sessions, spec)

    def total():
        with _patched({name: list(values) for name, values in recorded.items()}):
            return tinyultr.train.batch_gradient(model, sessions, spec)[0].sum()

    numeric = _central_differences(model, total)

    assert list(grads) == list(model.params)

    for name, value in numeric.items():
        np.testing.assert_allclose(grads[name], value, rtol=1e-4, atol=1e-5, err_msg=name)


@pytest.mark.parametrize(
    "kind,names",
    [
        (LossKind.TWO_TOWER, [tinyultr.model.POSITION_LOGITS]),
        (LossKind.REGRESSION_EM, [tinyultr.model.POSITION_LOGITS]),
        (LossKind.DLA, [tinyultr.model.POSITION_LOGITS]),
        (LossKind.PAIR_DEBIAS, [tinyultr.model.PROPENSITIES_PLUS, tinyultr.model.PROPENSITIES_MINUS]),
    ],
    ids=["two-tower", "regression-em", "dla", "pair-debias"],
)
def test_batch_gradient_keeps_position_gradients(kind, names):
    sessions = _sessions()
    model = _model(kind, (8,))
    spec = _spec(kind)

    __, grads = tinyultr.train.batch_gradient(model, sessions, spec)
    expected = {name: np.zeros(N_RANKS) for name in names}
    scores = model.forward(np.concatenate([session.features for session in sessions]))
    start = 0

    for session in sessions:
        stop = start + len(session)
        result = tinyultr.losses.compute(
            spec, scores[start:stop], session.clicks, session.ranks, model.position_params
        )

        for name in names:
            expected[name] += result.d_params[name]

        start = stop

    for name in names:
        np.testing.assert_allclose(grads[name], expected[name], err_msg=name)
        assert np.any(grads[name] != 0.0)
