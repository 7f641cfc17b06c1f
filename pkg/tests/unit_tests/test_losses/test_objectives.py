"""Test suite for the training objectives."""

import itertools

import numpy as np
import pytest
import scipy.special

import tinyultr.losses

from tinyultr.exceptions import ValidationError
from tinyultr.propensity import PropensityCurve, PropensityMethod

LN2 = np.log(2.0)
NAIVE_PAIR = (1.0 - 1.0 / np.log2(3.0)) * LN2


def _curve(values):
    return PropensityCurve(values, PropensityMethod.GROUND_TRUTH)


def test_naive_pointwise():
    loss, ds = tinyultr.losses.naive_pointwise([0.0], [1])

    assert loss == pytest.approx(LN2)
    np.testing.assert_allclose(ds, [-0.5])

    loss, ds = tinyultr.losses.naive_pointwise([0.0, 0.0], [1, 0])

    assert loss == pytest.approx(LN2)
    np.testing.assert_allclose(ds, [-0.25, 0.25])


def test_naive_pointwise_saturated():
    loss, ds = tinyultr.losses.naive_pointwise([800.0, -800.0], [1, 0])

    assert loss == pytest.approx(0.0)
    assert np.all(np.isfinite(ds))


def test_naive_pointwise_length_mismatch():
    with pytest.raises(ValueError):
        tinyultr.losses.naive_pointwise([0.0, 1.0], [1])


def test_naive_listwise():
    loss, __ = tinyultr.losses.naive_listwise([0.0, 0.0, 0.0], [1, 0, 0])

    assert loss == pytest.approx(np.log(3.0))


def test_naive_listwise_no_clicks():
    loss, ds = tinyultr.losses.naive_listwise([0.3, -1.0], [0, 0])

    assert loss == 0.0
    np.testing.assert_array_equal(ds, [0.0, 0.0])


def test_naive_listwise_translation_invariance():
    s = np.array([0.5, -1.0, 2.0, 0.1])
    c = np.array([1, 0, 1, 0])

    a = tinyultr.losses.naive_listwise(s, c)
    b = tinyultr.losses.naive_listwise(s + 17.0, c)

    assert a[0] == pytest.approx(b[0])
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_naive_lambdarank():
    loss, ds = tinyultr.losses.naive_lambdarank([0.0, 0.0], [1, 0])

    assert loss == pytest.approx(NAIVE_PAIR)
    assert loss == pytest.approx(0.2559, abs=1e-4)
    assert ds[0] < 0.0 < ds[1]
    assert ds.sum() == pytest.approx(0.0)


def test_naive_lambdarank_no_pairs():
    loss, ds = tinyultr.losses.naive_lambdarank([0.1, 0.4, -0.3], [1, 1, 1])

    assert loss == 0.0
    np.testing.assert_array_equal(ds, np.zeros(3))


def test_naive_lambdarank_separated():
    loss, __ = tinyultr.losses.naive_lambdarank([50.0, 0.0], [1, 0])

    assert loss == pytest.approx(0.0, abs=1e-15)


def test_two_tower():
    loss, ds, de = tinyultr.losses.two_tower([0.0], [0.0], [1])

    assert loss == pytest.approx(LN2)
    np.testing.assert_allclose(ds, [-0.5])
    np.testing.assert_allclose(de, [-0.5])


def test_two_tower_reduces_to_naive_pointwise():
    s = np.array([0.2, -1.5, 3.0])
    c = np.array([1, 0, 0])

    loss, ds, __ = tinyultr.losses.two_tower(s, np.zeros(3), c)
    expected = tinyultr.losses.naive_pointwise(s, c)

    assert loss == expected[0]
    np.testing.assert_array_equal(ds, expected[1])


def test_two_tower_unexamined():
    probs = tinyultr.losses.click_probabilities(
        tinyultr.losses.LossKind.TWO_TOWER, [5.0], [1], {"position_logits": np.array([-800.0])}
    )

    assert probs[0] == pytest.approx(0.0)


@pytest.mark.parametrize(
    "r,x", list(itertools.product([0.1, 0.5, 0.9], [0.2, 0.5, 0.95]))
)
def test_posteriors_match_enumeration(r, x):
    # Joint over (relevant, examined); a click needs both.
    joint = {(rel, exam): (r if rel else 1 - r) * (x if exam else 1 - x) for rel in (0, 1) for exam in (0, 1)}
    no_click = sum(p for (rel, exam), p in joint.items() if not (rel and exam))

    relevance, examination = tinyultr.losses.posteriors(scipy.special.logit(r), scipy.special.logit(x))

    assert relevance == pytest.approx(joint[(1, 0)] / no_click)
    assert examination == pytest.approx(joint[(0, 1)] / no_click)


def test_posteriors_closed_form_grid():
    r, x = np.meshgrid(np.linspace(0.05, 0.95, 20), np.linspace(0.05, 0.95, 20))

    relevance, examination = tinyultr.losses.posteriors(scipy.special.logit(r), scipy.special.logit(x))

    np.testing.assert_allclose(relevance, r * (1 - x) / (1 - r * x), rtol=0.0, atol=1e-12)
    np.testing.assert_allclose(examination, x * (1 - r) / (1 - r * x), rtol=0.0, atol=1e-12)


def test_posteriors_even_odds():
    relevance, examination = tinyultr.losses.posteriors(0.0, 0.0)

    assert relevance == pytest.approx(1.0 / 3.0)
    assert examination == pytest.approx(1.0 / 3.0)


def test_posteriors_certain_examination():
    relevance, __ = tinyultr.losses.posteriors(0.0, 800.0)

    assert relevance == pytest.approx(0.0)


def test_regression_em_clicked():
    s, e = np.array([0.3, -0.2]), np.array([1.0, 0.5])
    targets = tinyultr.losses.regression_em_targets(s, e, [1, 1])

    np.testing.assert_array_equal(targets[0], [1.0, 1.0])
    np.testing.assert_array_equal(targets[1], [1.0, 1.0])

    loss, __, __ = tinyultr.losses.regression_em(s, e, [1, 1])
    expected = tinyultr.losses.naive_pointwise(s, [1, 1])[0] + tinyultr.losses.naive_pointwise(e, [1, 1])[0]

    assert loss == pytest.approx(expected)


def test_regression_em_unclicked_targets():
    relevance, examination = tinyultr.losses.regression_em_targets([0.0], [0.0], [0])

    np.testing.assert_allclose(relevance, [1.0 / 3.0])
    np.testing.assert_allclose(examination, [1.0 / 3.0])


def test_ips_weights():
    np.testing.assert_allclose(tinyultr.losses.ips_weights([3], _curve([1.0, 0.5, 0.2])), [5.0])
    np.testing.assert_allclose(tinyultr.losses.ips_weights([2], _curve([1.0, 0.05])), [10.0])
    np.testing.assert_allclose(tinyultr.losses.ips_weights([1, 2], _curve([1.0, 0.05]), tau=1.0), [1.0, 1.0])


@pytest.mark.parametrize("tau", [0.0, 1.5], ids=["zero", "above one"])
def test_ips_weights_invalid_tau(tau):
    with pytest.raises(ValueError):
        tinyultr.losses.ips_weights([1], _curve([1.0]), tau)


def test_ips_listwise():
    loss, __ = tinyultr.losses.ips_listwise([0.0, 0.0], [0, 1], [1, 2], _curve([1.0, 0.5]))

    assert loss == pytest.approx(2.0 * LN2)
    assert loss == pytest.approx(1.3863, abs=1e-4)


def test_ips_pointwise_targets_above_one():
    loss, ds = tinyultr.losses.ips_pointwise([0.0], [1], [2], _curve([1.0, 0.25]))

    # Extended cross-entropy: -4 log 0.5 - (1 - 4) log 0.5.
    assert loss == pytest.approx(LN2 * (4.0 - 3.0))
    np.testing.assert_allclose(ds, [0.5 - 4.0])


@pytest.mark.parametrize(
    "ips,naive",
    [
        (tinyultr.losses.ips_pointwise, tinyultr.losses.naive_pointwise),
        (tinyultr.losses.ips_listwise, tinyultr.losses.naive_listwise),
    ],
    ids=["pointwise", "listwise"],
)
def test_ips_uniform_curve_reduces_to_naive(ips, naive):
    s = np.array([0.4, -0.7, 1.2, 0.0])
    c = np.array([0, 1, 1, 0])

    loss, ds = ips(s, c, [1, 2, 3, 4], _curve(np.ones(4)))
    expected = naive(s, c)

    assert loss == expected[0]
    np.testing.assert_array_equal(ds, expected[1])


def test_ips_listwise_translation_invariance():
    s = np.array([0.4, -0.7, 1.2])
    c = np.array([1, 0, 1])
    curve = _curve([1.0, 0.5, 0.2])

    a = tinyultr.losses.ips_listwise(s, c, [1, 2, 3], curve)
    b = tinyultr.losses.ips_listwise(s - 5.0, c, [1, 2, 3], curve)

    assert a[0] == pytest.approx(b[0])
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_dla_no_clicks():
    loss, ds, de, components = tinyultr.losses.dla([0.5, 0.1], [0.2, -0.3], [0, 0], [1, 2])

    assert loss == 0.0
    np.testing.assert_array_equal(ds, [0.0, 0.0])
    np.testing.assert_array_equal(de, [0.0, 0.0])
    assert components == {"relevance": 0.0, "examination": 0.0}


def test_dla_uniform_examination():
    s = np.array([0.5, -0.2, 1.0])
    c = np.array([0, 1, 1])

    __, ds, __, components = tinyultr.losses.dla(s, np.zeros(3), c, [1, 2, 3])
    expected = tinyultr.losses.naive_listwise(s, c)

    assert components["relevance"] == pytest.approx(expected[0])
    np.testing.assert_allclose(ds, expected[1])


def test_dla_symmetry():
    s = np.array([0.5, -0.2, 1.0])
    e = np.array([1.5, 0.3, -0.4])
    c = np.array([1, 0, 1])

    __, __, __, forward = tinyultr.losses.dla(s, e, c, [1, 2, 3])
    __, __, __, backward = tinyultr.losses.dla(e, s, c, [1, 2, 3])

    assert forward["relevance"] == pytest.approx(backward["examination"])
    assert forward["examination"] == pytest.approx(backward["relevance"])


def test_dla_weights_clipped():
    relevance, examination = tinyultr.losses.dla_weights([0.0, 100.0], [100.0, 0.0], [1, 2])

    np.testing.assert_allclose(relevance, [1.0, np.exp(30.0)])
    np.testing.assert_allclose(examination, [1.0, np.exp(-30.0)])


def test_dla_weights_first_rank():
    relevance, __ = tinyultr.losses.dla_weights([0.0, 0.0], [0.0, np.log(0.5)], [4, 2])

    np.testing.assert_allclose(relevance, [0.5, 1.0])


def test_dla_weights_explicit_first_rank():
    relevance, examination = tinyultr.losses.dla_weights([0.0, 0.0], [np.log(0.5), np.log(0.25)], [2, 3], 0.0)

    np.testing.assert_allclose(relevance, [2.0, 4.0])
    np.testing.assert_allclose(examination, [1.0, 1.0])


def test_dla_normalises_against_rank_one():
    logits = np.log(np.array([1.0, 0.5, 0.25]))
    s = np.array([0.4, -0.2])
    c = np.array([1, 1])

    result = tinyultr.losses.compute(tinyultr.losses.LossSpec("dla"), s, c, [2, 3], {"position_logits": logits})
    weights = tinyultr.losses.dla_weights(s, logits[1:], [2, 3], 0.0)
    expected = tinyultr.losses.dla(s, logits[1:], c, [2, 3], weights)

    assert result.loss == pytest.approx(expected[0])
    assert result.components["relevance"] == pytest.approx(expected[3]["relevance"])


def test_ips_weighted_clicks_unbiased():
    rng = np.random.default_rng(5)
    examination = np.array([1.0, 0.6, 0.3, 0.15])
    relevance = 0.4
    curve = _curve(examination)
    n = 200000

    for rank in range(1, 5):
        clicks = (rng.random(n) < examination[rank - 1]) & (rng.random(n) < relevance)
        weights = tinyultr.losses.ips_weights(np.full(n, rank), curve, tau=0.1)

        assert np.mean(weights * clicks) == pytest.approx(relevance * examination[0], abs=0.015)


def test_pair_debias_all_ones():
    s = np.array([0.3, 1.0, -0.5, 0.2])
    c = np.array([0, 1, 0, 1])

    loss, ds, __, __ = tinyultr.losses.pair_debias(s, c, [1, 2, 3, 4], np.ones(5), np.ones(5), l1_weight=0.5)
    expected = tinyultr.losses.naive_lambdarank(s, c)

    assert loss == pytest.approx(expected[0] + 0.5 * 2 * 5)
    np.testing.assert_allclose(ds, expected[1])


def test_pair_debias_single_pair():
    loss, __, __, __ = tinyultr.losses.pair_debias(
        [0.0, 0.0], [1, 0], [1, 2], np.array([1.0, 1.0]), np.array([1.0, 0.5]), l1_weight=0.0
    )

    assert loss == pytest.approx(2.0 * NAIVE_PAIR)


def test_pair_debias_scaling():
    s = np.array([0.3, 1.0, -0.5])
    c = np.array([1, 0, 1])
    ranks = [1, 2, 3]
    e_plus = np.array([1.0, 0.7, 0.4])

    base, __, __, __ = tinyultr.losses.pair_debias(s, c, ranks, e_plus, np.ones(3), l1_weight=0.0)
    doubled, __, __, __ = tinyultr.losses.pair_debias(s, c, ranks, e_plus * 2.0, np.ones(3), l1_weight=0.0)

    assert doubled == pytest.approx(base / 2.0)


def test_pair_debias_ranks_beyond_propensities():
    loss, __, d_plus, __ = tinyultr.losses.pair_debias(
        [0.0, 0.0], [0, 1], [1, 7], np.array([1.0, 0.5]), np.array([1.0, 0.5]), l1_weight=0.0
    )

    assert d_plus.shape == (2,)
    assert loss > 0.0


@pytest.mark.parametrize("bad", ["plus", "minus"])
def test_pair_debias_nonpositive(bad):
    e_plus = np.array([1.0, 0.0]) if bad == "plus" else np.ones(2)
    e_minus = np.array([1.0, -0.1]) if bad == "minus" else np.ones(2)

    with pytest.raises(ValidationError):
        tinyultr.losses.pair_debias([0.0, 0.0], [1, 0], [1, 2], e_plus, e_minus)


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3], ids=["small", "unit", "large"])
def test_losses_finite(scale):
    rng = np.random.default_rng(11)
    s = rng.normal(scale=scale, size=8)
    e = rng.normal(scale=scale, size=8)
    c = rng.integers(0, 2, size=8)
    ranks = np.arange(1, 9)
    curve = _curve(1.0 / np.arange(1, 9))

    results = [
        tinyultr.losses.naive_pointwise(s, c),
        tinyultr.losses.naive_listwise(s, c),
        tinyultr.losses.naive_lambdarank(s, c),
        tinyultr.losses.two_tower(s, e, c),
        tinyultr.losses.regression_em(s, e, c),
        tinyultr.losses.ips_pointwise(s, c, ranks, curve),
        tinyultr.losses.ips_listwise(s, c, ranks, curve),
        tinyultr.losses.dla(s, e, c, ranks)[:3],
        tinyultr.losses.pair_debias(s, c, ranks, np.ones(8), np.ones(8)),
    ]

    for result in results:
        for value in result:
            assert np.all(np.isfinite(value))
