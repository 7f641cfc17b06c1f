"""Training objectives for naive and unbiased learning to rank.

Every objective takes one session: relevance logits ``s`` from the scoring model, clicks ``c``
and, where needed, the examination logits ``e`` of each item's rank. All of them are written in
logit space, so losses and gradients stay finite for any finite input.
"""

from __future__ import annotations

import dataclasses
import enum
import logging

from typing import Dict, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import scipy.special

import tinyultr.model
import tinyultr.utils

from tinyultr.exceptions import ValidationError
from tinyultr.propensity import PropensityCurve, PropensityMethod

log = logging.getLogger(__name__)

MAX_LOGIT_GAP = 30.0


class LossKind(enum.Enum):
    """Training objectives."""

    NAIVE_POINTWISE = "naive-pointwise"
    NAIVE_LISTWISE = "naive-listwise"
    NAIVE_LAMBDARANK = "naive-lambdarank"
    TWO_TOWER = "two-tower"
    REGRESSION_EM = "regression-em"
    IPS_POINTWISE = "ips-pointwise"
    IPS_LISTWISE = "ips-listwise"
    DLA = "dla"
    PAIR_DEBIAS = "pair-debias"

    @classmethod
    def values(cls):
        """Return the enum values."""

        return [each.value for each in cls]

    @property
    def group(self) -> str:
        """Return the base loss family: pointwise, listwise or lambdarank."""

        return _GROUPS[self]

    @property
    def naive(self) -> LossKind:
        """Return the naive objective sharing this objective's base loss."""

        return _NAIVE[self.group]

    @property
    def is_naive(self) -> bool:
        return self is self.naive

    @property
    def needs_curve(self) -> bool:
        return self in (LossKind.IPS_POINTWISE, LossKind.IPS_LISTWISE)

    @property
    def uses_position_logits(self) -> bool:
        return self in (LossKind.TWO_TOWER, LossKind.REGRESSION_EM, LossKind.DLA)

    @property
    def has_position_params(self) -> bool:
        return self.uses_position_logits or self is LossKind.PAIR_DEBIAS

    @property
    def propensity_method(self) -> Optional[PropensityMethod]:
        """Return the curve a model trained with this objective learns, if any."""

        return _LEARNED_CURVES.get(self)

    @property
    def predicts_clicks(self) -> bool:
        """Whether the objective yields click probabilities, and hence a click NLL."""

        return self.group == "pointwise"


_GROUPS = {
    LossKind.NAIVE_POINTWISE: "pointwise",
    LossKind.TWO_TOWER: "pointwise",
    LossKind.REGRESSION_EM: "pointwise",
    LossKind.IPS_POINTWISE: "pointwise",
    LossKind.NAIVE_LISTWISE: "listwise",
    LossKind.IPS_LISTWISE: "listwise",
    LossKind.DLA: "listwise",
    LossKind.NAIVE_LAMBDARANK: "lambdarank",
    LossKind.PAIR_DEBIAS: "lambdarank",
}

_NAIVE = {
    "pointwise": LossKind.NAIVE_POINTWISE,
    "listwise": LossKind.NAIVE_LISTWISE,
    "lambdarank": LossKind.NAIVE_LAMBDARANK,
}

_LEARNED_CURVES = {
    LossKind.TWO_TOWER: PropensityMethod.TWO_TOWER,
    LossKind.REGRESSION_EM: PropensityMethod.REM,
    LossKind.DLA: PropensityMethod.DLA,
    LossKind.PAIR_DEBIAS: PropensityMethod.PAIR_DEBIAS,
}


@dataclasses.dataclass(frozen=True)
class LossSpec:
    """Objective with its hyperparameters.

    Args:
        kind (LossKind): Objective.
        tau (float): Propensity clip of the IPS weights, in (0, 1].
        curve (PropensityCurve): Examination curve; required by the IPS objectives only.
        l1_weight (float): Scale of the L1 norm on the PairD propensities.
    """

    kind: LossKind
    tau: float = 0.1
    curve: Optional[PropensityCurve] = None
    l1_weight: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", LossKind(self.kind))
        except ValueError:
            raise ValidationError(
                f"Loss kind expects '{', '.join(LossKind.values())}', got '{self.kind}'."
            ) from None

        if self.kind.needs_curve and self.curve is None:
            raise ValidationError(f"'{self.kind.value}' requires a propensity curve.")

        if not self.kind.needs_curve and self.curve is not None:
            raise ValidationError(f"'{self.kind.value}' does not take a propensity curve.")

        if not 0.0 < self.tau <= 1.0:
            raise ValidationError(f"tau must lie in (0, 1], got {self.tau}.")

        if self.l1_weight < 0:
            raise ValidationError(f"l1_weight must be non-negative, got {self.l1_weight}.")

    def with_curve(self, curve: Optional[PropensityCurve]) -> LossSpec:
        return dataclasses.replace(self, curve=curve)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "tau": self.tau,
            "curve": None if self.curve is None else self.curve.to_dict(),
            "l1_weight": self.l1_weight,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> LossSpec:
        """Return the objective from a mapping; ``curve`` may be a curve mapping or a list of values."""

        data = tinyultr.utils.check_keys(cls, data)
        curve = data.get("curve")

        if isinstance(curve, Mapping):
            data["curve"] = PropensityCurve.from_dict(curve)
        elif curve is not None and not isinstance(curve, PropensityCurve):
            data["curve"] = PropensityCurve.normalized(curve, PropensityMethod.GROUND_TRUTH)

        return cls(**data)


class LossResult(NamedTuple):
    """Loss of one session with its gradients.

    ``d_params`` holds full-length gradients of the per-rank parameters the objective reads.
    """

    loss: float
    d_scores: np.ndarray
    d_params: Dict[str, np.ndarray]
    components: Dict[str, float]


def _as_arrays(s, c) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    c = np.asarray(c, dtype=np.float64).reshape(-1)

    if s.shape != c.shape:
        raise ValueError(f"Scores and clicks differ in length: {s.size} != {c.size}.")

    return s, c


def _bce(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    # -t log sigma(x) - (1 - t) log(1 - sigma(x)), also for targets above one.
    n = logits.size
    loss = np.sum(np.logaddexp(0.0, logits) - targets * logits) / n

    return float(loss), (scipy.special.expit(logits) - targets) / n


def _softmax_ce(logits: np.ndarray, weighted_clicks: np.ndarray) -> Tuple[float, np.ndarray]:
    total = weighted_clicks.sum()

    if total == 0.0:
        return 0.0, np.zeros_like(logits)

    loss = -np.sum(weighted_clicks * scipy.special.log_softmax(logits))

    return float(loss), total * scipy.special.softmax(logits) - weighted_clicks


def naive_pointwise(s, c) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy of sigma(s) against the clicks."""

    return _bce(*_as_arrays(s, c))


def naive_listwise(s, c) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy ``-sum c log softmax(s)``; sessions without clicks give zero."""

    s, c = _as_arrays(s, c)

    return _softmax_ce(s, c)


def _lambda_terms(s: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-s, kind="stable")
    predicted = np.empty(s.size)
    predicted[order] = np.arange(1, s.size + 1)
    discount = 1.0 / np.log2(1.0 + predicted)

    diff = s[:, None] - s[None, :]
    delta = np.abs(c[:, None] - c[None, :]) * np.abs(discount[:, None] - discount[None, :])
    delta = np.where(c[:, None] > c[None, :], delta, 0.0)

    return delta, diff


def _lambda_loss(delta: np.ndarray, diff: np.ndarray) -> Tuple[float, np.ndarray]:
    loss = np.sum(delta * np.logaddexp(0.0, -diff))
    lambdas = delta * scipy.special.expit(-diff)

    return float(loss), lambdas.sum(axis=0) - lambdas.sum(axis=1)


def naive_lambdarank(s, c) -> Tuple[float, np.ndarray]:
    """LambdaRank: sum over pairs c_i > c_j of |dDCG_ij| log(1 + exp(-(s_i - s_j))).

    dDCG uses linear gain on clicks and discounts at the ranks the scores currently predict,
    ties broken by input order.
    """

    s, c = _as_arrays(s, c)

    return _lambda_loss(*_lambda_terms(s, c))


def two_tower(s, e, c) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean binary cross-entropy of sigma(e + s); both towers receive the same gradient."""

    s, c = _as_arrays(s, c)
    e = np.asarray(e, dtype=np.float64).reshape(s.shape)
    loss, d_logits = _bce(e + s, c)

    return loss, d_logits, d_logits.copy()


def posteriors(s, e) -> Tuple[np.ndarray, np.ndarray]:
    """Return P(relevant | no click) and P(examined | no click) under the position-based model.

    With r = sigma(s) and x = sigma(e), the posteriors r(1 - x) / (1 - r x) and
    x(1 - r) / (1 - r x) have logits ``s - softplus(e)`` and ``e - softplus(s)``.
    """

    s = np.asarray(s, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)

    relevance = scipy.special.expit(s - np.logaddexp(0.0, e))
    examination = scipy.special.expit(e - np.logaddexp(0.0, s))

    return relevance, examination


def regression_em_targets(s, e, c) -> Tuple[np.ndarray, np.ndarray]:
    """Return the relevance and examination targets ``c + (1 - c) * posterior``."""

    s, c = _as_arrays(s, c)
    relevance, examination = posteriors(s, e)

    return c + (1.0 - c) * relevance, c + (1.0 - c) * examination


def regression_em(
    s, e, c, targets: Optional[Tuple[np.ndarray, np.ndarray]] = None
) -> Tuple[float, np.ndarray, np.ndarray]:
    """RegressionEM: regress each tower onto its posterior-completed click labels.

    Loss is BCE(sigma(s), relevance target) + BCE(sigma(e), examination target), each averaged
    over the session. Targets are computed from the current towers and held constant; pass
    ``targets`` to supply them.
    """

    s, c = _as_arrays(s, c)
    e = np.asarray(e, dtype=np.float64).reshape(s.shape)
    relevance, examination = regression_em_targets(s, e, c) if targets is None else targets

    loss_r, ds = _bce(s, np.asarray(relevance, dtype=np.float64))
    loss_e, de = _bce(e, np.asarray(examination, dtype=np.float64))

    return loss_r + loss_e, ds, de


def ips_weights(ranks, curve: PropensityCurve, tau: float = 0.1) -> np.ndarray:
    """Return max(tau, e(1)) / max(tau, e(k)) for every rank k.

    Raises:
        ValueError: If tau lies outside (0, 1].
    """

    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}.")

    return max(tau, float(curve.values[0])) / np.maximum(tau, curve.at(ranks))


def ips_pointwise(s, c, k, curve: PropensityCurve, tau: float = 0.1) -> Tuple[float, np.ndarray]:
    """Binary cross-entropy against the inverse-propensity weighted clicks.

    Weighted clicks can exceed one; the cross-entropy is extended to such targets and keeps
    the gradient sigma(s) - w c.
    """

    s, c = _as_arrays(s, c)

    return _bce(s, ips_weights(k, curve, tau) * c)


def ips_listwise(s, c, k, curve: PropensityCurve, tau: float = 0.1) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy with inverse-propensity weighted clicks."""

    s, c = _as_arrays(s, c)

    return _softmax_ce(s, ips_weights(k, curve, tau) * c)


def dla_weights(s, e, ranks, e_first: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Return the relevance and examination weights of the dual learning objective.

    After softmax over the session, the examination ratio of rank 1 to item i is
    exp(e_1 - e_i) and the relevance ratio exp(s_first - s_i); gaps are clipped to +-30.
    ``e_first`` is the rank-1 examination logit; when omitted it is read from the item shown at
    rank 1. Relevance ratios always use the session's smallest rank, as do examination ratios
    when the session lacks rank 1 and no ``e_first`` is given.
    """

    s = np.asarray(s, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    first = int(np.argmin(ranks))

    if e_first is None:
        e_first = e[first]

    relevance = np.exp(np.clip(e_first - e, -MAX_LOGIT_GAP, MAX_LOGIT_GAP))
    examination = np.exp(np.clip(s[first] - s, -MAX_LOGIT_GAP, MAX_LOGIT_GAP))

    return relevance, examination


def dla(
    s,
    e,
    c,
    ranks,
    weights: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    e_first: Optional[float] = None,
) -> Tuple[float, np.ndarray, np.ndarray, Dict[str, float]]:
    """Dual learning: each tower is trained with a softmax loss weighted by the other tower.

    The relevance term weights clicks by the inverse softmax examination ratio, the examination
    term by the inverse softmax relevance ratio. Weights are held constant; pass ``weights``
    to supply them, or ``e_first`` to fix the rank-1 examination logit they normalise against.

    Returns:
        tuple: loss, gradient w.r.t. s, gradient w.r.t. e, and the two terms by name.
    """

    s, c = _as_arrays(s, c)
    e = np.asarray(e, dtype=np.float64).reshape(s.shape)

    if weights is None:
        weights = dla_weights(s, e, ranks, e_first)

    relevance_weights, examination_weights = weights

    loss_r, ds = _softmax_ce(s, relevance_weights * c)
    loss_e, de = _softmax_ce(e, examination_weights * c)

    return loss_r + loss_e, ds, de, {"relevance": loss_r, "examination": loss_e}


def pair_debias(
    s, c, ranks, e_plus, e_minus, l1_weight: float = 1.0
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Pairwise debiasing: LambdaRank pair terms divided by learned propensities, plus an L1 norm.

    The pair (i, j) with item i clicked is divided by e_plus(k_i) * e_minus(k_j); the
    propensity vectors add ``l1_weight * (|e_plus|_1 + |e_minus|_1)``. Ranks beyond the vectors'
    length use the last entry.

    Raises:
        tinyultr.exceptions.ValidationError: If a propensity is not positive.

    Returns:
        tuple: loss, gradient w.r.t. s, and full-length gradients w.r.t. e_plus and e_minus.
    """

    s, c = _as_arrays(s, c)
    e_plus = np.asarray(e_plus, dtype=np.float64)
    e_minus = np.asarray(e_minus, dtype=np.float64)

    if np.any(e_plus <= 0.0) or np.any(e_minus <= 0.0):
        raise ValidationError("Pairwise debiasing propensities must be positive.")

    n_ranks = e_plus.size
    idx = np.minimum(np.asarray(ranks, dtype=np.int64), n_ranks) - 1

    delta, diff = _lambda_terms(s, c)
    delta = delta / (e_plus[idx][:, None] * e_minus[idx][None, :])
    loss, ds = _lambda_loss(delta, diff)

    terms = delta * np.logaddexp(0.0, -diff)
    d_plus = np.full(n_ranks, float(l1_weight))
    d_minus = np.full(n_ranks, float(l1_weight))

    np.add.at(d_plus, idx, -terms.sum(axis=1) / e_plus[idx])
    np.add.at(d_minus, idx, -terms.sum(axis=0) / e_minus[idx])

    loss += l1_weight * (np.abs(e_plus).sum() + np.abs(e_minus).sum())

    return float(loss), ds, d_plus, d_minus


def _gather_logits(position_params: Mapping[str, np.ndarray], ranks: np.ndarray) -> np.ndarray:
    logits = position_params.get(tinyultr.model.POSITION_LOGITS)

    if logits is None:
        raise ValidationError("Objective needs position logits, but the model has none.")

    if ranks.max() > logits.size:
        raise ValidationError(f"Rank {ranks.max()} exceeds the {logits.size} ranks with position parameters.")

    return logits[ranks - 1]


def _scatter(values: np.ndarray, ranks: np.ndarray, n_ranks: int) -> np.ndarray:
    result = np.zeros(n_ranks)
    np.add.at(result, ranks - 1, values)

    return result


def compute(
    spec: LossSpec, scores, clicks, ranks, position_params: Optional[Mapping[str, np.ndarray]] = None
) -> LossResult:
    """Evaluate the objective on one session.

    Args:
        spec (LossSpec): Objective.
        scores (numpy.ndarray): Relevance logits.
        clicks (numpy.ndarray): Clicks, 0 or 1.
        ranks (numpy.ndarray): Displayed ranks, from 1.
        position_params (dict[str, numpy.ndarray]): Per-rank parameters of the model.

    Raises:
        tinyultr.exceptions.ValidationError: If the objective's per-rank parameters are missing,
            or a rank exceeds them where the objective indexes them directly.

    Returns:
        LossResult
    """

    kind = spec.kind
    position_params = position_params or {}
    ranks = np.asarray(ranks, dtype=np.int64)
    d_params = {}
    components = {}

    if kind == LossKind.NAIVE_POINTWISE:
        loss, ds = naive_pointwise(scores, clicks)
    elif kind == LossKind.NAIVE_LISTWISE:
        loss, ds = naive_listwise(scores, clicks)
    elif kind == LossKind.NAIVE_LAMBDARANK:
        loss, ds = naive_lambdarank(scores, clicks)
    elif kind == LossKind.IPS_POINTWISE:
        loss, ds = ips_pointwise(scores, clicks, ranks, spec.curve, spec.tau)
    elif kind == LossKind.IPS_LISTWISE:
        loss, ds = ips_listwise(scores, clicks, ranks, spec.curve, spec.tau)
    elif kind == LossKind.PAIR_DEBIAS:
        e_plus = position_params.get(tinyultr.model.PROPENSITIES_PLUS)
        e_minus = position_params.get(tinyultr.model.PROPENSITIES_MINUS)

        if e_plus is None or e_minus is None:
            raise ValidationError("Pairwise debiasing needs positive and negative propensities.")

        loss, ds, d_plus, d_minus = pair_debias(scores, clicks, ranks, e_plus, e_minus, spec.l1_weight)
        d_params = {tinyultr.model.PROPENSITIES_PLUS: d_plus, tinyultr.model.PROPENSITIES_MINUS: d_minus}
    else:
        e = _gather_logits(position_params, ranks)
        n_ranks = position_params[tinyultr.model.POSITION_LOGITS].size

        if kind == LossKind.TWO_TOWER:
            loss, ds, de = two_tower(scores, e, clicks)
        elif kind == LossKind.REGRESSION_EM:
            loss, ds, de = regression_em(scores, e, clicks)
        else:
            logits = position_params[tinyultr.model.POSITION_LOGITS]
            loss, ds, de, components = dla(scores, e, clicks, ranks, e_first=float(logits[0]))

        d_params = {tinyultr.model.POSITION_LOGITS: _scatter(de, ranks, n_ranks)}

    return LossResult(loss, ds, d_params, components)


def click_probabilities(
    kind: LossKind, scores, ranks, position_params: Optional[Mapping[str, np.ndarray]] = None
) -> Optional[np.ndarray]:
    """Return the predicted click probability of each item, or None for rank-only objectives.

    Naive and IPS pointwise models predict sigma(s), Two-Tower sigma(e + s) and RegressionEM
    sigma(s) * sigma(e).
    """

    kind = LossKind(kind)
    scores = np.asarray(scores, dtype=np.float64)

    if not kind.predicts_clicks:
        return None

    if kind in (LossKind.NAIVE_POINTWISE, LossKind.IPS_POINTWISE):
        return scipy.special.expit(scores)

    e = _gather_logits(position_params or {}, np.asarray(ranks, dtype=np.int64))

    if kind == LossKind.TWO_TOWER:
        return scipy.special.expit(e + scores)

    # Product computed in log space.
    return np.exp(scipy.special.log_expit(scores) + scipy.special.log_expit(e))
