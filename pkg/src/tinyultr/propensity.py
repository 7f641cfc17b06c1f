"""Position-bias curves: intervention harvesting, model extraction and CTR diagnostics."""

from __future__ import annotations

import dataclasses
import enum
import json
import logging

from typing import Dict, Iterable, Mapping, NamedTuple, Optional, Set, Tuple

import numpy as np
import pandas as pd
import scipy.sparse
import scipy.sparse.csgraph
import scipy.special

import tinyultr.model
import tinyultr.utils

from tinyultr.corpus import ClickLog
from tinyultr.exceptions import EstimationError, ParseError, ValidationError
from tinyultr.model import ScoringModel
from tinyultr.utils import PathLike

log = logging.getLogger(__name__)

MIN_PROPENSITY = 1e-6


class PropensityMethod(enum.Enum):
    """Where a propensity curve comes from."""

    ADJACENT_PAIR = "adjacent-pair"
    PIVOT_RANK = "pivot-rank"
    ALL_PAIRS = "all-pairs"
    REM = "rem"
    TWO_TOWER = "two-tower"
    DLA = "dla"
    PAIR_DEBIAS = "pair-debias"
    GROUND_TRUTH = "ground-truth"

    @classmethod
    def values(cls):
        """Return the enum values."""

        return [each.value for each in cls]

    @classmethod
    def harvesting(cls):
        """Return the intervention harvesting estimators."""

        return [cls.ADJACENT_PAIR, cls.PIVOT_RANK, cls.ALL_PAIRS]


@dataclasses.dataclass(frozen=True, eq=False)
class PropensityCurve:
    """Examination probabilities by rank, normalised so that rank 1 has propensity 1.

    Args:
        values (numpy.ndarray): Propensity of rank k at index k - 1, all in (0, 1].
        method (PropensityMethod): Source of the curve.
    """

    values: np.ndarray
    method: PropensityMethod

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)

        if values.size == 0:
            raise ValidationError("A propensity curve needs at least one rank.")

        if values[0] != 1.0 or np.any(values <= 0.0) or np.any(values > 1.0):
            raise ValidationError(f"Propensities must lie in (0, 1] with rank 1 at 1.0, got {values.tolist()}.")

        values.setflags(write=False)

        object.__setattr__(self, "values", values)
        object.__setattr__(self, "method", PropensityMethod(self.method))

    @classmethod
    def normalized(cls, values: Iterable[float], method: PropensityMethod) -> PropensityCurve:
        """Return the curve divided by its rank-1 value and clipped to [1e-6, 1].

        Raises:
            tinyultr.exceptions.EstimationError: If the rank-1 value is not positive and finite.
        """

        values = np.array(list(values), dtype=np.float64)

        if values.size == 0 or not np.isfinite(values[0]) or values[0] <= 0.0:
            raise EstimationError(f"Cannot normalise a curve by its rank-1 value: {values[:1].tolist()}.")

        values = np.clip(np.nan_to_num(values / values[0], nan=MIN_PROPENSITY), MIN_PROPENSITY, 1.0)
        values[0] = 1.0

        return cls(values, method)

    def __len__(self) -> int:
        return self.values.size

    @property
    def n_ranks(self) -> int:
        return self.values.size

    def at(self, ranks: np.ndarray) -> np.ndarray:
        """Return the propensities of the given ranks; ranks beyond K get the rank-K value."""

        ranks = np.asarray(ranks, dtype=np.int64)

        if ranks.size and ranks.min() < 1:
            raise ValueError(f"Ranks start at 1, got {ranks.min()}.")

        return self.values[np.minimum(ranks, self.n_ranks) - 1]

    def to_dict(self) -> dict:
        return {"method": self.method.value, "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping) -> PropensityCurve:
        try:
            return cls(data["values"], PropensityMethod(data["method"]))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ValidationError):
                raise
            raise ParseError(f"Invalid propensity curve: {e}") from None

    def save(self, path: PathLike) -> None:
        tinyultr.utils.atomic_write_text(path, json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: PathLike) -> PropensityCurve:
        with open(tinyultr.utils.check_path(path), "r", encoding="utf-8") as fp:
            return cls.from_dict(json.load(fp))


class PairCounts(NamedTuple):
    """Pooled interventional counts of one rank pair (k, k'), k < k'."""

    impressions_0: int
    clicks_0: int
    impressions_1: int
    clicks_1: int

    @property
    def ctr_0(self) -> float:
        return self.clicks_0 / self.impressions_0 if self.impressions_0 else float("nan")

    @property
    def ctr_1(self) -> float:
        return self.clicks_1 / self.impressions_1 if self.impressions_1 else float("nan")


class PairStatistics(NamedTuple):
    """Pooled CTRs at both ranks of a pair, with the pair's weight."""

    ctr_0: float
    ctr_1: float
    weight: float


PAIR_COLUMNS = [
    "query_id",
    "doc_id",
    "rank_0",
    "rank_1",
    "impressions_0",
    "clicks_0",
    "impressions_1",
    "clicks_1",
]


@dataclasses.dataclass(frozen=True, eq=False)
class InterventionIndex:
    """Query-document pairs logged at more than one rank.

    ``pairs`` has one row per (query, document, k, k') with k < k' and at least one
    impression at both ranks, carrying the impressions and clicks at each rank.
    """

    pairs: pd.DataFrame
    n_ranks: int

    def counts(self) -> Dict[Tuple[int, int], PairCounts]:
        """Return the counts of every rank pair, summed over its query-document pairs."""

        pooled = self.pairs.groupby(["rank_0", "rank_1"], sort=True)[PAIR_COLUMNS[4:]].sum()

        return {
            (int(k0), int(k1)): PairCounts(*(int(value) for value in row))
            for (k0, k1), row in zip(pooled.index, pooled.itertuples(index=False))
        }

    def contributors(self, k0: int, k1: int) -> Set[Tuple[str, str]]:
        """Return the query-document pairs shown at both ranks."""

        k0, k1 = sorted((k0, k1))
        rows = self.pairs[(self.pairs.rank_0 == k0) & (self.pairs.rank_1 == k1)]

        return set(zip(rows.query_id, rows.doc_id))


def ctr_by_rank(data: ClickLog) -> np.ndarray:
    """Return clicks / impressions per rank; ranks without impressions are NaN.

    Returns:
        numpy.ndarray: CTR of rank k at index k - 1, length ``data.n_ranks``.
    """

    if not len(data) or not data.n_ranks:
        return np.zeros(0)

    ranks = np.concatenate([session.ranks for session in data])
    clicks = np.concatenate([session.clicks for session in data])
    length = data.n_ranks + 1

    impressions = np.bincount(ranks, minlength=length)[1:].astype(np.float64)
    clicked = np.bincount(ranks, weights=clicks, minlength=length)[1:]

    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(impressions > 0, clicked / impressions, np.nan)


def build_intervention_index(data: ClickLog) -> InterventionIndex:
    """Aggregate the log into the query-document pairs seen at several ranks."""

    frame = pd.DataFrame(
        {
            "query_id": [session.query_id for session in data for __ in range(len(session))],
            "doc_id": [doc_id for session in data for doc_id in session.doc_ids],
            "rank": np.concatenate([session.ranks for session in data] or [np.zeros(0, np.int64)]),
            "click": np.concatenate([session.clicks for session in data] or [np.zeros(0, np.int64)]),
        }
    )

    per_rank = (
        frame.groupby(["query_id", "doc_id", "rank"], sort=True)["click"]
        .agg(impressions="size", clicks="sum")
        .reset_index()
    )
    n_ranks = per_rank.groupby(["query_id", "doc_id"])["rank"].transform("size")
    per_rank = per_rank[n_ranks > 1]

    pairs = per_rank.merge(per_rank, on=["query_id", "doc_id"], suffixes=("_0", "_1"))
    pairs = pairs[pairs.rank_0 < pairs.rank_1][PAIR_COLUMNS].reset_index(drop=True)

    log.info("Indexed %d interventional pairs from %d sessions", len(pairs), len(data))

    return InterventionIndex(pairs, data.n_ranks)


def _checked_counts(counts: Mapping[Tuple[int, int], PairCounts], k0: int, k1: int) -> PairCounts:
    key = tuple(sorted((k0, k1)))
    result = counts.get(key)

    if result is None or not result.impressions_0 or not result.impressions_1:
        raise EstimationError(f"No interventional data between rank {key[0]} and rank {key[1]}.")

    if not result.clicks_0 or not result.clicks_1:
        raise EstimationError(f"Zero pooled CTR in rank pair {key}; the curve is undefined there.")

    return result


def _ranks(idx: InterventionIndex, n_ranks: Optional[int]) -> int:
    n_ranks = idx.n_ranks if n_ranks is None else n_ranks

    if n_ranks < 1:
        raise EstimationError("Cannot estimate propensities without ranks.")

    return n_ranks


def adjacent_pair(idx: InterventionIndex, n_ranks: Optional[int] = None) -> PropensityCurve:
    """Chain click ratios between neighbouring ranks.

    Args:
        idx (InterventionIndex): Interventional counts.
        n_ranks (int): Number of ranks K to estimate; defaults to the log's.

    Raises:
        tinyultr.exceptions.EstimationError: If a neighbouring pair has no data or a zero pooled CTR.

    Returns:
        PropensityCurve
    """

    n_ranks = _ranks(idx, n_ranks)
    counts = idx.counts()
    values = [1.0]

    for k in range(1, n_ranks):
        pair = _checked_counts(counts, k, k + 1)
        values.append(values[-1] * pair.ctr_1 / pair.ctr_0)

    return PropensityCurve.normalized(values, PropensityMethod.ADJACENT_PAIR)


def pivot_rank(idx: InterventionIndex, n_ranks: Optional[int] = None, pivot: int = 1) -> PropensityCurve:
    """Ratio of each rank's pooled CTR to the pivot rank's, within their shared pairs.

    A pivot other than 1 yields a curve renormalised by its rank-1 value.
    """

    n_ranks = _ranks(idx, n_ranks)

    if not 1 <= pivot <= n_ranks:
        raise ValueError(f"Pivot rank must lie in 1..{n_ranks}, got {pivot}.")

    counts = idx.counts()
    values = []

    for k in range(1, n_ranks + 1):
        if k == pivot:
            values.append(1.0)
            continue

        pair = _checked_counts(counts, k, pivot)
        ctr_k, ctr_pivot = (pair.ctr_0, pair.ctr_1) if k < pivot else (pair.ctr_1, pair.ctr_0)
        values.append(ctr_k / ctr_pivot)

    return PropensityCurve.normalized(values, PropensityMethod.PIVOT_RANK)


def pair_statistics(idx: InterventionIndex, n_ranks: Optional[int] = None) -> Dict[Tuple[int, int], PairStatistics]:
    """Return pooled CTRs and weights min(impressions at k, at k') of every pair within K."""

    n_ranks = _ranks(idx, n_ranks)

    return {
        key: PairStatistics(pair.ctr_0, pair.ctr_1, float(min(pair.impressions_0, pair.impressions_1)))
        for key, pair in idx.counts().items()
        if key[1] <= n_ranks and pair.impressions_0 and pair.impressions_1
    }


def solve_all_pairs(
    stats: Mapping[Tuple[int, int], PairStatistics], n_ranks: int, tol: float = 1e-8, max_iter: int = 10000
) -> PropensityCurve:
    """Least-squares fit of a curve to the pooled CTRs of all rank pairs.

    Minimises sum over k != k' of w (c_k e_k' - c_k' e_k)^2 subject to e_1 = 1 and e >= 1e-6.
    The objective is a quadratic form, so each iteration takes a Newton step on the free
    coordinates and projects back onto the bounds, until the projected gradient norm is below
    ``tol``. Weights are rescaled to sum to one and CTRs by their maximum; neither changes the
    minimiser.

    Raises:
        tinyultr.exceptions.EstimationError: If some rank shares no pair with the rest of the graph,
            or no intervention pair has a click.
    """

    if n_ranks == 1:
        return PropensityCurve(np.ones(1), PropensityMethod.ALL_PAIRS)

    stats = {key: value for key, value in stats.items() if value.weight > 0 and key[1] <= n_ranks}
    total_weight = sum(value.weight for value in stats.values())
    max_ctr = max((max(value.ctr_0, value.ctr_1) for value in stats.values()), default=0.0)

    if stats and max_ctr <= 0.0:
        raise EstimationError("No clicks on any intervention pair; the all-pairs fit is undefined.")

    quadratic = np.zeros((n_ranks, n_ranks))
    adjacency = np.zeros((n_ranks, n_ranks))

    for (k0, k1), (ctr_0, ctr_1, weight) in stats.items():
        i, j = k0 - 1, k1 - 1
        x, y, w = ctr_0 / max_ctr, ctr_1 / max_ctr, weight / total_weight

        # Both orderings of the pair contribute the same term, hence the factor two.
        quadratic[j, j] += 2.0 * w * x * x
        quadratic[i, i] += 2.0 * w * y * y
        quadratic[i, j] -= 2.0 * w * x * y
        quadratic[j, i] -= 2.0 * w * x * y
        adjacency[i, j] = adjacency[j, i] = 1.0

    __, labels = scipy.sparse.csgraph.connected_components(scipy.sparse.csr_matrix(adjacency), directed=False)
    unreachable = [k + 1 for k in range(n_ranks) if labels[k] != labels[0]]

    if unreachable:
        raise EstimationError(f"Rank co-occurrence graph is disconnected; unreachable ranks: {unreachable}")

    hessian = 2.0 * quadratic
    values = np.ones(n_ranks)

    for iteration in range(max_iter):
        grad = hessian @ values
        at_bound = (values <= MIN_PROPENSITY) & (grad > 0)
        at_bound[0] = True

        if np.linalg.norm(grad[~at_bound]) < tol:
            break

        free = np.flatnonzero(~at_bound)
        step = np.linalg.lstsq(hessian[np.ix_(free, free)], grad[free], rcond=None)[0]
        values[free] = np.maximum(values[free] - step, MIN_PROPENSITY)
    else:
        log.warning("All-pairs fit stopped after %d iterations without converging", max_iter)

    log.debug("All-pairs fit converged after %d iterations", iteration + 1)

    return PropensityCurve.normalized(values, PropensityMethod.ALL_PAIRS)


def all_pairs(idx: InterventionIndex, n_ranks: Optional[int] = None, **kwargs) -> PropensityCurve:
    """Fit a curve to the interventional click ratios of all rank pairs.

    See :func:`solve_all_pairs` for the objective; the weight of a pair is the smaller of its
    pooled impression counts.
    """

    n_ranks = _ranks(idx, n_ranks)

    return solve_all_pairs(pair_statistics(idx, n_ranks), n_ranks, **kwargs)


def extract_model_propensities(
    model: ScoringModel, method: PropensityMethod = PropensityMethod.REM
) -> PropensityCurve:
    """Return the examination curve learned by a model's per-rank parameters.

    Logit parameters give sigma(logit_k) / sigma(logit_1); DLA logits are softmax logits and
    give exp(logit_k - logit_1); PairD propensities are read as they are.

    Raises:
        tinyultr.exceptions.EstimationError: If the model has no matching per-rank parameters.
    """

    method = PropensityMethod(method)

    if method == PropensityMethod.PAIR_DEBIAS:
        values = model.params.get(tinyultr.model.PROPENSITIES_PLUS)
    else:
        values = model.position_logits

    if values is None:
        raise EstimationError(f"Model has no position parameters to extract a '{method.value}' curve from.")

    if method == PropensityMethod.DLA:
        values = np.exp(values - values[0])
    elif method != PropensityMethod.PAIR_DEBIAS:
        values = scipy.special.expit(values)

    return PropensityCurve.normalized(values, method)


def estimate(
    data: ClickLog,
    method: PropensityMethod = PropensityMethod.ALL_PAIRS,
    n_ranks: Optional[int] = None,
    pivot: int = 1,
) -> PropensityCurve:
    """Estimate the curve from a click log with one of the intervention harvesting estimators."""

    method = PropensityMethod(method)
    idx = build_intervention_index(data)

    if method == PropensityMethod.ADJACENT_PAIR:
        curve = adjacent_pair(idx, n_ranks)
    elif method == PropensityMethod.PIVOT_RANK:
        curve = pivot_rank(idx, n_ranks, pivot)
    elif method == PropensityMethod.ALL_PAIRS:
        curve = all_pairs(idx, n_ranks)
    else:
        raise ValueError(f"'{method.value}' is not an intervention harvesting method.")

    log.info("Estimated %s propensities: %s", method.value, np.round(curve.values, 4).tolist())

    return curve
