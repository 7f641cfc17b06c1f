"""Ranking and click metrics, baselines, and cross-seed significance tests."""

from __future__ import annotations

import dataclasses
import enum
import logging

from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import scipy.special

import tinyultr.losses
import tinyultr.simulate
import tinyultr.utils

from tinyultr.corpus import ClickLog, JudgedDataset, JudgedQuery
from tinyultr.losses import LossKind, LossSpec
from tinyultr.model import ScoringModel
from tinyultr.simulate import LoggingPolicy
from tinyultr.utils import Stream

log = logging.getLogger(__name__)

CUTOFFS = (1, 3, 5, 10)
METRICS = ("dcg@1", "dcg@3", "dcg@5", "dcg@10", "mrr@10", "nll")
LOWER_IS_BETTER = frozenset(["nll"])
NLL_CLAMP = 1e-12


class Gain(enum.Enum):
    """DCG gain functions."""

    LINEAR = "linear"
    EXPONENTIAL = "exponential"

    @classmethod
    def values(cls):
        """Return the enum values."""

        return [each.value for each in cls]


class Significance(enum.Enum):
    """Outcome of a significance test against a baseline."""

    BETTER = "better"
    WORSE = "worse"
    NONE = "none"

    @property
    def mark(self) -> str:
        return {"better": "▲", "worse": "▼", "none": ""}[self.value]


def dcg_at_k(grades: Sequence[int], k: int, gain: Gain = Gain.LINEAR) -> float:
    """Return the DCG of the top ``k`` grades, in ranked order.

    Linear gain is ``grade / log2(rank + 1)``; exponential gain uses ``2^grade - 1``.

    Raises:
        ValueError: If k is below 1.
    """

    if k < 1:
        raise ValueError(f"DCG truncation must be at least 1, got {k}.")

    top = np.asarray(grades, dtype=np.float64)[:k]

    if Gain(gain) == Gain.EXPONENTIAL:
        top = 2.0 ** top - 1.0

    return float(np.sum(top / np.log2(np.arange(2, top.size + 2))))


def mrr_at_10(grades: Sequence[int], relevant_threshold: int = 1) -> float:
    """Return 1 / rank of the first document graded at least ``relevant_threshold`` in the top 10."""

    hits = np.flatnonzero(np.asarray(grades)[:10] >= relevant_threshold)

    return 1.0 / (hits[0] + 1) if hits.size else 0.0


def nll(click_probs: Sequence[float], clicks: Sequence[int]) -> float:
    """Return the mean negative log-likelihood of the clicks; probabilities are clamped to [1e-12, 1 - 1e-12].

    Raises:
        ValueError: If the lengths differ.
    """

    p = np.asarray(click_probs, dtype=np.float64).reshape(-1)
    c = np.asarray(clicks, dtype=np.float64).reshape(-1)

    if p.shape != c.shape:
        raise ValueError(f"Probabilities and clicks differ in length: {p.size} != {c.size}.")

    p = np.clip(p, NLL_CLAMP, 1.0 - NLL_CLAMP)

    return float(np.mean(-c * np.log(p) - (1.0 - c) * np.log1p(-p)))


@dataclasses.dataclass(frozen=True)
class MetricReport:
    """Metrics of one ranker on one judged dataset, averaged over queries."""

    dcg: Dict[int, float]
    mrr10: float
    nll: Optional[float] = None
    n_queries: int = 0

    def to_dict(self) -> Dict[str, Optional[float]]:
        """Return the metrics keyed by name, e.g. ``dcg@10``, plus ``n_queries``."""

        result = {f"dcg@{k}": self.dcg[k] for k in CUTOFFS}
        result.update({"mrr@10": self.mrr10, "nll": self.nll, "n_queries": self.n_queries})

        return result

    @classmethod
    def from_dict(cls, data: Mapping) -> MetricReport:
        nll_value = data.get("nll")

        return cls(
            {k: float(data[f"dcg@{k}"]) for k in CUTOFFS},
            float(data["mrr@10"]),
            None if nll_value is None or nll_value != nll_value else float(nll_value),
            int(data.get("n_queries", 0)),
        )

    def with_nll(self, value: Optional[float]) -> MetricReport:
        return dataclasses.replace(self, nll=value)


ScoreFn = Callable[[JudgedQuery], np.ndarray]


def evaluate_scores(data: JudgedDataset, score_fn: ScoreFn, gain: Gain = Gain.LINEAR) -> MetricReport:
    """Rank every query by descending score, ties by input order, and average the metrics.

    Args:
        data (JudgedDataset): Annotated queries.
        score_fn (callable): Returns one score per document of a query.
        gain (Gain): DCG gain function.

    Returns:
        MetricReport
    """

    if not len(data):
        raise ValueError("Cannot evaluate on an empty dataset.")

    dcg = {k: [] for k in CUTOFFS}
    mrr = []

    for query in data:
        order = np.argsort(-np.asarray(score_fn(query), dtype=np.float64), kind="stable")
        ranked = query.grades[order]

        for k in CUTOFFS:
            dcg[k].append(dcg_at_k(ranked, k, gain))

        mrr.append(mrr_at_10(ranked))

    return MetricReport({k: float(np.mean(values)) for k, values in dcg.items()}, float(np.mean(mrr)), None, len(data))


def evaluate_ranker(model: ScoringModel, data: JudgedDataset, gain: Gain = Gain.LINEAR) -> MetricReport:
    """Return the metrics of ranking by the model's relevance scores alone."""

    if data.n_features != model.input_dim:
        raise ValueError(f"Model expects {model.input_dim} features, dataset has {data.n_features}.")

    return evaluate_scores(data, lambda query: model.forward(query.features), gain)


class Summary(NamedTuple):
    """Mean and sample standard deviation of each metric over runs."""

    reports: List[MetricReport]
    mean: Dict[str, Optional[float]]
    sd: Dict[str, Optional[float]]

    def values(self, metric: str) -> Optional[np.ndarray]:
        """Return the per-run values of a metric, or None if any run lacks it."""

        values = [report.to_dict()[metric] for report in self.reports]

        return None if any(value is None for value in values) else np.array(values, dtype=np.float64)


def aggregate(reports: Sequence[MetricReport]) -> Summary:
    """Return the per-metric mean and sample standard deviation over the reports."""

    if not reports:
        raise ValueError("Nothing to aggregate.")

    summary = Summary(list(reports), {}, {})

    for metric in METRICS:
        values = summary.values(metric)
        summary.mean[metric] = None if values is None else float(np.mean(values))
        summary.sd[metric] = None if values is None else (float(np.std(values, ddof=1)) if values.size > 1 else 0.0)

    return summary


def random_baseline(data: JudgedDataset, n_seeds: int = 5, seed: int = 0, gain: Gain = Gain.LINEAR) -> Summary:
    """Return the metrics of uniformly random rankings, one permutation per query per seed."""

    if n_seeds < 1:
        raise ValueError(f"n_seeds must be at least 1, got {n_seeds}.")

    reports = []

    for s in range(n_seeds):
        rng = tinyultr.utils.rng(seed, Stream.BASELINE, s)
        reports.append(evaluate_scores(data, lambda query: -rng.permutation(len(query)).astype(np.float64), gain))

    return aggregate(reports)


def logging_policy_baseline(
    data: JudgedDataset, policy: LoggingPolicy, n_seeds: int = 5, seed: int = 0, gain: Gain = Gain.LINEAR
) -> Summary:
    """Return the metrics of the logging policy itself, one noise draw per query per seed."""

    if n_seeds < 1:
        raise ValueError(f"n_seeds must be at least 1, got {n_seeds}.")

    reports = []

    for s in range(n_seeds):
        rng = tinyultr.utils.rng(seed, Stream.BASELINE, s, 1)
        reports.append(
            evaluate_scores(data, lambda query: tinyultr.simulate.policy_scores(policy, query, rng), gain)
        )

    return aggregate(reports)


def feature_baseline(data: JudgedDataset, feature_index: int = 0, gain: Gain = Gain.LINEAR) -> Summary:
    """Return the metrics of ranking by one raw feature, highest value first.

    An untuned single-feature ranker, such as a BM25 column, that click-trained models are
    expected to beat. Deterministic, so the summary holds one report and a zero deviation.

    Raises:
        ValueError: If ``feature_index`` does not name a feature of the dataset.
    """

    if not 0 <= feature_index < data.n_features:
        raise ValueError(f"Feature index {feature_index} outside the {data.n_features} features of the dataset.")

    return aggregate([evaluate_scores(data, lambda query: query.features[:, feature_index], gain)])


def click_nll(model: ScoringModel, data: ClickLog, spec: Union[LossSpec, LossKind]) -> Optional[float]:
    """Return the held-out click NLL of a model, or None if its objective predicts no click probabilities.

    Two-Tower and RegressionEM read the examination logit of each displayed rank, so the log may
    not show ranks beyond the model's ``n_ranks``.

    Raises:
        tinyultr.exceptions.ValidationError: If a two-tower or RegressionEM model meets a rank
            beyond its position parameters.
    """

    kind = spec.kind if isinstance(spec, LossSpec) else LossKind(spec)

    if not kind.predicts_clicks or not data.n_impressions:
        return None

    position_params = model.position_params
    probs, clicks = [], []

    for session in data:
        if not len(session):
            continue

        scores = model.forward(session.features)
        probs.append(tinyultr.losses.click_probabilities(kind, scores, session.ranks, position_params))
        clicks.append(session.clicks)

    return nll(np.concatenate(probs), np.concatenate(clicks))


class TTestResult(NamedTuple):
    """Paired t-test outcome; ``degenerate`` flags zero-variance differences."""

    t: float
    p: float
    significance: Significance
    degenerate: bool = False


def paired_ttest(
    a: Sequence[float],
    b: Sequence[float],
    alpha: float = 0.01,
    n_comparisons: int = 1,
    higher_is_better: bool = True,
) -> TTestResult:
    """Two-sided paired t-test of ``a`` against ``b`` at the Bonferroni-corrected level alpha / n_comparisons.

    The p-value is I_{df / (df + t^2)}(df / 2, 1 / 2). When the differences have zero variance, a
    nonzero mean difference is decided by its sign with ``degenerate`` set, and a zero one is not
    significant.

    Raises:
        ValueError: If the samples differ in length or hold fewer than two values.
    """

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError(f"Paired samples need equal lengths of at least 2, got {a.size} and {b.size}.")

    if n_comparisons < 1:
        raise ValueError(f"n_comparisons must be at least 1, got {n_comparisons}.")

    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    df = diff.size - 1
    degenerate = sd == 0.0

    if degenerate and mean == 0.0:
        return TTestResult(0.0, 1.0, Significance.NONE, True)

    if degenerate:
        t, p = np.copysign(np.inf, mean), 0.0
    else:
        t = mean / (sd / np.sqrt(diff.size))
        p = float(scipy.special.betainc(df / 2.0, 0.5, df / (df + t * t)))

    significance = Significance.NONE

    if p < alpha / n_comparisons:
        significance = Significance.BETTER if (mean > 0) == higher_is_better else Significance.WORSE

    return TTestResult(float(t), p, significance, degenerate)


class TableRow(NamedTuple):
    name: str
    summary: Summary
    marks: Dict[str, Significance] = {}


TABLE_HEADERS = ("DCG@1", "DCG@3", "DCG@5", "DCG@10", "MRR@10", "NLL")


def _cell(summary: Summary, metric: str, mark: Significance) -> str:
    mean, sd = summary.mean.get(metric), summary.sd.get(metric)

    if mean is None:
        return "-"

    return f"{mean:.4f} ± {sd:.4f}{(' ' + mark.mark) if mark.mark else ''}"


def render_table(rows: Sequence[TableRow]) -> str:
    """Return a markdown table of mean ± sd per metric, with ▲/▼ marks where rows carry them."""

    lines = [
        "| Method | " + " | ".join(TABLE_HEADERS) + " |",
        "|---" * (len(TABLE_HEADERS) + 1) + "|",
    ]

    for row in rows:
        cells = [_cell(row.summary, metric, row.marks.get(metric, Significance.NONE)) for metric in METRICS]
        lines.append(f"| {row.name} | " + " | ".join(cells) + " |")

    return "\n".join(lines) + "\n"
