"""Semi-synthetic click simulation under the position-based model."""

from __future__ import annotations

import dataclasses
import enum
import functools
import json
import logging

from typing import Mapping, Optional

import numpy as np

from frozendict import frozendict

import tinyultr.utils

from tinyultr.corpus import ClickLog, JudgedDataset, JudgedQuery, Session
from tinyultr.exceptions import ValidationError
from tinyultr.model import log1p_transform
from tinyultr.propensity import PropensityCurve, PropensityMethod
from tinyultr.utils import PathLike, Stream

log = logging.getLogger(__name__)


class PolicyKind(enum.Enum):
    """Logging policy kinds."""

    ORACLE_NOISY = "oracle-noisy"
    FEATURE_LINEAR = "feature-linear"

    @classmethod
    def values(cls):
        """Return the enum values."""

        return [each.value for each in cls]


@dataclasses.dataclass(frozen=True)
class UserModelConfig:
    """Simulated user.

    Examination at rank k is (1/k)^eta; a document of grade g is clicked when examined with
    probability eps + (1 - eps) (2^g - 1) / (2^max_grade - 1).

    Args:
        eta (float): Position bias severity; 0 means no bias.
        max_rank (int): Number of documents shown per session, when candidates allow. Defaults to
            ten ranks, so sessions show min(10, candidates) documents; pass 8 for shorter lists.
        epsilon_minus (float): Click noise floor for irrelevant documents.
        max_grade (int): Highest relevance grade.
        swap_fraction (float): Fraction of sessions with one random adjacent pair swapped.
    """

    eta: float = 1.0
    max_rank: int = 10
    epsilon_minus: float = 0.1
    max_grade: int = 4
    swap_fraction: float = 0.0

    def __post_init__(self):
        if self.eta < 0:
            raise ValidationError(f"eta must be non-negative, got {self.eta}.")

        if self.max_rank < 1 or self.max_grade < 1:
            raise ValidationError("max_rank and max_grade must be positive.")

        if not 0.0 <= self.epsilon_minus < 1.0:
            raise ValidationError(f"epsilon_minus must lie in [0, 1), got {self.epsilon_minus}.")

        if not 0.0 <= self.swap_fraction <= 1.0:
            raise ValidationError(f"swap_fraction must lie in [0, 1], got {self.swap_fraction}.")

    @classmethod
    def from_dict(cls, data: Mapping) -> UserModelConfig:
        return cls(**tinyultr.utils.check_keys(cls, data))


@dataclasses.dataclass(frozen=True)
class LoggingPolicy:
    """Production ranker that decided what users saw.

    ``oracle-noisy`` ranks by grade plus Gaussian noise (a strong policy); ``feature-linear``
    ranks by a random linear function of the log1p features plus noise (a weak policy).
    """

    kind: PolicyKind = PolicyKind.ORACLE_NOISY
    noise_sigma: float = 1.0
    weight_seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", PolicyKind(self.kind))
        except ValueError:
            raise ValidationError(
                f"Policy kind expects '{', '.join(PolicyKind.values())}', got '{self.kind}'."
            ) from None

        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be non-negative, got {self.noise_sigma}.")

    @classmethod
    def from_dict(cls, data: Mapping) -> LoggingPolicy:
        return cls(**tinyultr.utils.check_keys(cls, data))


def position_bias(k, eta: float):
    """Return the examination probability (1/k)^eta of rank k.

    Raises:
        ValueError: If a rank is below 1.
    """

    k = np.asarray(k, dtype=np.float64)

    if np.any(k < 1):
        raise ValueError(f"Ranks start at 1, got {k.min()}.")

    result = (1.0 / k) ** eta

    return float(result) if result.ndim == 0 else result


def relevance_to_click_prob(grade, cfg: UserModelConfig):
    """Return the click probability of an examined document of the given grade.

    Raises:
        ValueError: If a grade lies outside 0..max_grade.
    """

    grade = np.asarray(grade, dtype=np.float64)

    if np.any(grade < 0) or np.any(grade > cfg.max_grade):
        raise ValueError(f"Grades must lie in 0..{cfg.max_grade}.")

    gain = (2.0 ** grade - 1.0) / (2.0 ** cfg.max_grade - 1.0)
    result = cfg.epsilon_minus + (1.0 - cfg.epsilon_minus) * gain

    return float(result) if result.ndim == 0 else result


@functools.lru_cache(maxsize=32)
def _policy_weights(weight_seed: int, n_features: int) -> np.ndarray:
    weights = tinyultr.utils.rng(weight_seed, Stream.POLICY_WEIGHTS).normal(size=n_features)
    weights.setflags(write=False)
    return weights


def policy_scores(policy: LoggingPolicy, query: JudgedQuery, rng: np.random.Generator) -> np.ndarray:
    """Return the logging policy's scores for the query's candidates; higher ranks first."""

    if policy.kind == PolicyKind.ORACLE_NOISY:
        scores = query.grades.astype(np.float64)
    else:
        scores = log1p_transform(query.features) @ _policy_weights(policy.weight_seed, query.n_features)

    return scores + rng.normal(0.0, policy.noise_sigma, size=len(query))


def ground_truth(cfg: UserModelConfig) -> PropensityCurve:
    """Return the simulated examination curve over ranks 1..max_rank."""

    return PropensityCurve.normalized(
        position_bias(np.arange(1, cfg.max_rank + 1), cfg.eta), PropensityMethod.GROUND_TRUTH
    )


def generate_log(
    data: JudgedDataset, policy: LoggingPolicy, cfg: UserModelConfig, n_sessions: int, seed: int = 0
) -> ClickLog:
    """Simulate a click log.

    Each session draws a query uniformly, ranks its candidates with the logging policy, shows
    the top ``max_rank``, optionally swaps one uniformly chosen adjacent pair, then clicks each
    shown document independently with probability position_bias(k) * relevance_to_click_prob(grade).
    Session i draws from its own substream of ``seed``, so any subset of sessions can be
    regenerated on its own.

    Args:
        data (JudgedDataset): Queries to simulate.
        policy (LoggingPolicy): Logging policy.
        cfg (UserModelConfig): Simulated user.
        n_sessions (int): Number of sessions.
        seed (int): Simulation seed.

    Returns:
        ClickLog: The ground-truth propensities and the simulation settings are in its metadata.
    """

    if n_sessions < 1:
        raise ValueError(f"n_sessions must be positive, got {n_sessions}.")

    if not len(data):
        raise ValueError("Cannot simulate clicks on an empty dataset.")

    bias = position_bias(np.arange(1, cfg.max_rank + 1), cfg.eta)
    click_probs = [relevance_to_click_prob(query.grades, cfg) for query in data]
    doc_ids = [np.array(query.doc_ids, dtype=object) for query in data]
    sessions = []

    for i in range(n_sessions):
        rng = tinyultr.utils.rng(seed, Stream.SIMULATE, i)
        q = int(rng.integers(len(data)))
        query = data.queries[q]

        order = np.argsort(-policy_scores(policy, query, rng), kind="stable")[: cfg.max_rank]
        shown = len(order)

        if shown > 1 and rng.random() < cfg.swap_fraction:
            j = int(rng.integers(shown - 1))
            order[[j, j + 1]] = order[[j + 1, j]]

        clicks = rng.random(shown) < bias[:shown] * click_probs[q][order]

        sessions.append(
            Session(
                str(i),
                query.query_id,
                tuple(doc_ids[q][order]),
                np.arange(1, shown + 1),
                clicks.astype(np.int64),
                query.features[order],
            )
        )

    metadata = frozendict(
        {
            "eta": cfg.eta,
            "propensities": tuple(ground_truth(cfg).values.tolist()),
            "user_model": frozendict(tinyultr.utils.to_jsonable(cfg)),
            "policy": frozendict(tinyultr.utils.to_jsonable(policy)),
            "seed": seed,
        }
    )
    result = ClickLog(tuple(sessions), metadata=metadata)

    log.info(
        "Simulated %d sessions (eta=%s, swap_fraction=%s), %d clicks",
        n_sessions,
        cfg.eta,
        cfg.swap_fraction,
        sum(session.n_clicks for session in result),
    )

    return result


def ground_truth_from_log(data: ClickLog) -> Optional[PropensityCurve]:
    """Return the ground-truth curve attached to a simulated log, or None."""

    values = data.metadata.get("propensities")

    return None if values is None else PropensityCurve(values, PropensityMethod.GROUND_TRUTH)


def write_ground_truth(data: ClickLog, path: PathLike) -> None:
    """Write the sidecar ``{"eta": ..., "propensities": [...]}`` of a simulated log.

    Raises:
        tinyultr.exceptions.ValidationError: If the log was not simulated.
    """

    if "propensities" not in data.metadata:
        raise ValidationError("Log carries no ground-truth propensities.")

    payload = {"eta": data.metadata["eta"], "propensities": list(data.metadata["propensities"])}

    tinyultr.utils.atomic_write_text(path, json.dumps(payload, sort_keys=True) + "\n")


GRADE_QUANTILES = (0.5, 0.75, 0.9, 0.97)


def make_judged_dataset(
    n_queries: int = 100, n_docs: int = 20, n_features: int = 10, seed: int = 0, label_noise: float = 0.5
) -> JudgedDataset:
    """Return a synthetic judged dataset whose features inform relevance.

    Grades bucket a hidden linear function of the log1p features plus Gaussian noise at the
    50/75/90/97th percentiles, so most documents are irrelevant and few are perfect.
    """

    if min(n_queries, n_docs, n_features) < 1:
        raise ValueError("Synthetic dataset sizes must be positive.")

    rng = tinyultr.utils.rng(seed, Stream.SYNTHETIC)
    direction = rng.normal(size=n_features)
    direction /= np.linalg.norm(direction)

    features = rng.normal(size=(n_queries, n_docs, n_features))
    latent = log1p_transform(features) @ direction + label_noise * rng.normal(size=(n_queries, n_docs))
    grades = np.digitize(latent, np.quantile(latent, GRADE_QUANTILES))

    return JudgedDataset(
        tuple(
            JudgedQuery(f"q{i}", tuple(f"d{j}" for j in range(n_docs)), features[i], grades[i])
            for i in range(n_queries)
        )
    )
