"""Test suite config."""

import numpy as np
import pytest

import tinyultr.corpus
import tinyultr.simulate

from tinyultr.corpus import ClickLog, JudgedDataset, JudgedQuery, Session
from tinyultr.simulate import LoggingPolicy, UserModelConfig

JUDGED_TEXT = """\
2 qid:1 1:0.5 3:1.0 # docid = a
0 qid:1 2:0.25
4 qid:2 1:1.5 2:2.0 3:-1.0 # docid = c
1 qid:2 3:0.75 # docid = d
3 qid:2 1:0.125
"""


def make_session(session_id, clicks, features, ranks=None, query_id="q"):
    """Return a session over documents d0..dn-1 at ranks 1..n unless given."""

    n = len(clicks)

    return Session(
        str(session_id),
        query_id,
        tuple(f"d{i}" for i in range(n)),
        np.arange(1, n + 1) if ranks is None else np.asarray(ranks),
        np.asarray(clicks),
        np.asarray(features, dtype=np.float64),
    )


@pytest.fixture(scope="session")
def judged_text():
    return JUDGED_TEXT


@pytest.fixture(scope="session")
def judged():
    return tinyultr.corpus.parse_judged(JUDGED_TEXT.splitlines())


@pytest.fixture(scope="session")
def synthetic_judged():
    return tinyultr.simulate.make_judged_dataset(n_queries=20, n_docs=12, n_features=5, seed=3)


@pytest.fixture(scope="session")
def small_log(synthetic_judged):
    return tinyultr.simulate.generate_log(
        synthetic_judged, LoggingPolicy(), UserModelConfig(eta=1.0, swap_fraction=0.3), 400, seed=1
    )


@pytest.fixture(scope="session")
def separable_logs():
    """Two-document sessions: document A is always clicked, document B never."""

    a, b = [1.0, 0.0], [0.0, 1.0]
    sessions = []

    for i in range(64):
        if i % 2:
            sessions.append(make_session(i, [1, 0], [a, b]))
        else:
            sessions.append(make_session(i, [0, 1], [b, a]))

    return ClickLog(tuple(sessions[:48])), ClickLog(tuple(sessions[48:]))


def _uniform_grade_dataset(n_queries=40, n_docs=10):
    """Queries whose documents share one grade, so a noisy oracle ranks them uniformly at random.

    Features are the one-hot grade.
    """

    queries = []

    for i in range(n_queries):
        grade = 1 + i % 4
        features = np.zeros((n_docs, 5))
        features[:, grade] = 1.0
        queries.append(
            JudgedQuery(f"q{i}", tuple(f"d{j}" for j in range(n_docs)), features, np.full(n_docs, grade))
        )

    return JudgedDataset(tuple(queries))


@pytest.fixture(scope="session")
def pbm_log():
    """1e5 sessions, eta 1, 30% adjacent swaps, ten ranks."""

    cfg = UserModelConfig(eta=1.0, max_rank=10, swap_fraction=0.3)

    return tinyultr.simulate.generate_log(_uniform_grade_dataset(), LoggingPolicy(), cfg, 100000, seed=7)
