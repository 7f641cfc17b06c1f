"""Judged datasets, click logs, their file formats, filters and splits."""

from __future__ import annotations

import collections
import dataclasses
import io
import json
import logging
import math
import re

from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, TextIO, Tuple, TypeVar

import numpy as np

from frozendict import frozendict

import tinyultr.utils

from tinyultr.exceptions import ParseError, ValidationError
from tinyultr.utils import PathLike, Stream

log = logging.getLogger(__name__)

MAX_GRADE = 4

DOC_ID_PATTERN = re.compile(r"docid\s*=\s*(\S+)")


class JudgedDocument(NamedTuple):
    """One annotated candidate of a query."""

    doc_id: str
    features: np.ndarray
    grade: int


class SessionItem(NamedTuple):
    """One displayed result of a session."""

    doc_id: str
    rank: int
    click: int
    features: np.ndarray


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True, eq=False)
class JudgedQuery:
    """A query with its annotated candidates.

    Args:
        query_id (str): Opaque query identifier.
        doc_ids (tuple[str]): Candidate identifiers, in input order.
        features (numpy.ndarray): Candidate features, one row per document.
        grades (numpy.ndarray): Relevance grades in 0..4, one per document.
    """

    query_id: str
    doc_ids: Tuple[str, ...]
    features: np.ndarray
    grades: np.ndarray

    def __post_init__(self):
        if not self.doc_ids:
            raise ValidationError(f"Query '{self.query_id}' has no documents.")

        features = np.array(self.features, dtype=np.float64)
        grades = np.asarray(self.grades)

        if features.ndim != 2 or features.shape[0] != len(self.doc_ids):
            raise ValidationError(f"Query '{self.query_id}' expects one feature row per document.")

        if grades.shape != (len(self.doc_ids),):
            raise ValidationError(f"Query '{self.query_id}' expects one grade per document.")

        if not np.all(np.equal(np.mod(grades, 1), 0)):
            raise ValidationError(f"Query '{self.query_id}' has non-integer grades.")

        if grades.min() < 0 or grades.max() > MAX_GRADE:
            raise ValidationError(
                f"Query '{self.query_id}' has grades outside 0..{MAX_GRADE}: {sorted(set(grades.tolist()))}"
            )

        object.__setattr__(self, "doc_ids", tuple(str(each) for each in self.doc_ids))
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "grades", _frozen(grades.astype(np.int64)))

    def __len__(self) -> int:
        return len(self.doc_ids)

    @property
    def docs(self) -> List[JudgedDocument]:
        """Return the candidates as (doc_id, features, grade) records."""

        return [
            JudgedDocument(doc_id, self.features[i], int(self.grades[i]))
            for i, doc_id in enumerate(self.doc_ids)
        ]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclasses.dataclass(frozen=True, eq=False)
class JudgedDataset:
    """Queries with annotated candidates, used for simulation and evaluation."""

    queries: Tuple[JudgedQuery, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))

        dims = {query.n_features for query in self.queries}

        if len(dims) > 1:
            raise ValidationError(f"Queries disagree on feature dimensionality: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    @property
    def n_features(self) -> int:
        query = tinyultr.utils.first(self.queries)
        return 0 if query is None else query.n_features

    @property
    def n_docs(self) -> int:
        return sum(len(query) for query in self.queries)


@dataclasses.dataclass(frozen=True, eq=False)
class Session:
    """One logged result page.

    Ranks are the displayed positions: strictly increasing, gaps allowed.
    """

    session_id: str
    query_id: str
    doc_ids: Tuple[str, ...]
    ranks: np.ndarray
    clicks: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        n = len(self.doc_ids)
        ranks = np.asarray(self.ranks, dtype=np.int64).reshape(n)
        clicks = np.asarray(self.clicks).reshape(n)
        features = np.array(self.features, dtype=np.float64)
        features = np.zeros((n, 0)) if features.size == 0 else features.reshape(n, -1)

        if n and ranks.min() < 1:
            raise ValidationError(f"Session '{self.session_id}' has a rank below 1.")

        if np.any(np.diff(ranks) <= 0):
            raise ValidationError(f"Session '{self.session_id}' ranks must be strictly increasing.")

        if not np.all((clicks == 0) | (clicks == 1)):
            raise ValidationError(f"Session '{self.session_id}' clicks must be 0 or 1.")

        object.__setattr__(self, "session_id", str(self.session_id))
        object.__setattr__(self, "query_id", str(self.query_id))
        object.__setattr__(self, "doc_ids", tuple(str(each) for each in self.doc_ids))
        object.__setattr__(self, "ranks", _frozen(ranks))
        object.__setattr__(self, "clicks", _frozen(clicks.astype(np.int64)))
        object.__setattr__(self, "features", _frozen(features))

    def __len__(self) -> int:
        return len(self.doc_ids)

    @property
    def items(self) -> List[SessionItem]:
        """Return the displayed results as (doc_id, rank, click, features) records."""

        return [
            SessionItem(doc_id, int(self.ranks[i]), int(self.clicks[i]), self.features[i])
            for i, doc_id in enumerate(self.doc_ids)
        ]

    @property
    def n_clicks(self) -> int:
        return int(self.clicks.sum())

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclasses.dataclass(frozen=True, eq=False)
class ClickLog:
    """Sessions in file order.

    Zero-click sessions are kept; losses that cannot use them ignore them internally.

    Args:
        sessions (tuple[Session]): Logged sessions.
        n_ranks (int): Maximum rank present; computed when omitted.
        metadata (frozendict): Provenance, e.g. the ground-truth propensities of a simulated log.
    """

    sessions: Tuple[Session, ...] = ()
    n_ranks: Optional[int] = None
    metadata: Mapping = dataclasses.field(default_factory=frozendict)

    def __post_init__(self):
        sessions = tuple(self.sessions)
        n_ranks = max((int(session.ranks[-1]) for session in sessions if len(session)), default=0)

        if self.n_ranks is not None and self.n_ranks != n_ranks:
            raise ValidationError(f"Log declares {self.n_ranks} ranks but shows {n_ranks}.")

        dims = {session.n_features for session in sessions if len(session)}

        if len(dims) > 1:
            raise ValidationError(f"Sessions disagree on feature dimensionality: {sorted(dims)}")

        object.__setattr__(self, "sessions", sessions)
        object.__setattr__(self, "n_ranks", n_ranks)
        object.__setattr__(self, "metadata", frozendict(self.metadata))

    def __len__(self) -> int:
        return len(self.sessions)

    def __iter__(self):
        return iter(self.sessions)

    @property
    def n_features(self) -> int:
        return next((session.n_features for session in self.sessions if len(session)), 0)

    @property
    def n_impressions(self) -> int:
        return sum(len(session) for session in self.sessions)

    def replace(self, sessions: Iterable[Session]) -> ClickLog:
        """Return a log with the given sessions and this log's metadata."""

        return ClickLog(tuple(sessions), metadata=self.metadata)


def parse_judged(stream: Iterable[str]) -> JudgedDataset:
    """Parse a LETOR/SVMLight judged dataset.

    Each line reads ``<grade> qid:<id> <fid>:<val> ... [# comment]``; feature ids are 1-based
    and may be sparse. An optional ``docid = <id>`` in the comment names the document.

    Args:
        stream (Iterable[str]): Lines of text.

    Raises:
        tinyultr.exceptions.ParseError: If a line is malformed.
        tinyultr.exceptions.ValidationError: If a grade lies outside 0..4.

    Returns:
        JudgedDataset
    """

    grouped = collections.OrderedDict()
    n_features = 0

    for lineno, raw in enumerate(stream, 1):
        line, __, comment = raw.partition("#")
        tokens = line.split()

        if not tokens:
            continue

        try:
            grade = int(tokens[0])
        except ValueError:
            raise ParseError(f"invalid grade '{tokens[0]}'", lineno) from None

        if not 0 <= grade <= MAX_GRADE:
            raise ValidationError(f"line {lineno}: grade {grade} outside 0..{MAX_GRADE}")

        if len(tokens) < 2 or not tokens[1].startswith("qid:") or len(tokens[1]) == 4:
            raise ParseError("expected 'qid:<id>' after the grade", lineno)

        query_id = tokens[1][4:]
        features = {}

        for token in tokens[2:]:
            fid, sep, value = token.partition(":")

            try:
                fid = int(fid)
                value = float(value)
            except ValueError:
                raise ParseError(f"invalid feature '{token}'", lineno) from None

            if not sep or fid < 1:
                raise ParseError(f"invalid feature '{token}'", lineno)

            features[fid] = value
            n_features = max(n_features, fid)

        docs = grouped.setdefault(query_id, [])
        match = DOC_ID_PATTERN.search(comment)
        doc_id = match.group(1) if match else str(len(docs))

        docs.append((doc_id, features, grade))

    queries = []

    for query_id, docs in grouped.items():
        matrix = np.zeros((len(docs), n_features))

        for row, (__, features, __) in enumerate(docs):
            for fid, value in features.items():
                matrix[row, fid - 1] = value

        queries.append(
            JudgedQuery(
                query_id,
                tuple(doc_id for doc_id, __, __ in docs),
                matrix,
                np.array([grade for __, __, grade in docs], dtype=np.int64),
            )
        )

    data = JudgedDataset(tuple(queries))

    log.info("Parsed %d judged queries, %d documents, %d features", len(data), data.n_docs, n_features)

    return data


def dump_judged(data: JudgedDataset, stream: TextIO) -> None:
    """Write the dataset in LETOR/SVMLight format; only non-zero features are written."""

    for query in data:
        for doc in query.docs:
            features = " ".join(
                f"{fid}:{value!r}" for fid, value in enumerate(doc.features.tolist(), 1) if value != 0.0
            )
            tokens = [str(doc.grade), f"qid:{query.query_id}"] + ([features] if features else [])

            stream.write(" ".join(tokens) + f" # docid = {doc.doc_id}\n")


def _require(obj: Mapping, key: str, lineno: int, where: str):
    try:
        return obj[key]
    except KeyError:
        raise ParseError(f"{where} is missing required field '{key}'", lineno) from None
    except TypeError:
        raise ParseError(f"{where} must be a JSON object", lineno) from None


def _as_int(value, name: str, lineno: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise ParseError(f"field '{name}' must be an integer, got {value!r}", lineno)

    return int(value)


def _parse_session(obj: dict, lineno: int) -> Session:
    session_id = _require(obj, "session_id", lineno, "session")
    query_id = _require(obj, "query_id", lineno, "session")
    items = _require(obj, "items", lineno, "session")

    if not isinstance(items, list):
        raise ParseError("field 'items' must be a list", lineno)

    rows = []

    for item in items:
        doc_id = _require(item, "doc_id", lineno, "item")
        rank = _as_int(_require(item, "rank", lineno, "item"), "rank", lineno)
        click = _as_int(_require(item, "click", lineno, "item"), "click", lineno)
        features = item.get("features", [])

        if click not in (0, 1):
            raise ValidationError(f"line {lineno}: click must be 0 or 1, got {click}")

        if rank < 1:
            raise ValidationError(f"line {lineno}: rank must be at least 1, got {rank}")

        try:
            features = [float(value) for value in features]
        except (TypeError, ValueError):
            raise ParseError("field 'features' must be a list of numbers", lineno) from None

        rows.append((rank, str(doc_id), click, features))

    rows.sort(key=lambda row: row[0])
    ranks = [row[0] for row in rows]
    duplicates = sorted({rank for rank, count in collections.Counter(ranks).items() if count > 1})

    if duplicates:
        raise ValidationError(
            f"line {lineno}: duplicate rank {', '.join(map(str, duplicates))} in session '{session_id}'"
        )

    dims = {len(row[3]) for row in rows}

    if len(dims) > 1:
        raise ValidationError(f"line {lineno}: items of session '{session_id}' disagree on feature length")

    n_features = dims.pop() if dims else 0

    return Session(
        str(session_id),
        str(query_id),
        tuple(row[1] for row in rows),
        np.array(ranks, dtype=np.int64),
        np.array([row[2] for row in rows], dtype=np.int64),
        np.array([row[3] for row in rows], dtype=np.float64).reshape(len(rows), n_features),
    )


def parse_click_log(stream: Iterable[str]) -> ClickLog:
    """Parse a JSON-Lines click log.

    Each line holds ``{"session_id", "query_id", "items": [{"doc_id", "rank", "click", "features"}]}``;
    field order is irrelevant and unknown fields are ignored.

    Raises:
        tinyultr.exceptions.ParseError: If a line is not valid JSON or misses a required field.
        tinyultr.exceptions.ValidationError: If a session repeats a rank or a click is not 0/1.

    Returns:
        ClickLog
    """

    sessions = []

    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue

        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON ({e.msg})", lineno) from None

        sessions.append(_parse_session(obj, lineno))

    result = ClickLog(tuple(sessions))

    log.info("Parsed %d sessions, %d impressions, %d ranks", len(result), result.n_impressions, result.n_ranks)

    return result


def session_to_dict(session: Session) -> dict:
    """Return the session as a JSON-ready mapping."""

    return {
        "session_id": session.session_id,
        "query_id": session.query_id,
        "items": [
            {
                "doc_id": item.doc_id,
                "rank": item.rank,
                "click": item.click,
                "features": item.features.tolist(),
            }
            for item in session.items
        ],
    }


def dump_click_log(data: ClickLog, stream: TextIO) -> None:
    """Write the log as JSON Lines, one compact object per session."""

    for session in data:
        stream.write(json.dumps(session_to_dict(session), separators=(",", ":")) + "\n")


Data = TypeVar("Data", ClickLog, JudgedDataset)


def _load(path: PathLike, parse: Callable[[TextIO], Data]) -> Data:
    with open(tinyultr.utils.check_path(path), "r", encoding="utf-8") as fp:
        try:
            return parse(fp)
        except UnicodeDecodeError as e:
            raise ParseError(f"{path} is not valid UTF-8 at byte {e.start}.") from None


def load_judged(path: PathLike) -> JudgedDataset:
    """Parse the judged dataset at the given path.

    Raises:
        tinyultr.exceptions.ParseError: If the file is malformed or not UTF-8 text.
    """

    return _load(path, parse_judged)


def load_click_log(path: PathLike) -> ClickLog:
    """Parse the click log at the given path.

    Raises:
        tinyultr.exceptions.ParseError: If the file is malformed or not UTF-8 text.
    """

    return _load(path, parse_click_log)


def save_click_log(data: ClickLog, path: PathLike) -> None:
    """Write the click log to the given path atomically."""

    buffer = io.StringIO()
    dump_click_log(data, buffer)
    tinyultr.utils.atomic_write_text(path, buffer.getvalue())


def save_judged(data: JudgedDataset, path: PathLike) -> None:
    """Write the judged dataset to the given path atomically."""

    buffer = io.StringIO()
    dump_judged(data, buffer)
    tinyultr.utils.atomic_write_text(path, buffer.getvalue())


def filter_min_docs(data: Data, min_docs: int = 5) -> Data:
    """Drop queries (or sessions) with fewer than ``min_docs`` documents.

    Args:
        data (ClickLog | JudgedDataset): Data to filter.
        min_docs (int): Minimum number of documents to keep a query or session.

    Returns:
        ClickLog | JudgedDataset: Same type as the input, relative order preserved.
    """

    if min_docs < 1:
        raise ValueError(f"min_docs must be at least 1, got {min_docs}.")

    if isinstance(data, ClickLog):
        result = data.replace(session for session in data if len(session) >= min_docs)
    elif isinstance(data, JudgedDataset):
        result = JudgedDataset(tuple(query for query in data if len(query) >= min_docs))
    else:
        raise TypeError(f"Cannot filter {type(data).__name__}.")

    log.info("Kept %d of %d entries with at least %d documents", len(result), len(data), min_docs)

    return result


def _partition_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    """Return split sizes by the largest remainder method."""

    raw = [n * fraction for fraction in fractions]
    sizes = [int(math.floor(value + 1e-9)) for value in raw]
    remainders = sorted(range(len(raw)), key=lambda i: (sizes[i] - raw[i], i))

    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1

    return sizes


def split_log(
    data: ClickLog, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> Tuple[ClickLog, ClickLog, ClickLog]:
    """Split the log into train, validation and test logs by session.

    Args:
        data (ClickLog): Log to split.
        fractions (tuple[float, float, float]): Positive fractions summing to 1.
        seed (int): Split seed.

    Raises:
        tinyultr.exceptions.ValidationError: If the fractions are invalid.

    Returns:
        tuple[ClickLog, ClickLog, ClickLog]: Each keeps the input's session order.
    """

    fractions = tuple(float(each) for each in fractions)

    if len(fractions) != 3 or any(each <= 0 for each in fractions):
        raise ValidationError(f"Split fractions must be three positive numbers, got {fractions}.")

    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"Split fractions must sum to 1, got {sum(fractions)}.")

    sizes = _partition_sizes(len(data), fractions)
    order = tinyultr.utils.rng(seed, Stream.SPLIT).permutation(len(data))
    bounds = np.cumsum([0] + sizes)

    return tuple(
        data.replace(data.sessions[i] for i in np.sort(order[start:stop]))
        for start, stop in zip(bounds[:-1], bounds[1:])
    )


def split_judged(data: JudgedDataset, heldout_fraction: float, seed: int = 0) -> Tuple[JudgedDataset, JudgedDataset]:
    """Split the judged dataset by query into a click-simulation part and a held-out part.

    Raises:
        tinyultr.exceptions.ValidationError: If the fraction is not in (0, 1) or there are fewer than two queries.

    Returns:
        tuple[JudgedDataset, JudgedDataset]
    """

    if not 0.0 < heldout_fraction < 1.0:
        raise ValidationError(f"Held-out fraction must lie in (0, 1), got {heldout_fraction}.")

    if len(data) < 2:
        raise ValidationError("Need at least two queries to hold some out.")

    n_heldout = min(max(1, int(round(len(data) * heldout_fraction))), len(data) - 1)
    heldout = set(tinyultr.utils.rng(seed, Stream.JUDGED_SPLIT).permutation(len(data))[:n_heldout].tolist())

    return (
        JudgedDataset(tuple(query for i, query in enumerate(data) if i not in heldout)),
        JudgedDataset(tuple(query for i, query in enumerate(data) if i in heldout)),
    )


def query_index(data: JudgedDataset) -> Dict[str, JudgedQuery]:
    """Return the queries keyed by id."""

    return {query.query_id: query for query in data}
