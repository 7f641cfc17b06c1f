"""Package utilities."""

import dataclasses
import enum
import hashlib
import os
import tempfile

from typing import Any, Dict, Iterator, List, Mapping, Sequence, Union

import numpy as np

from tinyultr.exceptions import ValidationError

PathLike = Union[str, os.PathLike]


class Stream(enum.IntEnum):
    """Random number streams, one per operation.

    Every random draw in the package comes from a generator seeded with
    ``(seed, stream, *keys)``, so adding an operation never shifts the draws of another.
    """

    SPLIT = 1
    SIMULATE = 2
    POLICY_WEIGHTS = 3
    INIT = 4
    SHUFFLE = 5
    DROPOUT = 6
    BASELINE = 7
    JUDGED_SPLIT = 8
    SYNTHETIC = 9


def rng(seed: int, stream: Stream, *keys: int) -> np.random.Generator:
    """Return the random generator for the given seed, stream and substream keys.

    Args:
        seed (int): User facing seed.
        stream (Stream): Operation the draws belong to.
        *keys (int): Substream keys, e.g. a session index or an epoch number.

    Returns:
        numpy.random.Generator
    """

    entropy = [int(seed), int(stream), *(int(key) for key in keys)]

    return np.random.default_rng(np.random.SeedSequence(entropy))


def check_keys(cls: type, data: Mapping[str, Any]) -> Dict[str, Any]:
    """Return the mapping as a dict after checking its keys name fields of the dataclass.

    Raises:
        tinyultr.exceptions.ValidationError: If the mapping holds unknown keys.
    """

    if not isinstance(data, Mapping):
        raise ValidationError(f"'{cls.__name__}' expects a mapping, got {type(data).__name__}.")

    known = {field.name for field in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)

    if unknown:
        raise ValidationError(f"'{cls.__name__}' has no field(s): {', '.join(unknown)}")

    return dict(data)


def to_jsonable(value: Any) -> Any:
    """Return the value as plain JSON types; dataclasses become dicts and enums their values."""

    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {field.name: to_jsonable(getattr(value, field.name)) for field in dataclasses.fields(value)}
    elif isinstance(value, enum.Enum):
        return value.value
    elif isinstance(value, Mapping):
        return {str(key): to_jsonable(each) for key, each in value.items()}
    elif isinstance(value, (list, tuple)):
        return [to_jsonable(each) for each in value]
    elif isinstance(value, np.ndarray):
        return value.tolist()
    elif isinstance(value, np.generic):
        return value.item()

    return value


def first(items: Sequence[Any]) -> Union[Any, None]:
    """Return the first item in the given sequence."""

    return next(iter(items), None)


def chunks(items: Sequence[Any], size: int) -> Iterator[Sequence[Any]]:
    """Yield consecutive slices of at most ``size`` items."""

    if size < 1:
        raise ValueError(f"Chunk size must be positive, got {size}.")

    for start in range(0, len(items), size):
        yield items[start : start + size]


def check_path(path: PathLike) -> str:
    """Return the given path as a string.

    Raises:
        FileNotFoundError: If the given path does not exist.
    """

    path = os.fspath(path)

    if not os.path.exists(path):
        raise FileNotFoundError(f"Given path {path} does not exist!")

    return path


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write the given bytes to a temp file next to ``path``, then rename it over ``path``."""

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))

    os.makedirs(directory, exist_ok=True)

    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))

    try:
        with os.fdopen(fd, "wb") as fp:
            fp.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    """Write the given text atomically, UTF-8 encoded."""

    atomic_write_bytes(path, text.encode("utf-8"))


def sha256(path: PathLike) -> str:
    """Return the hex digest of the file contents."""

    digest = hashlib.sha256()

    with open(os.fspath(path), "rb") as fp:
        for block in iter(lambda: fp.read(1 << 16), b""):
            digest.update(block)

    return digest.hexdigest()


def list_files(directory: PathLike) -> List[str]:
    """Return all files under the directory as sorted, '/'-separated relative paths."""

    directory = os.fspath(directory)
    result = []

    for root, __, files in os.walk(directory):
        for name in files:
            relpath = os.path.relpath(os.path.join(root, name), directory)
            result.append(relpath.replace(os.sep, "/"))

    return sorted(result)
