"""Result store: per-run reports and propensity curves in a tinydb database."""

import json
import logging
import os

from typing import Dict, List, Optional

from tinydb import TinyDB, where
from tinydb.middlewares import CachingMiddleware
from tinydb.storages import Storage

import tinyultr.utils

from tinyultr.evaluation import MetricReport
from tinyultr.propensity import PropensityCurve
from tinyultr.utils import PathLike

RESULTS_FILE = "results.json"


class AtomicJSONStorage(Storage):
    """JSON storage that replaces the file atomically on every write, with sorted keys."""

    def __init__(self, path: PathLike, **kwargs):
        self._path = os.fspath(path)

    def read(self) -> Optional[dict]:
        """Read the database; an absent or empty file reads as None."""

        if not os.path.exists(self._path) or not os.path.getsize(self._path):
            return None

        with open(self._path, "r", encoding="utf-8") as fp:
            return json.load(fp)

    def write(self, data: dict) -> None:
        tinyultr.utils.atomic_write_text(self._path, json.dumps(data, indent=2, sort_keys=True) + "\n")

    def close(self) -> None:
        pass


class ReadCachingMiddleware(CachingMiddleware):
    """Middleware that only caches reads."""

    def write(self, data: dict) -> None:
        """Write the data through to the storage and drop the cache."""

        self._cache_modified_count = 0
        self.cache = None

        self.storage.write(data)

    def flush(self):
        """Nothing is held back; writes go straight to the storage."""


class ResultStore(object):
    """Reports (one per method and seed) and propensity curves of one run directory."""

    def __init__(self, path: PathLike, create: bool = False):
        """Initialize.

        Args:
            path (str): Database file, or a run directory holding ``results.json``.
            create (bool): Create the database if it does not exist.

        Raises:
            FileNotFoundError: If the database does not exist and ``create`` is False.
        """

        path = os.fspath(path)

        if os.path.isdir(path):
            path = os.path.join(path, RESULTS_FILE)

        if not create:
            tinyultr.utils.check_path(path)

        self.log = logging.getLogger(__name__ + "." + self.__class__.__name__)
        self.path = path

        self._db = TinyDB(path, storage=ReadCachingMiddleware(AtomicJSONStorage))

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()

    def close(self) -> None:
        self._db.close()

    def add_report(self, method: str, seed: int, report: MetricReport) -> int:
        """Store the report of one method and seed, replacing an earlier one."""

        table = self._db.table("reports")
        table.remove((where("method") == method) & (where("seed") == seed))

        return table.insert({"method": method, "seed": int(seed), **report.to_dict()})

    def reports(self, method: Optional[str] = None) -> List[dict]:
        """Return the stored reports, for one method or all, ordered by method then seed."""

        table = self._db.table("reports")
        rows = table.all() if method is None else table.search(where("method") == method)
        order = {name: i for i, name in enumerate(self.methods())}

        return sorted((dict(row) for row in rows), key=lambda row: (order[row["method"]], row["seed"]))

    def methods(self) -> List[str]:
        """Return the methods with stored reports, in insertion order."""

        return list(dict.fromkeys(row["method"] for row in self._db.table("reports").all()))

    def seeds(self, method: str) -> List[int]:
        return sorted(row["seed"] for row in self._db.table("reports").search(where("method") == method))

    def metric_reports(self, method: str) -> List[MetricReport]:
        return [MetricReport.from_dict(row) for row in self.reports(method)]

    def add_curve(self, name: str, curve: PropensityCurve) -> int:
        """Store a named propensity curve, replacing an earlier one of the same name."""

        table = self._db.table("curves")
        table.remove(where("name") == name)

        return table.insert({"name": name, **curve.to_dict()})

    def curves(self) -> Dict[str, PropensityCurve]:
        return {row["name"]: PropensityCurve.from_dict(row) for row in self._db.table("curves").all()}
