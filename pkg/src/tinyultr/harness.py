"""End-to-end experiments: data, propensities, training, evaluation and the results table."""

from __future__ import annotations

import contextlib
import dataclasses
import io
import json
import logging
import os

from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import tinyultr
import tinyultr.corpus
import tinyultr.evaluation
import tinyultr.model
import tinyultr.propensity
import tinyultr.simulate
import tinyultr.train
import tinyultr.utils

from tinyultr.corpus import ClickLog, JudgedDataset
from tinyultr.evaluation import METRICS, LOWER_IS_BETTER, Gain, Significance, Summary, TableRow
from tinyultr.exceptions import EstimationError, PipelineError, ValidationError
from tinyultr.losses import LossKind, LossSpec
from tinyultr.propensity import PropensityCurve, PropensityMethod
from tinyultr.simulate import LoggingPolicy, UserModelConfig
from tinyultr.storage import ResultStore
from tinyultr.train import TrainConfig
from tinyultr.utils import PathLike

log = logging.getLogger(__name__)

PROPENSITY_SOURCES = ("ground-truth", "adjacent-pair", "pivot-rank", "all-pairs")
GROUPS = ("pointwise", "listwise", "lambdarank")
GROUP_TITLES = {"pointwise": "Pointwise", "listwise": "Listwise", "lambdarank": "LambdaRank"}

MANIFEST_FILE = "manifest.json"
REPORTS_FILE = "reports.csv"
TABLE_FILE = "results.md"
PLOT_FILE = "propensity_plot.csv"


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """Where the clicks and annotations come from.

    With ``log_path`` set, the click log is read from disk and ``judged_path`` is the held-out
    annotated set. Otherwise clicks are simulated over part of the judged dataset (read from
    ``judged_path`` or generated) and the remaining queries are held out for evaluation.

    Args:
        judged_path (str): Judged dataset file.
        log_path (str): External click log.
        user_model (UserModelConfig): Simulated user.
        policy (LoggingPolicy): Simulated logging policy.
        n_sessions (int): Simulated sessions.
        n_queries (int): Queries of a generated judged dataset.
        n_docs (int): Documents per generated query.
        n_features (int): Features of a generated dataset.
        label_noise (float): Grade noise of a generated dataset.
        heldout_fraction (float): Share of judged queries held out from simulation.
        min_docs (int): Drop queries and sessions with fewer documents.
        fractions (tuple[float]): Train, validation and test shares of the sessions.
        seed (int): Data seed; generation, simulation and splits depend on it alone.
        write_logs (bool): Write the split logs and ground truth to the run directory.
    """

    judged_path: Optional[str] = None
    log_path: Optional[str] = None
    user_model: UserModelConfig = dataclasses.field(default_factory=UserModelConfig)
    policy: LoggingPolicy = dataclasses.field(default_factory=LoggingPolicy)
    n_sessions: int = 20000
    n_queries: int = 200
    n_docs: int = 20
    n_features: int = 10
    label_noise: float = 0.5
    heldout_fraction: float = 0.2
    min_docs: int = 5
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    write_logs: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(each) for each in self.fractions))

        if self.log_path and not self.judged_path:
            raise ValidationError("An external click log needs a judged dataset to evaluate on.")

        if self.n_sessions < 1:
            raise ValidationError(f"n_sessions must be positive, got {self.n_sessions}.")

        if not 0.0 < self.heldout_fraction < 1.0:
            raise ValidationError(f"heldout_fraction must lie in (0, 1), got {self.heldout_fraction}.")

    @property
    def simulated(self) -> bool:
        return not self.log_path

    @classmethod
    def from_dict(cls, data: Mapping) -> DataConfig:
        data = tinyultr.utils.check_keys(cls, data)

        if isinstance(data.get("user_model"), Mapping):
            data["user_model"] = UserModelConfig.from_dict(data["user_model"])

        if isinstance(data.get("policy"), Mapping):
            data["policy"] = LoggingPolicy.from_dict(data["policy"])

        return cls(**data)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: methods trained over seeds on one dataset.

    The naive method of every base loss among ``methods`` is added when missing, so each
    unbiased method has a baseline to be tested against.
    ``baseline_feature`` is the raw feature column reported as a single-feature ranker beside
    the random and logging-policy rows; None leaves it out.
    """

    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    methods: Tuple[str, ...] = ("naive-pointwise", "ips-pointwise")
    propensity_source: str = "all-pairs"
    tau: float = 0.1
    l1_weight: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 0.01
    dropout: float = 0.0
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 256
    hidden_dims: Tuple[int, ...] = (512, 512, 512, 512)
    n_ranks: Optional[int] = None
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    alpha: float = 0.01
    gain: str = "linear"
    baseline_feature: Optional[int] = 0
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        methods = (self.methods,) if isinstance(self.methods, str) else tuple(self.methods)

        if not methods:
            raise ValidationError("An experiment needs at least one method.")

        try:
            kinds = [LossKind(each) for each in methods]
        except ValueError as e:
            raise ValidationError(f"{e}; expected one of '{', '.join(LossKind.values())}'.") from None

        kinds += [kind.naive for kind in kinds]
        order = list(LossKind)
        kinds = sorted(set(kinds), key=lambda kind: (GROUPS.index(kind.group), order.index(kind)))

        object.__setattr__(self, "methods", tuple(kind.value for kind in kinds))
        object.__setattr__(self, "seeds", tuple(int(each) for each in self.seeds))
        object.__setattr__(self, "hidden_dims", tuple(int(each) for each in self.hidden_dims))

        if self.propensity_source not in PROPENSITY_SOURCES:
            raise ValidationError(
                f"Propensity source expects '{', '.join(PROPENSITY_SOURCES)}', got '{self.propensity_source}'."
            )

        if self.propensity_source == "ground-truth" and not self.data.simulated:
            raise ValidationError("Ground-truth propensities exist only for simulated data.")

        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValidationError(f"Seeds must be unique and non-empty, got {list(self.seeds)}.")

        if self.gain not in Gain.values():
            raise ValidationError(f"Gain expects '{', '.join(Gain.values())}', got '{self.gain}'.")

        if self.baseline_feature is not None and self.baseline_feature < 0:
            raise ValidationError(f"baseline_feature must be a feature index, got {self.baseline_feature}.")

        self.train_config(LossKind.NAIVE_POINTWISE, self.seeds[0])

    @property
    def kinds(self) -> List[LossKind]:
        return [LossKind(each) for each in self.methods]

    def train_config(self, kind: LossKind, seed: int, curve: Optional[PropensityCurve] = None) -> TrainConfig:
        """Return the training config of one method and seed."""

        return TrainConfig(
            loss=LossSpec(kind, tau=self.tau, curve=curve, l1_weight=self.l1_weight),
            lr=self.lr,
            weight_decay=self.weight_decay,
            dropout=self.dropout,
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            seed=seed,
            hidden_dims=self.hidden_dims,
            n_ranks=self.n_ranks,
        )

    def to_dict(self) -> dict:
        return tinyultr.utils.to_jsonable(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> ExperimentConfig:
        """Return the config from a mapping; a single ``method`` may stand in for ``methods``."""

        data = dict(data)

        if "method" in data:
            data["methods"] = [data.pop("method")]

        data = tinyultr.utils.check_keys(cls, data)

        if isinstance(data.get("data"), Mapping):
            data["data"] = DataConfig.from_dict(data["data"])

        return cls(**data)


class PreparedData(NamedTuple):
    train: ClickLog
    val: ClickLog
    test: ClickLog
    heldout: JudgedDataset
    truth: Optional[PropensityCurve]


def prepare_data(cfg: DataConfig) -> PreparedData:
    """Read or simulate the click log, split it by session, and set aside the annotated queries."""

    if cfg.simulated:
        if cfg.judged_path:
            judged = tinyultr.corpus.load_judged(cfg.judged_path)
        else:
            judged = tinyultr.simulate.make_judged_dataset(
                cfg.n_queries, cfg.n_docs, cfg.n_features, cfg.seed, cfg.label_noise
            )

        judged = tinyultr.corpus.filter_min_docs(judged, cfg.min_docs)
        simulated, heldout = tinyultr.corpus.split_judged(judged, cfg.heldout_fraction, cfg.seed)
        clicks = tinyultr.simulate.generate_log(simulated, cfg.policy, cfg.user_model, cfg.n_sessions, cfg.seed)
        truth = tinyultr.simulate.ground_truth(cfg.user_model)
    else:
        heldout = tinyultr.corpus.load_judged(cfg.judged_path)
        clicks = tinyultr.corpus.load_click_log(cfg.log_path)
        truth = None

    clicks = tinyultr.corpus.filter_min_docs(clicks, cfg.min_docs)
    train_log, val_log, test_log = tinyultr.corpus.split_log(clicks, cfg.fractions, cfg.seed)

    log.info(
        "Data: %d train, %d validation, %d test sessions; %d held-out queries",
        len(train_log),
        len(val_log),
        len(test_log),
        len(heldout),
    )

    return PreparedData(train_log, val_log, test_log, heldout, truth)


def emit_plot_data(
    curves: Sequence[PropensityCurve], ctr: Optional[Sequence[float]] = None, out: Optional[PathLike] = None
) -> pd.DataFrame:
    """Return (and optionally write) the curves and the CTR per rank as long-format CSV rows.

    Columns are ``method``, ``rank`` and ``value``; the CTR series is named ``ctr`` and skips
    ranks without impressions.
    """

    rows = []

    for curve in curves:
        rows.extend((curve.method.value, k, float(value)) for k, value in enumerate(curve.values, 1))

    if ctr is not None:
        rows.extend(("ctr", k, float(value)) for k, value in enumerate(ctr, 1) if np.isfinite(value))

    frame = pd.DataFrame(rows, columns=["method", "rank", "value"])

    if out is not None:
        _write_csv(frame, out)

    return frame


def _write_csv(frame: pd.DataFrame, path: PathLike) -> None:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator="\n")
    tinyultr.utils.atomic_write_text(path, buffer.getvalue())


def _write_json(data, path: PathLike) -> None:
    tinyultr.utils.atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def _checkpoint_name(method: str, seed: int) -> str:
    return os.path.join("checkpoints", f"{method}-seed{seed}.json")


def _marks(
    summary: Summary, baseline: Summary, alpha: float, n_methods: int
) -> Dict[str, Significance]:
    metrics = [
        metric for metric in METRICS if summary.values(metric) is not None and baseline.values(metric) is not None
    ]
    result = {}

    if len(summary.reports) < 2:
        return result

    for metric in metrics:
        result[metric] = tinyultr.evaluation.paired_ttest(
            summary.values(metric),
            baseline.values(metric),
            alpha,
            n_comparisons=max(1, n_methods) * len(metrics),
            higher_is_better=metric not in LOWER_IS_BETTER,
        ).significance

    return result


class Pipeline(object):
    """One experiment run writing into its output directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.log = logging.getLogger(__name__ + "." + self.__class__.__name__)

        self.cfg = cfg
        self.out = cfg.output_dir
        self.gain = Gain(cfg.gain)

        self.data: Optional[PreparedData] = None
        self.curves: Dict[str, PropensityCurve] = {}
        self.training: Dict[Tuple[str, int], dict] = {}
        self.summaries: Dict[str, Summary] = {}

    def path(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    @contextlib.contextmanager
    def stage(self, name: str):
        self.log.info("Stage '%s' started", name)

        try:
            yield
        except PipelineError:
            raise
        except Exception as e:
            raise PipelineError(name, f"{type(e).__name__}: {e}") from e

        self.log.info("Stage '%s' done", name)

    def run(self) -> str:
        """Run every stage, then write the manifest, also when a stage fails.

        Raises:
            tinyultr.exceptions.PipelineError: If a stage fails.

        Returns:
            str: The output directory.
        """

        os.makedirs(self.out, exist_ok=True)
        failure = None

        try:
            for name, method in [
                ("data", self.run_data),
                ("propensity", self.run_propensity),
                ("train", self.run_train),
                ("evaluate", self.run_evaluate),
                ("report", self.run_report),
            ]:
                with self.stage(name):
                    method()
        except PipelineError as e:
            failure = e
            raise
        finally:
            self.write_manifest(failure)

        return self.out

    def run_data(self) -> None:
        self.data = prepare_data(self.cfg.data)

        if self.cfg.data.write_logs:
            os.makedirs(self.path("data"), exist_ok=True)

            for name in ("train", "val", "test"):
                tinyultr.corpus.save_click_log(getattr(self.data, name), self.path("data", f"{name}.jsonl"))

            tinyultr.corpus.save_judged(self.data.heldout, self.path("data", "heldout.txt"))

            if self.data.truth is not None:
                _write_json(
                    {"eta": self.cfg.data.user_model.eta, "propensities": self.data.truth.values.tolist()},
                    self.path("data", "ground_truth.json"),
                )

    def run_propensity(self) -> None:
        train_log = self.data.train
        source = self.cfg.propensity_source
        needed = any(kind.needs_curve for kind in self.cfg.kinds)

        if self.data.truth is not None:
            self.curves["ground-truth"] = self.data.truth

        for method in PropensityMethod.harvesting():
            try:
                self.curves[method.value] = tinyultr.propensity.estimate(train_log, method)
            except EstimationError as e:
                if needed and method.value == source:
                    raise
                self.log.warning("Skipped %s propensities: %s", method.value, e)

        if needed and source not in self.curves:
            raise EstimationError(f"No '{source}' propensity curve available.")

        with ResultStore(self.out, create=True) as store:
            for name, curve in self.curves.items():
                curve.save(self.path("curves", f"{name}.json"))
                store.add_curve(name, curve)

        emit_plot_data(list(self.curves.values()), tinyultr.propensity.ctr_by_rank(train_log), self.path(PLOT_FILE))

    def run_train(self) -> None:
        curve = self.curves.get(self.cfg.propensity_source)

        for kind in self.cfg.kinds:
            for seed in self.cfg.seeds:
                cfg = self.cfg.train_config(kind, seed, curve if kind.needs_curve else None)
                trained = tinyultr.train.train(self.data.train, self.data.val, cfg)

                tinyultr.model.save(trained.model, self.path(_checkpoint_name(kind.value, seed)))
                self.training[(kind.value, seed)] = {
                    "best_epoch": trained.best_epoch,
                    "stopped_epoch": trained.stopped_epoch,
                    "val_loss": trained.best_val_loss,
                }

                if kind.propensity_method is not None:
                    learned = tinyultr.propensity.extract_model_propensities(trained.model, kind.propensity_method)
                    learned.save(self.path("curves", f"{kind.value}-seed{seed}.json"))

    def run_evaluate(self) -> None:
        rows = []

        with ResultStore(self.out, create=True) as store:
            for kind in self.cfg.kinds:
                reports = []

                for seed in self.cfg.seeds:
                    model = tinyultr.model.load(self.path(_checkpoint_name(kind.value, seed)))
                    report = tinyultr.evaluation.evaluate_ranker(model, self.data.heldout, self.gain)
                    report = report.with_nll(tinyultr.evaluation.click_nll(model, self.data.test, kind))

                    store.add_report(kind.value, seed, report)
                    reports.append(report)
                    row = {"method": kind.value, "seed": seed, **report.to_dict()}
                    rows.append({**row, **self.training[(kind.value, seed)]})

                self.summaries[kind.value] = tinyultr.evaluation.aggregate(reports)

        _write_csv(pd.DataFrame(rows), self.path(REPORTS_FILE))

    def run_report(self) -> None:
        cfg = self.cfg
        rows = [
            TableRow(
                "Random",
                tinyultr.evaluation.random_baseline(self.data.heldout, len(cfg.seeds), cfg.data.seed, self.gain),
            )
        ]

        if cfg.data.simulated:
            rows.append(
                TableRow(
                    "Logging policy",
                    tinyultr.evaluation.logging_policy_baseline(
                        self.data.heldout, cfg.data.policy, len(cfg.seeds), cfg.data.seed, self.gain
                    ),
                )
            )

        if cfg.baseline_feature is not None:
            rows.append(
                TableRow(
                    f"Feature {cfg.baseline_feature}",
                    tinyultr.evaluation.feature_baseline(self.data.heldout, cfg.baseline_feature, self.gain),
                )
            )

        sections = []

        for group in GROUPS:
            kinds = [kind for kind in cfg.kinds if kind.group == group]

            if not kinds:
                continue

            n_methods = sum(not kind.is_naive for kind in kinds)
            baseline = self.summaries[kinds[0].naive.value]
            group_rows = []

            for kind in kinds:
                summary = self.summaries[kind.value]
                marks = {} if kind.is_naive else _marks(summary, baseline, cfg.alpha, n_methods)
                group_rows.append(TableRow(kind.value, summary, marks))

            sections.append(f"## {GROUP_TITLES[group]}\n\n" + tinyultr.evaluation.render_table(group_rows))

        text = "\n".join(
            [
                "# Results\n",
                f"Held-out queries: {len(self.data.heldout)}; seeds: {list(cfg.seeds)}; "
                f"DCG gain: {self.gain.value}; marks: two-sided paired t-test against the naive method "
                f"of each group, alpha {cfg.alpha} with Bonferroni correction.\n",
                "## Baselines\n\n" + tinyultr.evaluation.render_table(rows),
                *sections,
            ]
        )

        tinyultr.utils.atomic_write_text(self.path(TABLE_FILE), text)

    def write_manifest(self, failure: Optional[PipelineError] = None) -> None:
        """Write the manifest listing every output file with its SHA-256."""

        files = {
            name: tinyultr.utils.sha256(self.path(name))
            for name in tinyultr.utils.list_files(self.out)
            if name != MANIFEST_FILE
        }
        manifest = {
            "tool": "tinyultr",
            "version": tinyultr.__version__,
            "status": "ok" if failure is None else "failed",
            "failed_stage": None if failure is None else failure.stage,
            "error": None if failure is None else str(failure),
            "config": self.cfg.to_dict(),
            "files": files,
        }

        _write_json(manifest, self.path(MANIFEST_FILE))


def run_pipeline(cfg: ExperimentConfig) -> str:
    """Run the experiment end to end.

    Writes into ``cfg.output_dir``: per-seed checkpoints, propensity curves, ``reports.csv``
    (one row per method and seed), ``results.json`` (the result store), ``results.md`` (the
    aggregate table with significance marks), ``propensity_plot.csv`` and ``manifest.json``.
    Outputs of completed stages are kept when a later stage fails; the manifest names the stage.

    Raises:
        tinyultr.exceptions.PipelineError: If a stage fails.

    Returns:
        str: The output directory.
    """

    return Pipeline(cfg).run()


class RunRef(NamedTuple):
    """A method's reports in a run directory, written ``DIR`` or ``DIR@METHOD``."""

    directory: str
    method: str

    @property
    def label(self) -> str:
        return f"{os.path.basename(os.path.normpath(self.directory))}@{self.method}"


def resolve_run(ref: str) -> Tuple[RunRef, List[int], Summary]:
    """Return the run reference, its seeds and the summary of its reports.

    Raises:
        FileNotFoundError: If the run has no result store.
        tinyultr.exceptions.ValidationError: If the method is ambiguous or absent.
    """

    directory, __, method = ref.partition("@")

    with ResultStore(directory) as store:
        methods = store.methods()

        if not method:
            if len(methods) != 1:
                raise ValidationError(f"Run {directory} holds methods {methods}; pick one with {directory}@METHOD.")
            method = methods[0]

        if method not in methods:
            raise ValidationError(f"Run {directory} has no reports for '{method}'.")

        seeds = store.seeds(method)
        summary = tinyultr.evaluation.aggregate(store.metric_reports(method))

    return RunRef(directory, method), seeds, summary


class Comparison(NamedTuple):
    table: str
    frame: pd.DataFrame


def compare(
    runs: Sequence[str],
    baseline: str,
    alpha: float = 0.01,
    out: Optional[PathLike] = None,
    metrics: Sequence[str] = METRICS,
) -> Comparison:
    """Test every run against the baseline run, metric by metric.

    Each metric gets a two-sided paired t-test over seeds at alpha / n, where n is the number of
    non-baseline runs times the number of metrics compared. With ``out`` set, writes
    ``compare.md`` and ``compare.csv`` into that directory.

    Args:
        runs (list[str]): Run references, ``DIR`` or ``DIR@METHOD``.
        baseline (str): Baseline run reference.
        alpha (float): Family-wise significance level.
        out (str): Output directory.
        metrics (list[str]): Metrics to compare.

    Raises:
        tinyultr.exceptions.ValidationError: If the runs do not share the baseline's seeds.

    Returns:
        Comparison: The markdown table and one CSV row per run and metric.
    """

    unknown = sorted(set(metrics) - set(METRICS))

    if unknown:
        raise ValidationError(f"Unknown metric(s): {', '.join(unknown)}")

    base_ref, base_seeds, base_summary = resolve_run(baseline)
    resolved = [resolve_run(ref) for ref in runs]

    for ref, seeds, __ in resolved:
        if seeds != base_seeds:
            raise ValidationError(f"{ref.label} has seeds {seeds}, baseline {base_ref.label} has {base_seeds}.")

    n_runs = max(1, sum(ref != base_ref for ref, __, __ in resolved))
    n_comparisons = n_runs * len(metrics)
    rows = [TableRow(f"{base_ref.label} (baseline)", base_summary)]
    records = []

    for ref, __, summary in resolved:
        marks = {}

        for metric in metrics:
            a, b = summary.values(metric), base_summary.values(metric)

            if a is None or b is None:
                continue

            result = tinyultr.evaluation.paired_ttest(
                a, b, alpha, n_comparisons, higher_is_better=metric not in LOWER_IS_BETTER
            )
            marks[metric] = result.significance
            records.append(
                {
                    "run": ref.label,
                    "baseline": base_ref.label,
                    "metric": metric,
                    "mean": summary.mean[metric],
                    "sd": summary.sd[metric],
                    "baseline_mean": base_summary.mean[metric],
                    "t": result.t,
                    "p": result.p,
                    "significance": result.significance.value,
                    "degenerate": result.degenerate,
                    "n_comparisons": n_comparisons,
                }
            )

        rows.append(TableRow(ref.label, summary, marks))

    table = tinyultr.evaluation.render_table(rows)
    frame = pd.DataFrame(
        records,
        columns=[
            "run",
            "baseline",
            "metric",
            "mean",
            "sd",
            "baseline_mean",
            "t",
            "p",
            "significance",
            "degenerate",
            "n_comparisons",
        ],
    )

    if out is not None:
        os.makedirs(out, exist_ok=True)
        tinyultr.utils.atomic_write_text(os.path.join(out, "compare.md"), table)
        _write_csv(frame, os.path.join(out, "compare.csv"))

    log.info("Compared %d run(s) against %s at alpha %s / %d", len(resolved), base_ref.label, alpha, n_comparisons)

    return Comparison(table, frame)
