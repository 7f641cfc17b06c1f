"""Test suite for comparing stored runs."""

import pytest

import tinyultr.harness

from tinyultr.evaluation import CUTOFFS, MetricReport, Significance
from tinyultr.exceptions import ValidationError
from tinyultr.harness import RunRef
from tinyultr.storage import ResultStore

BASE = [1.0, 2.0, 1.5, 3.0, 2.5]
GAIN = [1.0, 1.2, 0.8, 1.1, 0.9]


def _report(value, nll=None):
    return MetricReport({k: value for k in CUTOFFS}, value, nll, 10)


def _store(path, method, values, seeds=None, nll=None):
    with ResultStore(path, create=True) as store:
        for seed, value in zip(seeds or range(len(values)), values):
            store.add_report(method, seed, _report(value, nll))


@pytest.fixture()
def runs(fs):
    fs.create_dir("/runs/a")
    fs.create_dir("/runs/b")

    _store("/runs/a", "naive-pointwise", BASE)
    _store("/runs/a", "ips-pointwise", [x + d for x, d in zip(BASE, GAIN)])
    _store("/runs/b", "dla", BASE)

    return "/runs"


def test_resolve_run(runs):
    ref, seeds, summary = tinyultr.harness.resolve_run("/runs/a@ips-pointwise")

    assert ref == RunRef("/runs/a", "ips-pointwise")
    assert ref.label == "a@ips-pointwise"
    assert seeds == [0, 1, 2, 3, 4]
    assert summary.mean["dcg@10"] == pytest.approx(3.0)
    assert summary.mean["nll"] is None


def test_resolve_single_method(runs):
    ref, __, __ = tinyultr.harness.resolve_run("/runs/b")

    assert ref.method == "dla"


@pytest.mark.parametrize(
    "ref,error",
    [
        ("/runs/a", ValidationError),
        ("/runs/a@dla", ValidationError),
        ("/runs/c", FileNotFoundError),
    ],
    ids=["ambiguous", "absent method", "absent run"],
)
def test_resolve_run_invalid(runs, ref, error):
    with pytest.raises(error):
        tinyultr.harness.resolve_run(ref)


def test_compare(runs):
    result = tinyultr.harness.compare(["/runs/a@ips-pointwise"], "/runs/a@naive-pointwise", out="/out")

    frame = result.frame

    assert list(frame["metric"]) == ["dcg@1", "dcg@3", "dcg@5", "dcg@10", "mrr@10"]
    assert (frame["significance"] == Significance.BETTER.value).all()
    assert (frame["n_comparisons"] == 6).all()
    assert frame["t"].iloc[0] == pytest.approx(200 ** 0.5, rel=1e-9)

    lines = result.table.splitlines()

    assert lines[2].startswith("| a@naive-pointwise (baseline) | 2.0000 ± 0.7906 |")
    assert lines[3].startswith("| a@ips-pointwise | 3.0000 ± 0.8515 ▲ |")

    with open("/out/compare.md", "r") as fp:
        assert fp.read() == result.table

    with open("/out/compare.csv", "r") as fp:
        assert fp.readline() == "run,baseline,metric,mean,sd,baseline_mean,t,p,significance,degenerate,n_comparisons\n"


def test_compare_against_itself(runs):
    result = tinyultr.harness.compare(["/runs/b"], "/runs/b", metrics=["dcg@10"])

    assert list(result.frame["significance"]) == ["none"]
    assert list(result.frame["degenerate"]) == [True]
    assert list(result.frame["n_comparisons"]) == [1]


def test_compare_lower_nll_is_better(fs):
    _store("/runs/x.json", "naive-pointwise", BASE, nll=0.5)
    _store("/runs/y.json", "two-tower", BASE, nll=0.3)

    with ResultStore("/runs/y.json") as store:
        for seed, value in enumerate([0.30, 0.31, 0.29, 0.30, 0.32]):
            store.add_report("two-tower", seed, _report(BASE[seed], value))

    result = tinyultr.harness.compare(["/runs/y.json"], "/runs/x.json", metrics=["nll"])

    assert list(result.frame["significance"]) == ["better"]


def test_compare_seed_mismatch(runs):
    _store("/runs/c.json", "dla", BASE[:3])

    with pytest.raises(ValidationError):
        tinyultr.harness.compare(["/runs/c.json"], "/runs/b")


def test_compare_unknown_metric(runs):
    with pytest.raises(ValidationError):
        tinyultr.harness.compare(["/runs/b"], "/runs/b", metrics=["ndcg@10"])
