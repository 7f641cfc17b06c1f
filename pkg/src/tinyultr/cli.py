"""Command line interface."""

import argparse
import json
import logging
import os
import sys

from typing import List, Optional

import tinyultr
import tinyultr.corpus
import tinyultr.evaluation
import tinyultr.harness
import tinyultr.model
import tinyultr.propensity
import tinyultr.simulate
import tinyultr.train
import tinyultr.utils

from tinyultr.exceptions import ParseError, PipelineError, ValidationError
from tinyultr.harness import ExperimentConfig
from tinyultr.losses import LossKind
from tinyultr.propensity import PropensityCurve, PropensityMethod
from tinyultr.simulate import LoggingPolicy, PolicyKind, UserModelConfig
from tinyultr.train import TrainConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2

INVALID_INPUT = (ParseError, ValidationError, FileNotFoundError)


def _read_config(path: Optional[str]) -> dict:
    if not path:
        return {}

    with open(tinyultr.utils.check_path(path), "r", encoding="utf-8") as fp:
        try:
            data = json.load(fp)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: {e.msg}", e.lineno) from None
        except UnicodeDecodeError as e:
            raise ParseError(f"{path} is not valid UTF-8 at byte {e.start}.") from None

    if not isinstance(data, dict):
        raise ValidationError(f"Config {path} must hold a JSON object.")

    return data


def _override(data: dict, **values) -> dict:
    """Return the mapping with every value that is not None set."""

    return {**data, **{key: value for key, value in values.items() if value is not None}}


def cmd_simulate(args: argparse.Namespace) -> None:
    config = _read_config(args.config)
    user_model = UserModelConfig.from_dict(
        _override(
            config.get("user_model", {}),
            eta=args.eta,
            max_rank=args.max_rank,
            epsilon_minus=args.epsilon_minus,
            swap_fraction=args.swap_fraction,
        )
    )
    policy = LoggingPolicy.from_dict(
        _override(config.get("policy", {}), kind=args.policy, noise_sigma=args.noise_sigma)
    )
    n_sessions = args.n_sessions or config.get("n_sessions", 10000)
    seed = args.seed or 0

    if args.judged:
        judged = tinyultr.corpus.load_judged(args.judged)
    else:
        judged = tinyultr.simulate.make_judged_dataset(args.n_queries, args.n_docs, args.n_features, seed)

        if args.write_judged:
            tinyultr.corpus.save_judged(judged, args.write_judged)

    clicks = tinyultr.simulate.generate_log(judged, policy, user_model, n_sessions, seed)
    out = args.out or "clicks.jsonl"

    tinyultr.corpus.save_click_log(clicks, out)
    tinyultr.simulate.write_ground_truth(clicks, os.path.splitext(out)[0] + ".propensities.json")


def cmd_estimate(args: argparse.Namespace) -> None:
    method = PropensityMethod(args.method)

    if args.model:
        curve = tinyultr.propensity.extract_model_propensities(tinyultr.model.load(args.model), method)
    elif args.log:
        clicks = tinyultr.corpus.load_click_log(args.log)
        curve = tinyultr.propensity.estimate(clicks, method, args.n_ranks, args.pivot)
    else:
        raise ValidationError("estimate-propensity needs --log or --model.")

    if args.out:
        curve.save(args.out)
    else:
        print(json.dumps(curve.to_dict(), sort_keys=True))


def cmd_train(args: argparse.Namespace) -> None:
    config = _read_config(args.config)

    loss = config.get("loss", {})
    loss = {"kind": loss} if isinstance(loss, str) else dict(loss)

    if args.loss:
        loss["kind"] = args.loss

    if args.curve:
        loss["curve"] = PropensityCurve.load(args.curve).to_dict()

    if "kind" not in loss:
        raise ValidationError("Training needs a loss kind, from --loss or the config.")

    config["loss"] = loss

    cfg = TrainConfig.from_dict(_override(config, seed=args.seed))
    trained = tinyultr.train.train(
        tinyultr.corpus.load_click_log(args.train), tinyultr.corpus.load_click_log(args.val), cfg
    )

    tinyultr.model.save(trained.model, args.out or "model.json")


def cmd_evaluate(args: argparse.Namespace) -> None:
    model = tinyultr.model.load(args.model)
    report = tinyultr.evaluation.evaluate_ranker(
        model, tinyultr.corpus.load_judged(args.judged), tinyultr.evaluation.Gain(args.gain)
    )

    if args.log:
        clicks = tinyultr.corpus.load_click_log(args.log)
        report = report.with_nll(tinyultr.evaluation.click_nll(model, clicks, LossKind(args.loss)))

    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"

    if args.out:
        tinyultr.utils.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_compare(args: argparse.Namespace) -> None:
    metrics = args.metrics or tinyultr.evaluation.METRICS
    result = tinyultr.harness.compare(args.runs, args.baseline, args.alpha, args.out, metrics)

    sys.stdout.write(result.table)


def cmd_run(args: argparse.Namespace) -> None:
    config = _read_config(args.config)

    if args.seed is not None:
        config["data"] = _override(config.get("data", {}), seed=args.seed)

    cfg = ExperimentConfig.from_dict(_override(config, output_dir=args.out))
    out = tinyultr.harness.run_pipeline(cfg)

    print(out)


def cmd_emit_plot_data(args: argparse.Namespace) -> None:
    curves = [PropensityCurve.load(path) for path in args.curve or []]
    ctr = None

    if args.log:
        ctr = tinyultr.propensity.ctr_by_rank(tinyultr.corpus.load_click_log(args.log))

    tinyultr.harness.emit_plot_data(curves, ctr, args.out or "propensity_plot.csv")


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser with every subcommand."""

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed; 0 when omitted.")
    common.add_argument("--out", default=None, help="Output path.")
    common.add_argument("--config", default=None, help="JSON config file.")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG.")

    parser = argparse.ArgumentParser(prog="tinyultr", description="Unbiased learning to rank toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {tinyultr.__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    sub = subparsers.add_parser("simulate", parents=[common], help="Simulate a click log.")
    sub.add_argument("--judged", help="Judged dataset; a synthetic one is generated when omitted.")
    sub.add_argument("--write-judged", help="Write the generated judged dataset here.")
    sub.add_argument("--n-queries", type=int, default=100)
    sub.add_argument("--n-docs", type=int, default=20)
    sub.add_argument("--n-features", type=int, default=10)
    sub.add_argument("--n-sessions", type=int, default=None)
    sub.add_argument("--eta", type=float, default=None)
    sub.add_argument("--max-rank", type=int, default=None)
    sub.add_argument("--epsilon-minus", type=float, default=None)
    sub.add_argument("--swap-fraction", type=float, default=None)
    sub.add_argument("--policy", choices=PolicyKind.values(), default=None)
    sub.add_argument("--noise-sigma", type=float, default=None)
    sub.set_defaults(func=cmd_simulate)

    sub = subparsers.add_parser("estimate-propensity", parents=[common], help="Estimate a propensity curve.")
    sub.add_argument("--log", help="Click log for intervention harvesting.")
    sub.add_argument("--model", help="Checkpoint to extract a learned curve from.")
    sub.add_argument("--method", choices=PropensityMethod.values(), default=PropensityMethod.ALL_PAIRS.value)
    sub.add_argument("--n-ranks", type=int, default=None)
    sub.add_argument("--pivot", type=int, default=1)
    sub.set_defaults(func=cmd_estimate)

    sub = subparsers.add_parser("train", parents=[common], help="Train a scorer on clicks.")
    sub.add_argument("--train", required=True, help="Training click log.")
    sub.add_argument("--val", required=True, help="Validation click log.")
    sub.add_argument("--loss", choices=LossKind.values(), default=None)
    sub.add_argument("--curve", help="Propensity curve JSON for the IPS objectives.")
    sub.set_defaults(func=cmd_train)

    sub = subparsers.add_parser("evaluate", parents=[common], help="Evaluate a checkpoint.")
    sub.add_argument("--model", required=True)
    sub.add_argument("--judged", required=True, help="Annotated queries.")
    sub.add_argument("--log", help="Held-out click log for the click NLL.")
    sub.add_argument("--loss", choices=LossKind.values(), default=LossKind.NAIVE_POINTWISE.value)
    sub.add_argument("--gain", choices=tinyultr.evaluation.Gain.values(), default="linear")
    sub.set_defaults(func=cmd_evaluate)

    sub = subparsers.add_parser("compare", parents=[common], help="Compare runs against a baseline run.")
    sub.add_argument("runs", nargs="+", help="Runs as DIR or DIR@METHOD.")
    sub.add_argument("--baseline", required=True)
    sub.add_argument("--alpha", type=float, default=0.01)
    sub.add_argument("--metrics", nargs="*", choices=tinyultr.evaluation.METRICS, default=None)
    sub.set_defaults(func=cmd_compare)

    sub = subparsers.add_parser("run", parents=[common], help="Run an experiment end to end.")
    sub.set_defaults(func=cmd_run)

    sub = subparsers.add_parser("emit-plot-data", parents=[common], help="Write curves and CTR as plot data.")
    sub.add_argument("--curve", action="append", help="Propensity curve JSON; repeatable.")
    sub.add_argument("--log", help="Click log for the CTR series.")
    sub.set_defaults(func=cmd_emit_plot_data)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line; return the exit code."""

    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]

    logging.basicConfig(level=level, format="%(asctime)s [%(levelname)s] %(name)s: %(message)s", datefmt="%H:%M:%S")

    try:
        args.func(args)
    except INVALID_INPUT as e:
        log.error("%s", e)
        return EXIT_INVALID
    except PipelineError as e:
        log.error("%s", e)
        return EXIT_INVALID if isinstance(e.__cause__, INVALID_INPUT) else EXIT_FAILURE
    except Exception as e:
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_FAILURE

    return EXIT_OK
