"""Memory-cycle pipelines; each reads a RunConfig and writes under --output-dir.

    python cli.py run --config configs/synthetic.json --seed 1
    python cli.py train-on --config configs/synthetic.json --epochs 5
    python cli.py report --log runs/trajectories.jsonl
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from clients.chat import build_chat_endpoint
from clients.embedding import build_embedding_provider
from clients.runtime import Runtime, build_runtime
from environment_handlers.agent import agent_factory, sample_trajectories
from environment_handlers.corpus import load_environment
from memory_handlers.store import deserialize_trajectories, serialize_trajectories
from memory_handlers.utilization import (
    build_dpo_dataset,
    build_sft_dataset,
    dpo_loss,
    sft_loss,
)
from pydantic_models.config import RunConfig
from pydantic_models.memory import Trajectory
from pydantic_models.utilization import (
    DpoRecord,
    PreferenceLogprobs,
    SftRecord,
    TargetLogprobs,
)
from training_handlers.optimization import (
    filter_successful,
    initial_bundle,
    off_policy_optimize,
    on_policy_optimize,
)
from training_handlers.scorer_pretraining import evaluate_scorer_grid, pretrain_scorers
from utils.dataframe import summarize, trajectories_to_dataframe
from utils.errors import ContractError, ParseError, StageError
from utils.jsonl import read_models, write_models
from visualizations.plots import epoch_figures, steps_figure

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_BAD_CONFIG = 2

# flag name -> path in the RunConfig document
OVERRIDES = {
    "seed": ("seed",),
    "output_dir": ("output_dir",),
    "parallelism": ("parallelism",),
    "policy": ("policy", "kind"),
    "epochs": ("optimization", "epochs"),
    "sample_batch": ("optimization", "sample_batch"),
    "bundle": ("bundle_path",),
}


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for error in exc.errors():
        location = ".".join(str(part) for part in error["loc"]) or "<root>"
        lines.append(f"{location}: {error['msg']}")
    return "\n".join(lines)


def load_config(args: argparse.Namespace) -> RunConfig:
    """File values, then flags on top (flag > file > default)."""
    document: dict = {}
    if args.config:
        document = json.loads(Path(args.config).read_text())
        if not isinstance(document, dict):
            raise ContractError("a run config must be a JSON object")
    for flag, path in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        target = document
        for key in path[:-1]:
            target = target.setdefault(key, {})
        target[path[-1]] = value
    return RunConfig.model_validate(document)


def _output(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_log(path: str) -> list[Trajectory]:
    return deserialize_trajectories(Path(path).read_bytes())


def _log_path(args: argparse.Namespace, config: RunConfig) -> str:
    return args.log or str(Path(config.output_dir) / "trajectories.jsonl")


def _environment(config: RunConfig):
    return load_environment(config.environment, np.random.default_rng([config.seed, 0]))


def _bundle(runtime: Runtime):
    return initial_bundle(runtime) if runtime.config.policy.kind == "cycle" else None


def cmd_run(config: RunConfig, args: argparse.Namespace) -> int:
    out = _output(config)
    runtime = build_runtime(config)
    corpus, tasks = _environment(config)
    bundle = _bundle(runtime)
    trajectories, timings = sample_trajectories(
        tasks,
        corpus,
        agent_factory(runtime, bundle),
        seed=[config.seed],
        parallelism=config.parallelism,
        prefix=f"run-{config.policy.kind}",
        bundle_version=bundle.version if bundle else 0,
    )
    (out / "trajectories.jsonl").write_bytes(serialize_trajectories(trajectories))
    summary = summarize(trajectories_to_dataframe(trajectories))
    summary.to_csv(out / "summary.csv", index=False)
    if args.record_timings:
        timings.to_csv(out / "step_timings.csv", index=False)
    logger.info("wrote %d trajectories to %s", len(trajectories), out)
    return EXIT_OK


def cmd_train_off(config: RunConfig, args: argparse.Namespace) -> int:
    trajectories = _read_log(_log_path(args, config))
    runtime = build_runtime(config)
    bundle = off_policy_optimize(
        trajectories, initial_bundle(runtime), runtime, str(_output(config))
    )
    logger.info("off-policy optimization produced bundle v%d", bundle.version)
    return EXIT_OK


def cmd_train_on(config: RunConfig, args: argparse.Namespace) -> int:
    out = _output(config)
    runtime = build_runtime(config)
    corpus, tasks = _environment(config)
    bundle, metrics = on_policy_optimize(
        tasks,
        corpus,
        initial_bundle(runtime),
        runtime,
        str(out),
        record_timings=args.record_timings,
    )
    kept = metrics[~metrics["discarded"]].rename(columns={"mean_reward": "exact_match"})
    (out / "epoch_metrics.html").write_text(epoch_figures(kept))
    logger.info(
        "on-policy optimization finished at bundle v%d, final EM %.3f",
        bundle.version,
        metrics["mean_reward"].iloc[-1],
    )
    return EXIT_OK


def cmd_pretrain_scorers(config: RunConfig, args: argparse.Namespace) -> int:
    counts = pretrain_scorers(
        config.scorers,
        config.metrics,
        build_chat_endpoint(config.chat),
        build_embedding_provider(config.embedding),
        str(_output(config) / "scorers"),
        config.seed,
    )
    logger.info("scorer datasets: %s", counts)
    return EXIT_OK


def cmd_eval_scorers(config: RunConfig, args: argparse.Namespace) -> int:
    grid = evaluate_scorer_grid(
        config.scorers,
        build_chat_endpoint(config.chat),
        build_embedding_provider(config.embedding),
        str(_output(config) / "scorers"),
        config.seed,
    )
    logger.info("scorer evaluation:\n%s", grid.to_string(index=False))
    return EXIT_OK


def cmd_export_datasets(config: RunConfig, args: argparse.Namespace) -> int:
    out = _output(config)
    runtime = build_runtime(config)
    successes = filter_successful(
        _read_log(_log_path(args, config)), config.optimization.beta_r
    )
    sft_records, sft_skipped = build_sft_dataset(
        successes, runtime.expert, config.utilization.template
    )
    write_models(str(out / "sft.jsonl"), sft_records)
    tuned = runtime.chat.with_model(args.sft_model_ref or config.chat.model_ref)
    dpo_records, dpo_dropped = build_dpo_dataset(
        successes, tuned, config.optimization.dpo_beta, config.utilization.template
    )
    write_models(str(out / "dpo.jsonl"), dpo_records)
    # read back so a schema drift fails here rather than in the trainer
    read_models(str(out / "sft.jsonl"), SftRecord)
    read_models(str(out / "dpo.jsonl"), DpoRecord)
    logger.info(
        "exported %d SFT records (%d skipped) and %d DPO records (%d dropped)",
        len(sft_records),
        sft_skipped,
        len(dpo_records),
        dpo_dropped,
    )
    return EXIT_OK


def _loss_rows(args: argparse.Namespace, beta: float) -> list[dict]:
    rows = []
    if args.sft_logprobs:
        summary = sft_loss(read_models(args.sft_logprobs, TargetLogprobs))
        rows.append({"kind": "sft", **summary.model_dump()})
    if args.dpo_logprobs:
        summary = dpo_loss(read_models(args.dpo_logprobs, PreferenceLogprobs), beta)
        rows.append({"kind": "dpo", **summary.model_dump()})
    return rows


def cmd_report(config: RunConfig, args: argparse.Namespace) -> int:
    out = _output(config)
    summaries = trajectories_to_dataframe(_read_log(_log_path(args, config)))
    timings: Optional[pd.DataFrame] = None
    if args.timings:
        timings = pd.read_csv(args.timings)
    summarize(summaries, timings).to_csv(out / "report.csv", index=False)
    counts = (
        summaries.groupby(["memory_policy", "steps"]).size().reset_index(name="count")
    )
    (out / "report.html").write_text(steps_figure(counts))
    rows = _loss_rows(args, config.optimization.dpo_beta)
    if rows:
        pd.DataFrame(rows).to_csv(out / "loss_report.csv", index=False)
    logger.info("report written to %s", out / "report.csv")
    return EXIT_OK


def cmd_serve(config: RunConfig, args: argparse.Namespace) -> int:
    from main import serve

    serve(args.port)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "train-off": cmd_train_off,
    "train-on": cmd_train_on,
    "pretrain-scorers": cmd_pretrain_scorers,
    "eval-scorers": cmd_eval_scorers,
    "export-datasets": cmd_export_datasets,
    "report": cmd_report,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memcycle", description=__doc__.splitlines()[0]
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--parallelism", type=int)
    common.add_argument("--log-level", default="INFO")
    subparsers = parser.add_subparsers(dest="command", required=True)

    run = subparsers.add_parser("run", parents=[common], help="sample trajectories")
    run.add_argument(
        "--policy", choices=["cycle", "full", "long-term", "short-term", "fixed-weight"]
    )
    run.add_argument("--bundle", help="bundle directory to run with")
    run.add_argument("--record-timings", action="store_true")

    train_off = subparsers.add_parser(
        "train-off", parents=[common], help="optimize a bundle from a trajectory log"
    )
    train_off.add_argument("--log")
    train_off.add_argument("--bundle")

    train_on = subparsers.add_parser(
        "train-on", parents=[common], help="on-policy optimization loop"
    )
    train_on.add_argument("--epochs", type=int)
    train_on.add_argument("--sample-batch", dest="sample_batch", type=int)
    train_on.add_argument("--bundle")
    train_on.add_argument("--record-timings", action="store_true")

    subparsers.add_parser(
        "pretrain-scorers",
        parents=[common],
        help="train emotion and importance scorers",
    )
    subparsers.add_parser(
        "eval-scorers",
        parents=[common],
        help="evaluation grid of the pre-trained scorers",
    )

    export = subparsers.add_parser(
        "export-datasets", parents=[common], help="SFT and DPO datasets from a log"
    )
    export.add_argument("--log")
    export.add_argument("--sft-model-ref", dest="sft_model_ref")

    report = subparsers.add_parser("report", parents=[common], help="EM / steps report")
    report.add_argument("--log")
    report.add_argument("--timings", help="step_timings.csv of the same run")
    report.add_argument("--sft-logprobs", dest="sft_logprobs")
    report.add_argument("--dpo-logprobs", dest="dpo_logprobs")

    serve = subparsers.add_parser(
        "serve", parents=[common], help="trajectory registry API"
    )
    serve.add_argument("--port", type=int)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args)
    except ValidationError as exc:
        print(f"invalid config:\n{format_validation_error(exc)}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except (OSError, json.JSONDecodeError, ContractError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    try:
        return COMMANDS[args.command](config, args)
    except StageError as exc:
        logger.error("%s (partial bundle persisted)", exc)
    except (ContractError, ParseError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
    return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
