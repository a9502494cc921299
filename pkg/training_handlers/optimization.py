import logging
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from clients.runtime import Runtime
from environment_handlers.agent import agent_factory, sample_trajectories
from environment_handlers.corpus import Corpus
from memory_handlers.retrieval_gate import (
    examples_from_trajectories,
    init_gate_params,
    load_gate,
    save_gate,
    train_gate,
)
from memory_handlers.storage import (
    partition_trajectories,
    reflect,
    sample_group,
    update_task_prompt,
)
from memory_handlers.store import serialize_trajectories
from memory_handlers.utilization import build_dpo_dataset, build_sft_dataset
from pydantic_models.bundle import BundleManifest, EpochMetrics, PolicyBundle
from pydantic_models.config import PhaseConfig
from pydantic_models.environment import QaTask
from pydantic_models.memory import Trajectory
from pydantic_models.storage import TaskPrompt
from pydantic_models.utilization import DpoRecord, SftRecord, UtilizationPolicy
from training_handlers.fine_tune_hook import run_fine_tune_hook
from utils.errors import ContractError, StageError
from utils.jsonl import write_models
from visualizations.plots import loss_curve

logger = logging.getLogger(__name__)

BUNDLE_FILES = ["gate.json", "task_prompt.json", "utilization.json"]


def filter_successful(
    trajectories: list[Trajectory], beta_r: float
) -> list[Trajectory]:
    if not 0.0 <= beta_r <= 1.0:
        raise ContractError(f"success threshold must lie in [0, 1], got {beta_r}")
    return [t for t in trajectories if t.reward >= beta_r]


def bundle_dir(root: str, version: int) -> Path:
    return Path(root) / f"bundle_v{version}"


def save_bundle(
    bundle: PolicyBundle,
    root: str,
    stage: str = "complete",
    parent_version: Optional[int] = None,
) -> Path:
    target = bundle_dir(root, bundle.version)
    target.mkdir(parents=True, exist_ok=True)
    save_gate(bundle.gate, str(target / "gate.json"))
    prompt_json = bundle.task_prompt.model_dump_json(by_alias=True)
    (target / "task_prompt.json").write_text(prompt_json)
    (target / "utilization.json").write_text(bundle.utilization.model_dump_json())
    manifest = BundleManifest(
        version=bundle.version,
        parent_version=parent_version,
        stage=stage,
        files=BUNDLE_FILES,
    )
    (target / "manifest.json").write_text(manifest.model_dump_json())
    logger.info("bundle v%d saved to %s (stage %s)", bundle.version, target, stage)
    return target


def load_bundle(path: str) -> PolicyBundle:
    source = Path(path)
    manifest = BundleManifest.model_validate_json(
        (source / "manifest.json").read_text()
    )
    if manifest.stage != "complete":
        logger.warning(
            "bundle v%d is partial (stopped at %s)", manifest.version, manifest.stage
        )
    return PolicyBundle(
        version=manifest.version,
        gate=load_gate(str(source / "gate.json")),
        task_prompt=TaskPrompt.model_validate_json(
            (source / "task_prompt.json").read_text()
        ),
        utilization=UtilizationPolicy.model_validate_json(
            (source / "utilization.json").read_text()
        ),
    )


def initial_bundle(runtime: Runtime) -> PolicyBundle:
    """Bundle v0 from a configured bundle directory, a stored gate or a fresh gate."""
    config = runtime.config
    if config.bundle_path:
        return load_bundle(config.bundle_path)
    if config.retrieval.gate_path:
        gate = load_gate(config.retrieval.gate_path)
        if gate.metric_names != runtime.suite.names:
            raise ContractError(
                f"gate mixes {gate.metric_names}, "
                f"metric suite provides {runtime.suite.names}"
            )
    else:
        gate = init_gate_params(
            runtime.provider.dim,
            runtime.suite.names,
            hidden=config.retrieval.gate_hidden,
            scale=config.retrieval.init_scale,
            rng=np.random.default_rng([config.seed, 2]),
        )
    return PolicyBundle(
        version=0,
        gate=gate,
        utilization=UtilizationPolicy(
            model_ref=config.chat.model_ref, beta=config.optimization.dpo_beta
        ),
    )


class _Stages:
    """Runs named stages; a failure persists the partial bundle with its stage."""

    def __init__(self, output_dir: str, parent_version: int):
        self.output_dir = output_dir
        self.parent_version = parent_version

    def run(self, stage: str, bundle: PolicyBundle, step: Callable[[], PolicyBundle]):
        logger.info("stage %s (bundle v%d)", stage, bundle.version)
        try:
            return step()
        except Exception as exc:
            logger.error("stage %s failed: %s", stage, exc)
            save_bundle(
                bundle, self.output_dir, stage=stage, parent_version=self.parent_version
            )
            raise StageError(stage, exc) from exc


def _gate_stage(
    bundle: PolicyBundle,
    successes: list[Trajectory],
    runtime: Runtime,
    phase: PhaseConfig,
    rng: np.random.Generator,
    loss_path: Optional[Path] = None,
) -> tuple[PolicyBundle, Optional[float]]:
    optimization = runtime.config.optimization
    examples = examples_from_trajectories(successes, runtime.suite, runtime.provider)
    if not examples or phase.gate_steps == 0:
        logger.warning("no ranking examples from successes, gate unchanged")
        return bundle, None
    gate, log = train_gate(
        bundle.gate,
        examples,
        lr=optimization.alpha_r,
        steps=phase.gate_steps,
        gamma=optimization.gamma,
        batch_size=optimization.gate_batch,
        rng=rng,
    )
    if loss_path is not None:
        loss_path.parent.mkdir(parents=True, exist_ok=True)
        log.to_csv(loss_path, index=False)
        chart = loss_curve(log, title=f"Gate Loss (bundle v{bundle.version})")
        loss_path.with_suffix(".html").write_text(chart)
    return bundle.model_copy(update={"gate": gate}), float(log["loss"].iloc[-1])


def _sft_stage(
    bundle: PolicyBundle,
    records: list[SftRecord],
    runtime: Runtime,
    phase: PhaseConfig,
    dataset_path: Path,
) -> PolicyBundle:
    write_models(str(dataset_path), records)
    if not records:
        logger.warning("SFT dataset is empty, utilization model unchanged")
        return bundle.model_copy(
            update={
                "utilization": bundle.utilization.model_copy(
                    update={"sft_dataset_path": str(dataset_path)}
                )
            }
        )
    model_ref = run_fine_tune_hook(
        runtime.config.optimization.fine_tune_command,
        "sft",
        str(dataset_path),
        bundle.utilization.model_ref,
        phase.sft_lr,
        phase.sft_batch,
    )
    utilization = bundle.utilization.model_copy(
        update={"model_ref": model_ref, "sft_dataset_path": str(dataset_path)}
    )
    return bundle.model_copy(update={"utilization": utilization})


def _dpo_stage(
    bundle: PolicyBundle,
    records: list[DpoRecord],
    runtime: Runtime,
    phase: PhaseConfig,
    dataset_path: Path,
) -> PolicyBundle:
    write_models(str(dataset_path), records)
    model_ref = bundle.utilization.model_ref
    if records:
        model_ref = run_fine_tune_hook(
            runtime.config.optimization.fine_tune_command,
            "dpo",
            str(dataset_path),
            model_ref,
            phase.dpo_lr,
            phase.dpo_batch,
        )
    else:
        logger.warning("DPO dataset is empty, utilization model unchanged")
    utilization = bundle.utilization.model_copy(
        update={"model_ref": model_ref, "dpo_dataset_path": str(dataset_path)}
    )
    return bundle.model_copy(update={"utilization": utilization})


def _storage_stage(
    bundle: PolicyBundle,
    trajectories: list[Trajectory],
    runtime: Runtime,
    phase: PhaseConfig,
    rng: np.random.Generator,
) -> tuple[PolicyBundle, int]:
    config = runtime.config
    positive, negative = partition_trajectories(
        trajectories, config.optimization.beta_s
    )
    positive_hints = reflect(
        runtime.chat,
        sample_group(positive, phase.reflection_size, rng),
        "positive",
        lines=config.storage.lines_per_reflection,
        template=config.storage.success_template,
    )
    negative_hints = reflect(
        runtime.chat,
        sample_group(negative, phase.reflection_size, rng),
        "negative",
        lines=config.storage.lines_per_reflection,
        template=config.storage.failure_template,
    )
    prompt = update_task_prompt(
        bundle.task_prompt, positive_hints, negative_hints, config.storage.max_hints
    )
    added = len(set(prompt.hints) - set(bundle.task_prompt.hints))
    logger.info(
        "reflection over %d positive / %d negative trajectories added %d hints",
        len(positive),
        len(negative),
        added,
    )
    return bundle.model_copy(update={"task_prompt": prompt}), added


def off_policy_optimize(
    trajectories: list[Trajectory],
    bundle: PolicyBundle,
    runtime: Runtime,
    output_dir: str,
) -> PolicyBundle:
    """Gate, SFT, DPO and reflection over one fixed trajectory log.

    The input log and bundle are left untouched; the result is saved as version + 1.
    """
    if not trajectories:
        raise ContractError("off-policy optimization needs a non-empty trajectory log")
    config = runtime.config
    phase = config.optimization.off_policy
    rng = np.random.default_rng([config.seed, 3])
    successes = filter_successful(trajectories, config.optimization.beta_r)
    if not successes:
        logger.warning(
            "no successful trajectories at beta_r=%s", config.optimization.beta_r
        )
    version = bundle.version + 1
    out = Path(output_dir)
    stages = _Stages(output_dir, bundle.version)
    current = bundle.model_copy(update={"version": version})

    current, _ = stages.run(
        "gate",
        current,
        lambda: _gate_stage(
            current, successes, runtime, phase, rng, out / f"gate_loss_v{version}.csv"
        ),
    )
    sft_records = stages.run(
        "sft-dataset",
        current,
        lambda: build_sft_dataset(
            successes, runtime.expert, config.utilization.template
        )[0],
    )
    current = stages.run(
        "sft",
        current,
        lambda: _sft_stage(
            current, sft_records, runtime, phase, out / f"sft_v{version}.jsonl"
        ),
    )
    tuned = runtime.chat.with_model(current.utilization.model_ref)
    dpo_records = stages.run(
        "dpo-dataset",
        current,
        lambda: build_dpo_dataset(
            successes, tuned, current.utilization.beta, config.utilization.template
        )[0],
    )
    current = stages.run(
        "dpo",
        current,
        lambda: _dpo_stage(
            current, dpo_records, runtime, phase, out / f"dpo_v{version}.jsonl"
        ),
    )
    current, _ = stages.run(
        "storage",
        current,
        lambda: _storage_stage(current, trajectories, runtime, phase, rng),
    )
    save_bundle(current, output_dir, parent_version=bundle.version)
    return current


def _epoch_row(
    epoch: int,
    version: int,
    trajectories: list[Trajectory],
    gate_loss: Optional[float] = None,
    new_hints: int = 0,
    discarded: bool = False,
) -> dict:
    rewards = [t.reward for t in trajectories]
    steps = [len(t.steps) for t in trajectories]
    return EpochMetrics(
        epoch=epoch,
        bundle_version=version,
        trajectories=len(trajectories),
        mean_reward=float(np.mean(rewards)) if rewards else 0.0,
        mean_steps=float(np.mean(steps)) if steps else 0.0,
        gate_loss=gate_loss,
        new_hints=new_hints,
        discarded=discarded,
    ).model_dump()


def _epoch_tasks(
    tasks: list[QaTask], size: int, rng: np.random.Generator
) -> list[QaTask]:
    if len(tasks) <= size:
        return list(tasks)
    chosen = np.sort(rng.choice(len(tasks), size=size, replace=False))
    return [tasks[i] for i in chosen]


def on_policy_optimize(
    tasks: list[QaTask],
    corpus: Corpus,
    bundle: PolicyBundle,
    runtime: Runtime,
    output_dir: str,
    record_timings: bool = False,
) -> tuple[PolicyBundle, pd.DataFrame]:
    """Sample with the current bundle, update it once, repeat for every epoch.

    Row l of the metrics frame is measured on trajectories sampled with the bundle
    current at epoch l; the last row evaluates the final bundle without updating it.
    Wall-clock step timings go to step_timings.csv only when `record_timings` is set.
    """
    if not tasks:
        raise ContractError("on-policy optimization needs at least one task")
    config = runtime.config
    optimization = config.optimization
    phase = optimization.on_policy
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sft_records: list[SftRecord] = []
    dpo_records: list[DpoRecord] = []
    rows: list[dict] = []
    log: list[Trajectory] = []
    timings: list[pd.DataFrame] = []
    current = bundle

    def sample(epoch: int) -> list[Trajectory]:
        rng = np.random.default_rng([optimization.seed, epoch])
        trajectories, timing = sample_trajectories(
            _epoch_tasks(tasks, optimization.sample_batch, rng),
            corpus,
            agent_factory(runtime, current),
            seed=[config.seed, epoch],
            parallelism=config.parallelism,
            prefix=f"epoch{epoch}",
            bundle_version=current.version,
            epoch=epoch,
        )
        timings.append(timing)
        return trajectories

    for epoch in range(optimization.epochs):
        try:
            trajectories = sample(epoch)
        except (ContractError, OSError, RuntimeError) as exc:
            logger.warning(
                "epoch %d discarded, keeping bundle v%d: %s",
                epoch,
                current.version,
                exc,
            )
            rows.append(_epoch_row(epoch, current.version, [], discarded=True))
            continue
        log.extend(trajectories)
        rng = np.random.default_rng([optimization.seed, epoch, 1])
        successes = filter_successful(trajectories, optimization.beta_r)
        if not successes:
            logger.warning("epoch %d produced no successful trajectories", epoch)
        version = current.version + 1
        stages = _Stages(output_dir, current.version)
        updated = current.model_copy(update={"version": version})

        updated, gate_loss = stages.run(
            "gate",
            updated,
            lambda: _gate_stage(updated, successes, runtime, phase, rng),
        )
        sft_records.extend(
            stages.run(
                "sft-dataset",
                updated,
                lambda: build_sft_dataset(
                    successes, runtime.expert, config.utilization.template
                )[0],
            )
        )
        updated = stages.run(
            "sft",
            updated,
            lambda: _sft_stage(
                updated, sft_records, runtime, phase, out / f"sft_v{version}.jsonl"
            ),
        )
        tuned = runtime.chat.with_model(updated.utilization.model_ref)
        dpo_records.extend(
            stages.run(
                "dpo-dataset",
                updated,
                lambda: build_dpo_dataset(
                    successes,
                    tuned,
                    updated.utilization.beta,
                    config.utilization.template,
                )[0],
            )
        )
        updated = stages.run(
            "dpo",
            updated,
            lambda: _dpo_stage(
                updated, dpo_records, runtime, phase, out / f"dpo_v{version}.jsonl"
            ),
        )
        updated, added = stages.run(
            "storage",
            updated,
            lambda: _storage_stage(updated, trajectories, runtime, phase, rng),
        )
        save_bundle(updated, output_dir, parent_version=current.version)
        rows.append(_epoch_row(epoch, current.version, trajectories, gate_loss, added))
        logger.info(
            "epoch %d: mean reward %.3f, mean steps %.2f, bundle v%d -> v%d",
            epoch,
            rows[-1]["mean_reward"],
            rows[-1]["mean_steps"],
            current.version,
            updated.version,
        )
        current = updated

    final = sample(optimization.epochs)
    log.extend(final)
    rows.append(_epoch_row(optimization.epochs, current.version, final))
    metrics = pd.DataFrame(rows, columns=list(EpochMetrics.model_fields))
    metrics.to_csv(out / "epoch_metrics.csv", index=False)
    (out / "trajectories.jsonl").write_bytes(serialize_trajectories(log))
    if record_timings and timings:
        pd.concat(timings, ignore_index=True).to_csv(
            out / "step_timings.csv", index=False
        )
    return current, metrics
