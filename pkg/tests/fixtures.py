"""Builders shared by the test modules."""

from typing import Optional

import numpy as np

from pydantic_models.config import (
    EmbeddingConfig,
    EndpointConfig,
    EnvironmentConfig,
    MetricConfig,
    OptimizationConfig,
    PhaseConfig,
    RunConfig,
)
from pydantic_models.memory import (
    AggregationTrace,
    MemoryStore,
    MemoryUnit,
    StepRecord,
    Trajectory,
)


def unit_vector(rng: np.random.Generator, dim: int) -> list[float]:
    vector = rng.standard_normal(dim)
    return (vector / np.linalg.norm(vector)).tolist()


def make_unit(
    unit_id: int,
    step: int,
    dim: int,
    rng: np.random.Generator,
    text: Optional[str] = None,
    kind: str = "observation",
) -> MemoryUnit:
    text = text or f"memory number {unit_id} written at step {step}"
    return MemoryUnit(
        id=unit_id,
        text=text,
        source=text,
        step=step,
        embedding=unit_vector(rng, dim),
        kind=kind,
    )


def random_store(
    rng: np.random.Generator, dim: int, size: int, max_step: int = 20
) -> MemoryStore:
    steps = np.sort(rng.integers(0, max_step + 1, size=size))
    ids = np.cumsum(rng.integers(1, 4, size=size))
    store = MemoryStore(dim=dim)
    for unit_id, step in zip(ids, steps):
        store.units.append(make_unit(int(unit_id), int(step), dim, rng))
    return store


def make_trajectory(
    trajectory_id: str,
    reward: float,
    dim: int = 8,
    steps: int = 2,
    rng: Optional[np.random.Generator] = None,
) -> Trajectory:
    """A small finished trajectory whose last step carries a two-merge aggregation."""
    rng = rng if rng is not None else np.random.default_rng(0)
    store = MemoryStore(dim=dim)
    records = []
    for step in range(1, steps + 1):
        store.units.append(
            make_unit(
                len(store.units), step, dim, rng, text=f"fact {step} of {trajectory_id}"
            )
        )
        visible = [unit.id for unit in store.units]
        ranked = list(reversed(visible))[:2]
        contexts = [""]
        for uid in ranked:
            contexts.append((contexts[-1] + " " + store.get(uid).text).strip())
        records.append(
            StepRecord(
                step=step,
                state_text=f"observation {step} of {trajectory_id}",
                store_size=len(store.units),
                ranked_ids=ranked,
                context=contexts[-1],
                thought="thinking",
                action="Search[x]" if step < steps else "Finish[x]",
                aggregation=AggregationTrace(
                    contexts=contexts,
                    merged_ids=ranked,
                    word_deltas=[3] * len(ranked),
                    gains=[1.0] * len(ranked),
                    stop_draws=[0] * (len(ranked) - 1),
                    stop_step=len(ranked),
                ),
                llm_calls=3,
                context_words=len(contexts[-1].split()),
            )
        )
    return Trajectory(
        id=trajectory_id,
        question=f"question of {trajectory_id}",
        gold_answer="x",
        steps=records,
        reward=reward,
        success=reward >= 0.5,
        memories=store,
    )


def synthetic_config(
    output_dir: str = "./runs/test",
    tasks: int = 4,
    epochs: int = 1,
    sample_batch: int = 4,
    seed: int = 0,
) -> RunConfig:
    """Offline config with the synthetic responder and 64-dim mock embeddings."""
    return RunConfig(
        seed=seed,
        output_dir=output_dir,
        chat=EndpointConfig(backend="scripted", responder="synthetic"),
        expert=EndpointConfig(
            backend="scripted", responder="synthetic", model_ref="utilization-expert"
        ),
        embedding=EmbeddingConfig(backend="deterministic-mock", dim=64),
        metrics=MetricConfig(
            relevance=True, emotion=False, importance=False, recency_powers=[1.0]
        ),
        environment=EnvironmentConfig(
            synthetic_tasks=tasks, synthetic_hops=2, max_steps=5
        ),
        optimization=OptimizationConfig(
            epochs=epochs,
            sample_batch=sample_batch,
            off_policy=PhaseConfig(gate_steps=5, reflection_size=40),
            on_policy=PhaseConfig(sft_lr=5e-4, reflection_size=15, gate_steps=1),
        ),
    )
