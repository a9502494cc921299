import logging
from typing import Optional

import numpy as np

from clients.chat import ChatEndpoint
from clients.embedding import EmbeddingProvider
from memory_handlers.metric_functions import embed
from pydantic_models.memory import MemoryUnit, Trajectory
from pydantic_models.storage import ObservationCache, TaskPrompt
from utils.errors import ContractError, EndpointError, ScriptExhaustedError

logger = logging.getLogger(__name__)

SUCCESS_REFLECTION_TEMPLATE = (
    "The following observations were stored as memories during tasks that were solved "
    "successfully.\n{examples}\n"
    "Summarize what information, when stored, enabled success. Answer with at most "
    "{lines} short imperative hints for the memory extractor, one per line."
)

FAILURE_REFLECTION_TEMPLATE = (
    "The following observations were stored as memories during tasks that failed.\n"
    "{examples}\n"
    "Summarize what information the extractor should have kept to avoid the failure. "
    "Answer with at most {lines} short imperative hints for the memory extractor, "
    "one per line."
)

REFLECTION_MARKER = "short imperative hints for the memory extractor"


def render_storage_prompt(prompt: TaskPrompt, observation: str) -> str:
    lines = [f"Observation: {observation}"]
    if prompt.hints:
        lines.append("Hint: " + " ".join(prompt.hints))
    lines.append(prompt.global_instruction)
    return "\n".join(lines)


def extract(
    endpoint: ChatEndpoint,
    prompt: TaskPrompt,
    observation: str,
    provider: EmbeddingProvider,
    unit_id: int,
    step: int,
) -> MemoryUnit:
    """Summarize one observation into a memory unit, keeping the raw text on failure."""
    if not observation.strip():
        raise ContractError("cannot extract a memory from an empty observation")
    fallback = False
    try:
        text = endpoint.complete(render_storage_prompt(prompt, observation)).strip()
    except (EndpointError, ScriptExhaustedError) as exc:
        logger.warning(
            "extraction failed at step %d, storing raw observation: %s", step, exc
        )
        text, fallback = observation, True
    if not text:
        text, fallback = observation, True
    return MemoryUnit(
        id=unit_id,
        text=text,
        source=observation,
        step=step,
        embedding=embed(provider, text).tolist(),
        fallback=fallback,
    )


def cache_put(
    cache: ObservationCache, observation: str
) -> tuple[ObservationCache, list[str]]:
    pending = cache.pending + [observation]
    if len(pending) >= cache.capacity:
        return cache.model_copy(update={"pending": []}), pending
    return cache.model_copy(update={"pending": pending}), []


def cache_flush(cache: ObservationCache) -> tuple[ObservationCache, list[str]]:
    """Drain everything pending, used before every recall."""
    return cache.model_copy(update={"pending": []}), list(cache.pending)


def partition_trajectories(
    trajectories: list[Trajectory], beta_s: float
) -> tuple[list[Trajectory], list[Trajectory]]:
    if not 0.0 <= beta_s <= 1.0:
        raise ContractError(f"partition threshold must lie in [0, 1], got {beta_s}")
    positive = [t for t in trajectories if t.reward >= beta_s]
    negative = [t for t in trajectories if t.reward < beta_s]
    return positive, negative


def _reflection_examples(group: list[Trajectory]) -> str:
    blocks = []
    for trajectory in group:
        for unit in trajectory.memories.units:
            if unit.kind != "observation":
                continue
            blocks.append(f"State: {unit.source}\nMemory: {unit.text}")
    return "\n".join(blocks)


def _clean_hint(line: str) -> str:
    return line.strip().lstrip("-*•0123456789.) ").strip()


def reflect(
    endpoint: ChatEndpoint,
    group: list[Trajectory],
    polarity: str,
    lines: int = 2,
    template: Optional[str] = None,
) -> list[str]:
    """Hint lines distilled from a group of successes or failures."""
    if not group:
        return []
    if polarity not in ("positive", "negative"):
        raise ContractError(f"unknown polarity {polarity!r}")
    if template is None:
        if polarity == "positive":
            template = SUCCESS_REFLECTION_TEMPLATE
        else:
            template = FAILURE_REFLECTION_TEMPLATE
    prompt = template.format(examples=_reflection_examples(group), lines=lines)
    try:
        reply = endpoint.complete(prompt)
    except (EndpointError, ScriptExhaustedError) as exc:
        logger.warning("%s reflection failed: %s", polarity, exc)
        return []
    hints = []
    for raw in reply.splitlines():
        hint = _clean_hint(raw)
        if hint and hint not in hints:
            hints.append(hint)
    return hints[:lines]


def sample_group(
    trajectories: list[Trajectory], size: int, rng: np.random.Generator
) -> list[Trajectory]:
    if len(trajectories) <= size:
        return list(trajectories)
    chosen = np.sort(rng.choice(len(trajectories), size=size, replace=False))
    return [trajectories[i] for i in chosen]


def update_task_prompt(
    prompt: TaskPrompt,
    positive_hints: list[str],
    negative_hints: list[str],
    max_hints: int = 20,
) -> TaskPrompt:
    hints = list(prompt.hints)
    for hint in positive_hints + negative_hints:
        if hint not in hints:
            hints.append(hint)
    if len(hints) > max_hints:
        hints = hints[len(hints) - max_hints :]
    return TaskPrompt(global_instruction=prompt.global_instruction, hints=tuple(hints))
