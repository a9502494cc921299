import logging
from typing import Optional

import numpy as np

from clients.chat import ChatEndpoint
from pydantic_models.memory import (
    AggregationTrace,
    MemoryStore,
    RankedMemories,
    Trajectory,
)
from pydantic_models.utilization import (
    DpoRecord,
    LossSummary,
    MergePrompt,
    PreferenceLogprobs,
    SftRecord,
    TargetLogprobs,
)
from utils.errors import ContractError, EndpointError, ScriptExhaustedError
from utils.text import truncate_words, word_count

logger = logging.getLogger(__name__)

MERGE_TEMPLATE = (
    "Observation: {observation}\n"
    "Existing Memory: {memory_context}\n"
    "New Memory: {new_memory}\n"
    "Please merge the above new memory into the existing memory, which is useful to "
    "response the observation.\n"
    "You should remove the duplicated information to make it concise, but do not lose "
    "any information.\n"
    "You should just output the final memory after merge, "
    "without any other information."
)

MERGE_MARKER = "Please merge the above new memory into the existing memory"


def render_merge_prompt(parts: MergePrompt, template: Optional[str] = None) -> str:
    return (template or MERGE_TEMPLATE).format(
        observation=parts.observation,
        memory_context=parts.memory_context,
        new_memory=parts.new_memory,
    )


def info_gain(delta: float, previous_delta: float) -> float:
    delta = max(delta, 0.0)
    previous_delta = max(previous_delta, 0.0)
    if previous_delta == 0:
        return 1.0 if delta > 0 else 0.0
    return float(np.clip(delta / previous_delta, 0.0, 1.0))


def stop_prob(gain: float, previous_gain: float) -> float:
    if not (0.0 <= gain <= 1.0 and 0.0 <= previous_gain <= 1.0):
        raise ContractError("information gains must lie in [0, 1]")
    return 1.0 - max(gain, previous_gain)


def aggregate(
    endpoint: ChatEndpoint,
    ranked: RankedMemories,
    store: MemoryStore,
    observation: str,
    rng: np.random.Generator,
    max_iters: int = 10,
    word_cap: int = 8096,
    template: Optional[str] = None,
) -> tuple[str, AggregationTrace]:
    """Merge ranked memories into one context until the stop signal fires.

    The first merge is exempt from the stop draw; endpoint errors propagate.
    """
    if not ranked.entries:
        raise ContractError("aggregation needs at least one ranked memory")
    trace = AggregationTrace()
    context = ""
    for i, entry in enumerate(ranked.entries[:max_iters], start=1):
        unit = store.get(entry.id)
        parts = MergePrompt(
            observation=observation, memory_context=context, new_memory=unit.text
        )
        reply = endpoint.complete(render_merge_prompt(parts, template))
        merged = truncate_words(reply, word_cap)
        delta = max(word_count(merged) - word_count(context), 0)
        if i == 1:
            gain = 1.0
        else:
            gain = info_gain(delta, trace.word_deltas[-1])
        context = merged
        trace.contexts.append(merged)
        trace.merged_ids.append(unit.id)
        trace.word_deltas.append(delta)
        trace.gains.append(gain)
        trace.stop_step = i
        if i >= 2:
            draw = int(rng.random() < stop_prob(gain, trace.gains[-2]))
            trace.stop_draws.append(draw)
            if draw:
                break
    return context, trace


def _final_merge(trajectory: Trajectory) -> Optional[MergePrompt]:
    """Prompt parts of the last aggregation call of the final step, if any."""
    if not trajectory.steps:
        return None
    record = trajectory.steps[-1]
    trace = record.aggregation
    if trace is None or trace.stop_step == 0 or not record.ranked_ids:
        return None
    k = trace.stop_step
    unit = trajectory.memories.get(trace.merged_ids[k - 1])
    return MergePrompt(
        observation=record.state_text,
        memory_context=trace.contexts[k - 1],
        new_memory=unit.text,
    )


def build_sft_dataset(
    trajectories: list[Trajectory],
    expert: ChatEndpoint,
    template: Optional[str] = None,
) -> tuple[list[SftRecord], int]:
    """One record per trajectory: the final merge call answered by the expert.

    Returns the records and the number skipped on expert failure.
    """
    records, skipped = [], 0
    for trajectory in trajectories:
        parts = _final_merge(trajectory)
        if parts is None:
            continue
        prompt = render_merge_prompt(parts, template)
        try:
            target = expert.complete(prompt)
        except (EndpointError, ScriptExhaustedError) as exc:
            logger.warning("expert failed on %s: %s", trajectory.id, exc)
            skipped += 1
            continue
        if not target.strip():
            skipped += 1
            continue
        records.append(
            SftRecord(
                trajectory_id=trajectory.id, parts=parts, prompt=prompt, target=target
            )
        )
    if skipped:
        logger.info("skipped %d SFT records", skipped)
    return records, skipped


def build_dpo_dataset(
    trajectories: list[Trajectory],
    sft_endpoint: ChatEndpoint,
    beta: float = 0.1,
    template: Optional[str] = None,
) -> tuple[list[DpoRecord], int]:
    """chosen is the SFT-tuned regeneration, rejected is the recorded merge."""
    records, skipped = [], 0
    for trajectory in trajectories:
        parts = _final_merge(trajectory)
        if parts is None:
            continue
        trace = trajectory.steps[-1].aggregation
        rejected = trace.contexts[trace.stop_step]
        prompt = render_merge_prompt(parts, template)
        try:
            chosen = sft_endpoint.complete(prompt)
        except (EndpointError, ScriptExhaustedError) as exc:
            logger.warning("regeneration failed on %s: %s", trajectory.id, exc)
            skipped += 1
            continue
        if chosen == rejected:
            skipped += 1
            continue
        records.append(
            DpoRecord(
                trajectory_id=trajectory.id,
                parts=parts,
                prompt=prompt,
                chosen=chosen,
                rejected=rejected,
                beta=beta,
            )
        )
    if skipped:
        logger.info("dropped %d DPO records", skipped)
    return records, skipped


def dpo_loss(traces: list[PreferenceLogprobs], beta: float) -> LossSummary:
    if beta <= 0:
        raise ContractError(f"beta must be positive, got {beta}")
    complete = [trace for trace in traces if trace.complete]
    skipped = len(traces) - len(complete)
    if not complete:
        raise ContractError("no record carries all four logprobs")
    margins = np.array(
        [
            (t.policy_chosen - t.reference_chosen)
            - (t.policy_rejected - t.reference_rejected)
            for t in complete
        ]
    )
    losses = np.logaddexp(0.0, -beta * margins)
    return LossSummary(loss=float(losses.mean()), used=len(complete), skipped=skipped)


def sft_loss(traces: list[TargetLogprobs]) -> LossSummary:
    usable = [trace for trace in traces if trace.token_logprobs]
    skipped = len(traces) - len(usable)
    if not usable:
        raise ContractError("no record carries target logprobs")
    per_record = [-np.mean(trace.token_logprobs) for trace in usable]
    return LossSummary(
        loss=float(np.mean(per_record)), used=len(usable), skipped=skipped
    )
