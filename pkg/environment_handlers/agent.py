import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from clients.chat import ChatEndpoint
from clients.runtime import Runtime
from environment_handlers.corpus import Corpus
from environment_handlers.qa_env import QaEnvironment, env_step, parse_action
from memory_handlers.policies import MemoryPolicy, policy_factory
from pydantic_models.bundle import PolicyBundle
from pydantic_models.environment import EnvAction, QaTask
from pydantic_models.memory import StepRecord, Trajectory
from utils.errors import EndpointError, ScriptExhaustedError
from utils.text import word_count

logger = logging.getLogger(__name__)

THINK_TEMPLATE = (
    "You are a knowledgeable expert, and you are answering a question. You are allowed "
    "to search in Wikipedia to get information.\n"
    "The question is: {question}. "
    "Now, you can choose to answer the question or search an entity on Wikipedia. "
    "Please think step by step to analyze how to choose the next action, and output it "
    "into one paragraph in concise. "
    "In previous steps, you have already accumulated some knowledge in your memory as "
    "follows:\n{memory_context}."
)

ACT_TEMPLATE = (
    "You are a knowledgeable expert, and you are answering a question. You are allowed "
    "to search in Wikipedia to get information.\n"
    "The question is: {question}.\n"
    "You have thought step by step to analyze how to choose "
    "the next action as follows:\n"
    "{thought}.\n"
    "Now, you can choose to answer the question or search an entry on Wikipedia:\n"
    "(1) Search[entity], which searches the entity on Wikipedia and returns the "
    "paragraphs if they exist.\n"
    "(2) Finish[answer], which returns the answer and finishes the task. Your answer "
    "should be in concise with several words, NOT a sentence.\n"
    "Please generate the next action accordingly.\n"
    "Your output must follow one of the following two formats:\n"
    "Search[entity]\n"
    "Finish[answer]\n"
    "Here are some examples:\n"
    "Search[Alan Turing]\n"
    "Finish[no]\n"
    "Finish[Shanghai]\n"
    "In previous steps, you have already accumulated some knowledge in your memory as "
    "follows:\n{memory_context}"
)


class MemoryAgent:
    """ReAct agent: store, recall, think, act, then remember the thought and action."""

    def __init__(
        self,
        chat: ChatEndpoint,
        policy: MemoryPolicy,
        success_threshold: float = 0.5,
        think_template: str = THINK_TEMPLATE,
        act_template: str = ACT_TEMPLATE,
    ):
        self.chat = chat
        self.policy = policy
        self.success_threshold = success_threshold
        self.think_template = think_template
        self.act_template = act_template

    def react_step(
        self, question: str, observation: str, step: int, rng: np.random.Generator
    ) -> tuple[EnvAction, StepRecord]:
        calls = self.policy.observe(observation, step)
        recall = self.policy.recall(observation, step, rng)
        thought = self.chat.complete(
            self.think_template.format(question=question, memory_context=recall.context)
        )
        reply = self.chat.complete(
            self.act_template.format(
                question=question, thought=thought, memory_context=recall.context
            )
        )
        action = parse_action(reply)
        note = f"Thought: {thought} Action: {action.render()}"
        self.policy.remember_thought(note, step)
        record = StepRecord(
            step=step,
            state_text=observation,
            store_size=recall.store_size,
            ranked_ids=recall.ranked.ids,
            context=recall.context,
            thought=thought,
            action=action.render(),
            word_deltas=recall.aggregation.word_deltas if recall.aggregation else [],
            aggregation=recall.aggregation,
            llm_calls=calls + recall.llm_calls + 2,
            context_words=word_count(recall.context),
        )
        return action, record


def run_trajectory(
    agent: MemoryAgent,
    task: QaTask,
    corpus: Corpus,
    rng: np.random.Generator,
    trajectory_id: str = "trajectory-0",
    bundle_version: int = 0,
    epoch: int = 0,
    timings: Optional[list[dict]] = None,
) -> Trajectory:
    env = QaEnvironment(task, corpus)
    observation = env.reset()
    steps: list[StepRecord] = []
    aborted = False
    step = 1
    while not env.done:
        started = time.perf_counter()
        try:
            action, record = agent.react_step(task.question, observation, step, rng)
        except (EndpointError, ScriptExhaustedError) as exc:
            logger.warning(
                "trajectory %s aborted at step %d: %s", trajectory_id, step, exc
            )
            aborted = True
            break
        outcome = env_step(env, action)
        steps.append(record)
        if timings is not None:
            timings.append(
                {
                    "trajectory_id": trajectory_id,
                    "step": step,
                    "seconds": time.perf_counter() - started,
                }
            )
        observation = outcome.observation
        step += 1
    reward = 0.0 if aborted else env.reward
    return Trajectory(
        id=trajectory_id,
        question=task.question,
        gold_answer=task.answer,
        steps=steps,
        reward=reward,
        success=reward >= agent.success_threshold,
        memories=agent.policy.store,
        bundle_version=bundle_version,
        epoch=epoch,
        memory_policy=agent.policy.kind,
        aborted=aborted,
    )


def sample_trajectories(
    tasks: list[QaTask],
    corpus: Corpus,
    make_agent: Callable[[], MemoryAgent],
    seed: Union[int, Sequence[int]],
    parallelism: int = 1,
    prefix: str = "trajectory",
    bundle_version: int = 0,
    epoch: int = 0,
) -> tuple[list[Trajectory], pd.DataFrame]:
    """Run every task with its own agent and rng; output order follows `tasks`."""

    def run(index: int) -> tuple[Trajectory, list[dict]]:
        timings: list[dict] = []
        trajectory = run_trajectory(
            make_agent(),
            tasks[index],
            corpus,
            np.random.default_rng([*np.atleast_1d(seed).tolist(), index]),
            trajectory_id=f"{prefix}-{index:04d}",
            bundle_version=bundle_version,
            epoch=epoch,
            timings=timings,
        )
        return trajectory, timings

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(run, range(len(tasks))))
    else:
        results = [run(index) for index in range(len(tasks))]
    trajectories = [trajectory for trajectory, _ in results]
    rows = [row for _, step_rows in results for row in step_rows]
    logger.info(
        "sampled %d trajectories (epoch %d, bundle v%d)",
        len(trajectories),
        epoch,
        bundle_version,
    )
    timings = pd.DataFrame(rows, columns=["trajectory_id", "step", "seconds"])
    return trajectories, timings


def agent_factory(
    runtime: Runtime, bundle: Optional[PolicyBundle] = None
) -> Callable[[], MemoryAgent]:
    """Fresh agent (fresh store and cache) per trajectory under `bundle`."""
    utilizer = None
    if bundle is not None:
        utilizer = runtime.chat.with_model(bundle.utilization.model_ref)
    policies = policy_factory(
        runtime.config,
        runtime.provider,
        runtime.suite,
        bundle=bundle,
        extractor=runtime.chat,
        utilizer=utilizer,
    )
    threshold = runtime.config.environment.success_threshold
    return lambda: MemoryAgent(runtime.chat, policies(), success_threshold=threshold)
