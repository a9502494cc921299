import re

from environment_handlers.corpus import Corpus
from pydantic_models.environment import EnvAction, QaTask, StepOutcome
from utils.errors import ContractError
from utils.text import normalize_answer

_ACTION = re.compile(r"(Search|Finish)\[([^\[\]]+)\]")

INVALID_ACTION_MESSAGE = (
    "Invalid action. Your output must follow one of the formats Search[entity] or "
    "Finish[answer]."
)


def not_found_message(entity: str) -> str:
    return f"No page found for [{entity}]."


def parse_action(text: str) -> EnvAction:
    """First well-formed Search[...] / Finish[...] wins; anything else is Invalid."""
    for match in _ACTION.finditer(text):
        argument = match.group(2).strip()
        if argument:
            return EnvAction(kind=match.group(1).lower(), argument=argument)
    return EnvAction(kind="invalid", argument=text)


def exact_match(predicted: str, gold: str) -> int:
    return int(normalize_answer(predicted) == normalize_answer(gold))


class QaEnvironment:
    def __init__(self, task: QaTask, corpus: Corpus):
        self.task = task
        self.corpus = corpus
        self.steps_taken = 0
        self.done = False
        self.reward = 0.0

    def reset(self) -> str:
        self.steps_taken = 0
        self.done = False
        self.reward = 0.0
        return self.task.question

    def step(self, action: EnvAction) -> StepOutcome:
        if self.done:
            raise ContractError("the episode is over; reset before stepping again")
        self.steps_taken += 1
        reward = 0.0
        if action.kind == "finish":
            reward = float(exact_match(action.argument, self.task.answer))
            observation = f"Episode finished with answer {action.argument}."
            self.done = True
        elif action.kind == "search":
            document = self.corpus.lookup(action.argument)
            if document is None:
                observation = not_found_message(action.argument)
            else:
                observation = document.text
        else:
            observation = INVALID_ACTION_MESSAGE
        if not self.done and self.steps_taken >= self.task.max_steps:
            self.done = True
        self.reward = reward
        return StepOutcome(observation=observation, reward=reward, done=self.done)


def env_step(env: QaEnvironment, action: EnvAction) -> StepOutcome:
    return env.step(action)
