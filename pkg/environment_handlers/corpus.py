import logging
from typing import Iterable, Optional

import numpy as np

from pydantic_models.config import EnvironmentConfig
from pydantic_models.environment import CorpusDocument, QaTask
from utils.errors import ContractError
from utils.jsonl import read_models, write_models

logger = logging.getLogger(__name__)

_SYLLABLES = [
    "ka", "lo", "mir", "ven", "to", "sa", "rud", "el", "bri", "no",
    "qua", "zel", "ori", "pan", "dus", "mea", "tor", "ly", "gan", "fi",
]

_FILLERS = [
    "The platform clock at {name} runs two minutes fast.",
    "Travellers at {name} often buy tea from the kiosk by the gate.",
    "{name} was repainted green during the last renovation.",
    "The waiting room at {name} has twelve wooden benches.",
    "A small garden grows behind the ticket office of {name}.",
]

ROUTE_QUESTION = (
    "Starting from station {start}, follow the relays. "
    "Which terminal station do you reach?"
)


def normalize_title(title: str) -> str:
    return " ".join(title.lower().split())


class Corpus:
    """Title -> document lookup, case-insensitive after whitespace normalization."""

    def __init__(self, documents: Iterable[CorpusDocument] = ()):
        self._documents: dict[str, CorpusDocument] = {}
        for document in documents:
            self.add(document)

    def __len__(self) -> int:
        return len(self._documents)

    def add(self, document: CorpusDocument) -> None:
        key = normalize_title(document.title)
        if key in self._documents:
            raise ContractError(f"duplicate corpus title {document.title!r}")
        self._documents[key] = document

    def lookup(self, title: str) -> Optional[CorpusDocument]:
        return self._documents.get(normalize_title(title))

    @property
    def documents(self) -> list[CorpusDocument]:
        return list(self._documents.values())

    @classmethod
    def from_jsonl(cls, path: str) -> "Corpus":
        corpus = cls(read_models(path, CorpusDocument))
        logger.info("loaded %d corpus documents from %s", len(corpus), path)
        return corpus

    def to_jsonl(self, path: str) -> None:
        write_models(path, self.documents)


def load_tasks(path: str) -> list[QaTask]:
    return read_models(path, QaTask)


def _station_names(count: int, rng: np.random.Generator) -> list[str]:
    names: list[str] = []
    seen = set()
    while len(names) < count:
        parts = rng.choice(len(_SYLLABLES), size=int(rng.integers(2, 4)))
        name = "".join(_SYLLABLES[i] for i in parts).capitalize()
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def synthetic_relay_world(
    tasks: int, hops: int = 2, rng: Optional[np.random.Generator] = None
) -> tuple[Corpus, list[QaTask]]:
    """Relay chains of `hops` stations; every answer needs one document per station.

    Each document opens with a filler sentence, the route fact comes last.
    """
    if hops < 1:
        raise ContractError("a relay chain needs at least one station")
    rng = rng if rng is not None else np.random.default_rng(0)
    names = _station_names(tasks * hops, rng)
    corpus = Corpus()
    task_list = []
    for t in range(tasks):
        chain = names[t * hops : (t + 1) * hops]
        for position, name in enumerate(chain):
            filler = _FILLERS[int(rng.integers(len(_FILLERS)))].format(name=name)
            if position + 1 < len(chain):
                fact = f"Station {name} relays to station {chain[position + 1]}."
            else:
                fact = f"Station {name} is the terminal station."
            corpus.add(CorpusDocument(title=name, text=f"{filler} {fact}"))
        question = ROUTE_QUESTION.format(start=chain[0])
        task_list.append(QaTask(question=question, answer=chain[-1]))
    return corpus, task_list


def load_environment(
    config: EnvironmentConfig, rng: np.random.Generator
) -> tuple[Corpus, list[QaTask]]:
    """Corpus and tasks from JSONL when configured, else the synthetic relay world."""
    if config.corpus_path and config.tasks_path:
        corpus = Corpus.from_jsonl(config.corpus_path)
        tasks = [
            task.model_copy(update={"max_steps": config.max_steps})
            for task in load_tasks(config.tasks_path)
        ]
        return corpus, tasks
    if config.corpus_path or config.tasks_path:
        raise ContractError("corpus_path and tasks_path must be configured together")
    corpus, tasks = synthetic_relay_world(
        config.synthetic_tasks, config.synthetic_hops, rng
    )
    budget = {"max_steps": config.max_steps}
    return corpus, [task.model_copy(update=budget) for task in tasks]
