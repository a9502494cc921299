import logging
from typing import Callable, Optional

import numpy as np

from clients.chat import ChatEndpoint
from clients.embedding import EmbeddingProvider
from memory_handlers.metric_functions import MetricSuite, embed, row_cosines
from memory_handlers.retrieval_gate import order_by_score, rank
from memory_handlers.storage import cache_flush, cache_put, extract
from memory_handlers.store import insert
from memory_handlers.utilization import aggregate
from pydantic_models.bundle import PolicyBundle
from pydantic_models.config import MetricConfig, PolicyConfig, RunConfig
from pydantic_models.memory import (
    MemoryStore,
    MemoryUnit,
    RankedEntry,
    RankedMemories,
    Recall,
)
from pydantic_models.storage import ObservationCache
from utils.errors import ContractError
from utils.text import truncate_words

logger = logging.getLogger(__name__)


class MemoryPolicy:
    """Per-trajectory memory: owns one append-only store."""

    kind = "base"

    def __init__(self, provider: EmbeddingProvider, word_cap: int = 8096):
        self.provider = provider
        self.word_cap = word_cap
        self.store = MemoryStore(dim=provider.dim)

    def _raw_unit(self, text: str, step: int, kind: str = "observation") -> MemoryUnit:
        return MemoryUnit(
            id=self.store.next_id,
            text=text,
            source=text,
            step=step,
            embedding=embed(self.provider, text).tolist(),
            kind=kind,
        )

    def observe(self, observation: str, step: int) -> int:
        """Store an observation; returns the number of LLM calls spent."""
        insert(self.store, self._raw_unit(observation, step))
        return 0

    def remember_thought(self, text: str, step: int) -> None:
        insert(self.store, self._raw_unit(text, step, kind="thought"))

    def observations(self) -> list[MemoryUnit]:
        return [unit for unit in self.store.units if unit.kind == "observation"]

    def recall(self, query: str, step: int, rng: np.random.Generator) -> Recall:
        raise NotImplementedError

    def _joined(self, units: list[MemoryUnit], ranked: RankedMemories) -> Recall:
        context = truncate_words("\n".join(unit.text for unit in units), self.word_cap)
        return Recall(context=context, ranked=ranked, store_size=len(self.store))


class CycleMemory(MemoryPolicy):
    """Learnable storage -> retrieval -> utilization cycle driven by a PolicyBundle."""

    kind = "cycle"

    def __init__(
        self,
        provider: EmbeddingProvider,
        suite: MetricSuite,
        bundle: PolicyBundle,
        extractor: ChatEndpoint,
        utilizer: ChatEndpoint,
        top_k: int = 10,
        max_iters: int = 10,
        cache_capacity: int = 5,
        word_cap: int = 8096,
        merge_template: Optional[str] = None,
    ):
        super().__init__(provider, word_cap)
        self.suite = suite
        self.bundle = bundle
        self.extractor = extractor
        self.utilizer = utilizer
        self.top_k = top_k
        self.max_iters = max_iters
        self.merge_template = merge_template
        self.cache = ObservationCache(capacity=cache_capacity)
        self.flushed = 0

    def _store_pending(self, observations: list[str], step: int) -> int:
        for observation in observations:
            unit = extract(
                self.extractor,
                self.bundle.task_prompt,
                observation,
                self.provider,
                self.store.next_id,
                step,
            )
            insert(self.store, self.suite.annotate(unit))
        self.flushed += len(observations)
        return len(observations)

    def observe(self, observation: str, step: int) -> int:
        self.cache, flushed = cache_put(self.cache, observation)
        return self._store_pending(flushed, step)

    def remember_thought(self, text: str, step: int) -> None:
        unit = self._raw_unit(text, step, kind="thought")
        insert(self.store, self.suite.annotate(unit))

    def recall(self, query: str, step: int, rng: np.random.Generator) -> Recall:
        self.cache, pending = cache_flush(self.cache)
        calls = self._store_pending(pending, step)
        ranked = rank(
            self.bundle.gate, self.suite, embed(self.provider, query), self.store, step
        ).top(self.top_k)
        if not ranked.entries:
            return Recall(context="", ranked=ranked, store_size=0, llm_calls=calls)
        context, trace = aggregate(
            self.utilizer,
            ranked,
            self.store,
            query,
            rng,
            max_iters=self.max_iters,
            word_cap=self.word_cap,
            template=self.merge_template,
        )
        return Recall(
            context=context,
            ranked=ranked,
            aggregation=trace,
            store_size=len(self.store),
            llm_calls=calls + trace.stop_step,
        )


class FullMemory(MemoryPolicy):
    kind = "full"

    def recall(self, query: str, step: int, rng: np.random.Generator) -> Recall:
        units = self.observations()
        ranked = RankedMemories(
            entries=[RankedEntry(id=u.id, score=0.0) for u in units], query_step=step
        )
        return self._joined(units, ranked)


class ShortTermMemory(MemoryPolicy):
    kind = "short-term"

    def __init__(
        self, provider: EmbeddingProvider, window: int = 3, word_cap: int = 8096
    ):
        super().__init__(provider, word_cap)
        self.window = window

    def recall(self, query: str, step: int, rng: np.random.Generator) -> Recall:
        units = self.observations()[-self.window :]
        ranked = RankedMemories(
            entries=[RankedEntry(id=u.id, score=0.0) for u in reversed(units)],
            query_step=step,
        )
        return self._joined(units, ranked)


class LongTermMemory(MemoryPolicy):
    kind = "long-term"

    def __init__(
        self, provider: EmbeddingProvider, top_k: int = 10, word_cap: int = 8096
    ):
        super().__init__(provider, word_cap)
        self.top_k = top_k

    def scores(self, query_emb: np.ndarray, step: int) -> np.ndarray:
        return row_cosines(query_emb, self.store.embedding_matrix())

    def recall(self, query: str, step: int, rng: np.random.Generator) -> Recall:
        units = self.store.units
        if not units:
            return Recall(context="", ranked=RankedMemories(query_step=step))
        scores = self.scores(embed(self.provider, query), step)
        steps = np.array([u.step for u in units])
        ids = np.array([u.id for u in units])
        order = order_by_score(scores, steps, ids)[: self.top_k]
        ranked = RankedMemories(
            entries=[
                RankedEntry(id=int(ids[i]), score=float(scores[i])) for i in order
            ],
            query_step=step,
        )
        return self._joined([units[i] for i in order], ranked)


class FixedWeightMemory(LongTermMemory):
    """Constant mix alpha_rel * rel + alpha_imp * imp + alpha_rec * rec (p = 1)."""

    kind = "fixed-weight"

    def __init__(
        self,
        provider: EmbeddingProvider,
        suite: MetricSuite,
        alphas: tuple[float, float, float] = (1.0, 1.0, 1.0),
        top_k: int = 10,
        word_cap: int = 8096,
    ):
        super().__init__(provider, top_k, word_cap)
        if suite.names != ["rel", "imp", "rec_p1"]:
            raise ContractError(
                f"fixed-weight mixing needs rel, imp, rec_p1; got {suite.names}"
            )
        self.suite = suite
        self.alphas = np.asarray(alphas, dtype=float)

    def scores(self, query_emb: np.ndarray, step: int) -> np.ndarray:
        metrics = self.suite.matrix(query_emb, step, self.store.units)
        return metrics @ self.alphas


def fixed_weight_metric_config(base: MetricConfig) -> MetricConfig:
    return base.model_copy(
        update={
            "relevance": True,
            "emotion": False,
            "importance": True,
            "recency_powers": [1.0],
        }
    )


def baseline_memory(
    config: PolicyConfig,
    provider: EmbeddingProvider,
    top_k: int = 10,
    word_cap: int = 8096,
    suite: Optional[MetricSuite] = None,
) -> MemoryPolicy:
    if config.kind == "full":
        return FullMemory(provider, word_cap)
    if config.kind == "short-term":
        return ShortTermMemory(provider, config.short_term_window, word_cap)
    if config.kind == "long-term":
        return LongTermMemory(provider, top_k, word_cap)
    if config.kind == "fixed-weight":
        if suite is None:
            raise ContractError("fixed-weight memory needs a metric suite")
        return FixedWeightMemory(provider, suite, config.alphas, top_k, word_cap)
    raise ContractError(f"{config.kind!r} is not a baseline memory")


PolicyFactory = Callable[[], MemoryPolicy]


def policy_factory(
    config: RunConfig,
    provider: EmbeddingProvider,
    suite: MetricSuite,
    bundle: Optional[PolicyBundle] = None,
    extractor: Optional[ChatEndpoint] = None,
    utilizer: Optional[ChatEndpoint] = None,
) -> PolicyFactory:
    """A zero-argument constructor giving every trajectory a fresh store and cache."""
    if config.policy.kind != "cycle":
        return lambda: baseline_memory(
            config.policy,
            provider,
            config.retrieval.top_k,
            config.utilization.word_cap,
            suite,
        )
    if bundle is None or extractor is None or utilizer is None:
        raise ContractError("the memory cycle needs a bundle, extractor and utilizer")
    return lambda: CycleMemory(
        provider,
        suite,
        bundle,
        extractor,
        utilizer,
        top_k=config.retrieval.top_k,
        max_iters=config.utilization.max_iters,
        cache_capacity=config.storage.cache_capacity,
        word_cap=config.utilization.word_cap,
        merge_template=config.utilization.template,
    )
