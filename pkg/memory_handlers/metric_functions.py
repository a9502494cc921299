import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from clients.embedding import EmbeddingProvider
from pydantic_models.config import MetricConfig
from pydantic_models.memory import MemoryUnit
from pydantic_models.metrics import (
    EMOTIONS,
    EmotionScorer,
    ImportanceScorer,
    MetricVector,
)
from utils.errors import ContractError, DimensionMismatchError

logger = logging.getLogger(__name__)


def embed(provider: EmbeddingProvider, text: str) -> np.ndarray:
    if not text or not text.strip():
        raise ContractError("cannot embed empty text")
    return provider.embed(text)


def _row_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum keeps each row's reduction independent of how many rows there are
    return np.einsum("ij,ij->i", a, b)


def row_cosines(queries: np.ndarray, memories: np.ndarray) -> np.ndarray:
    """Cosine per row pair; rows with a zero vector on either side score 0."""
    queries = np.atleast_2d(queries)
    memories = np.atleast_2d(memories)
    queries = np.broadcast_to(queries, memories.shape)
    norms = np.sqrt(_row_dot(queries, queries) * _row_dot(memories, memories))
    dots = _row_dot(queries, memories)
    out = np.zeros(len(memories))
    nonzero = norms > 0
    out[nonzero] = dots[nonzero] / norms[nonzero]
    return np.clip(out, -1.0, 1.0)


def _check_dims(s_emb: np.ndarray, m_emb: np.ndarray) -> None:
    if s_emb.shape != m_emb.shape:
        raise DimensionMismatchError(s_emb.shape[-1], m_emb.shape[-1])


def d_rel(s_emb, m_emb) -> float:
    s_emb, m_emb = np.asarray(s_emb, dtype=float), np.asarray(m_emb, dtype=float)
    _check_dims(s_emb, m_emb)
    if not np.any(s_emb) or not np.any(m_emb):
        raise ContractError("cosine relevance is undefined for a zero vector")
    return float(row_cosines(s_emb, m_emb)[0])


def d_emo(scorer: EmotionScorer, s_emb, m_emb) -> float:
    s_emb, m_emb = np.asarray(s_emb, dtype=float), np.asarray(m_emb, dtype=float)
    _check_dims(s_emb, m_emb)
    return float(row_cosines(scorer.emotions(s_emb), scorer.emotions(m_emb))[0])


def d_imp(scorer: ImportanceScorer, s_emb, m_emb) -> float:
    s_emb, m_emb = np.asarray(s_emb, dtype=float), np.asarray(m_emb, dtype=float)
    _check_dims(s_emb, m_emb)
    query = scorer.query_features(s_emb)
    memory = scorer.memory_features(m_emb)
    return float(row_cosines(query, memory)[0])


def d_rec(step_now: int, step_mem: int, p: float) -> float:
    """(1 - dt/t)^p with dt = t - step_mem, i.e. (step_mem / t)^p."""
    if step_now < 1:
        raise ContractError(f"query step must be >= 1, got {step_now}")
    if not 0 <= step_mem <= step_now:
        raise ContractError(f"memory step {step_mem} outside [0, {step_now}]")
    if p <= 0:
        raise ContractError(f"recency power must be positive, got {p}")
    return float((step_mem / step_now) ** p)


def recency_columns(
    step_now: int, steps: np.ndarray, powers: list[float]
) -> np.ndarray:
    steps = np.asarray(steps, dtype=float)
    if step_now < 1:
        raise ContractError(f"query step must be >= 1, got {step_now}")
    if np.any(steps < 0) or np.any(steps > step_now):
        raise ContractError(f"memory steps must lie in [0, {step_now}]")
    ratio = steps / step_now
    if not powers:
        return np.zeros((len(steps), 0))
    return np.column_stack([ratio**p for p in powers])


def init_emotion_scorer(
    dim: int, hidden: int, rng: np.random.Generator
) -> EmotionScorer:
    return EmotionScorer(
        W1e=rng.normal(0.0, 1.0, size=(hidden, dim)),
        b1e=np.zeros(hidden),
        W2e=rng.normal(0.0, 0.1 / np.sqrt(hidden), size=(len(EMOTIONS), hidden)),
        b2e=np.zeros(len(EMOTIONS)),
    )


def init_importance_scorer(
    dim: int, projection: int, rng: np.random.Generator
) -> ImportanceScorer:
    scale = 1.0 / np.sqrt(dim)
    return ImportanceScorer(
        W1p=rng.normal(0.0, scale, size=(projection, dim)),
        b1p=np.zeros(projection),
        W2p=rng.normal(0.0, scale, size=(projection, dim)),
        b2p=np.zeros(projection),
    )


def save_scorer(scorer, path: str) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(scorer.model_dump_json())


def load_emotion_scorer(path: str) -> EmotionScorer:
    return EmotionScorer.model_validate(json.loads(Path(path).read_text()))


def load_importance_scorer(path: str) -> ImportanceScorer:
    return ImportanceScorer.model_validate(json.loads(Path(path).read_text()))


class MetricSuite:
    """The enabled metric functions, in the fixed order [rel, emo, imp, rec_p...]."""

    def __init__(
        self,
        config: MetricConfig,
        emotion_scorer: Optional[EmotionScorer] = None,
        importance_scorer: Optional[ImportanceScorer] = None,
    ):
        if config.emotion and emotion_scorer is None:
            raise ContractError("emotion metric enabled without an emotion scorer")
        if config.importance and importance_scorer is None:
            raise ContractError(
                "importance metric enabled without an importance scorer"
            )
        self.config = config
        self.emotion_scorer = emotion_scorer
        self.importance_scorer = importance_scorer

    @property
    def names(self) -> list[str]:
        return self.config.names()

    def __len__(self) -> int:
        return len(self.names)

    def annotate(self, unit: MemoryUnit) -> MemoryUnit:
        """Cache the memory-side emotion and importance features on the unit."""
        embedding = np.asarray(unit.embedding, dtype=float)
        update = {}
        if self.config.emotion:
            update["emotion"] = self.emotion_scorer.emotions(embedding).tolist()
        if self.config.importance:
            update["importance_feat"] = self.importance_scorer.memory_features(
                embedding
            ).tolist()
        return unit.model_copy(update=update) if update else unit

    def _emotion_rows(
        self, units: list[MemoryUnit], embeddings: np.ndarray
    ) -> np.ndarray:
        if all(unit.emotion is not None for unit in units):
            return np.array([unit.emotion for unit in units], dtype=float)
        return self.emotion_scorer.emotions(embeddings)

    def _importance_rows(
        self, units: list[MemoryUnit], embeddings: np.ndarray
    ) -> np.ndarray:
        width = self.importance_scorer.W2p.shape[0]
        if all(
            unit.importance_feat is not None and len(unit.importance_feat) == width
            for unit in units
        ):
            return np.array([unit.importance_feat for unit in units], dtype=float)
        return self.importance_scorer.memory_features(embeddings)

    def matrix(self, s_emb, step_now: int, units: list[MemoryUnit]) -> np.ndarray:
        """Metric values for every unit, shape (len(units), n)."""
        if not units:
            return np.zeros((0, len(self)))
        s_emb = np.asarray(s_emb, dtype=float)
        embeddings = np.array([unit.embedding for unit in units], dtype=float)
        if embeddings.shape[1] != s_emb.shape[0]:
            raise DimensionMismatchError(embeddings.shape[1], s_emb.shape[0])
        columns = []
        if self.config.relevance:
            columns.append(row_cosines(s_emb, embeddings))
        if self.config.emotion:
            query = self.emotion_scorer.emotions(s_emb)
            columns.append(row_cosines(query, self._emotion_rows(units, embeddings)))
        if self.config.importance:
            query = self.importance_scorer.query_features(s_emb)
            columns.append(row_cosines(query, self._importance_rows(units, embeddings)))
        steps = np.array([unit.step for unit in units])
        recency = recency_columns(step_now, steps, self.config.recency_powers)
        values = np.column_stack(columns + [recency]) if columns else recency
        if not np.all(np.isfinite(values)):
            raise ContractError("metric matrix contains non-finite values")
        return values

    def vector(self, s_emb, step_now: int, unit: MemoryUnit) -> MetricVector:
        values = self.matrix(s_emb, step_now, [unit])[0]
        return MetricVector(names=self.names, values=values.tolist())


def metric_vector(
    suite: MetricSuite, s_emb, step_now: int, unit: MemoryUnit
) -> MetricVector:
    return suite.vector(s_emb, step_now, unit)


def build_metric_suite(
    config: MetricConfig, dim: int, rng: np.random.Generator
) -> MetricSuite:
    """Load pre-trained scorers from configured paths, else start from a seeded init."""
    emotion = importance = None
    if config.emotion:
        if config.emotion_scorer_path:
            emotion = load_emotion_scorer(config.emotion_scorer_path)
        else:
            logger.info("no emotion scorer configured, using an untrained one")
            emotion = init_emotion_scorer(dim, config.emotion_hidden, rng)
    if config.importance:
        if config.importance_scorer_path:
            importance = load_importance_scorer(config.importance_scorer_path)
        else:
            logger.info("no importance scorer configured, using an untrained one")
            importance = init_importance_scorer(dim, config.importance_projection, rng)
    for scorer in (emotion, importance):
        if scorer is not None and scorer.dim != dim:
            raise DimensionMismatchError(dim, scorer.dim)
    return MetricSuite(config, emotion, importance)
