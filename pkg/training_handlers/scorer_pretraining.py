import logging
import re
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import expit

from clients.chat import ChatEndpoint
from clients.embedding import EmbeddingProvider
from memory_handlers.metric_functions import (
    init_emotion_scorer,
    init_importance_scorer,
    load_emotion_scorer,
    load_importance_scorer,
    row_cosines,
    save_scorer,
)
from pydantic_models.config import MetricConfig, ScorerTrainingConfig
from pydantic_models.metrics import EMOTIONS, EmotionScorer, ImportanceScorer
from pydantic_models.scorers import (
    EmotionSample,
    ImportanceChain,
    ImportanceTriple,
    ScorerEvaluationRow,
)
from utils.errors import (
    ContractError,
    DivergenceError,
    EndpointError,
    ScriptExhaustedError,
)
from utils.jsonl import read_models, write_models

logger = logging.getLogger(__name__)

EMOTION_GENERATION_TEMPLATE = (
    "Seed sentence: {seed}\n"
    "Rewrite the seed sentence so that it clearly expresses "
    "these emotions: {emotions}.\n"
    "Output only the new sentence."
)

IMPORTANCE_SEED_TEMPLATE = (
    "Question: {query}\n"
    "Write one short seed sentence that starts answering the question.\n"
    "Output only the sentence."
)

IMPORTANCE_ENRICH_TEMPLATE = (
    "Question: {query}\n"
    "Sentence: {sentence}\n"
    "Enrich the sentence with one more concrete detail "
    "that helps answer the question.\n"
    "Output only the enriched sentence."
)

IMPORTANCE_SCORING_TEMPLATE = (
    "{examples}Question: {query}\n"
    "Sentence: {sentence}\n"
    "Rate how much information the sentence carries for answering the question. "
    "Answer with a single number between 0.0 and 1.0."
)

EMOTION_SCORING_TEMPLATE = (
    "{examples}Sentence: {sentence}\n"
    "Score each of the eight emotions ("
    + ", ".join(EMOTIONS)
    + ") between 0.0 and 1.0. "
    "Answer with eight comma-separated numbers."
)

_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")

_GENERATION_FAILURES = (EndpointError, ScriptExhaustedError)


def emotion_combos() -> list[tuple[int, ...]]:
    """All non-empty subsets of at most three emotions (92 of them)."""
    return [c for size in (1, 2, 3) for c in combinations(range(len(EMOTIONS)), size)]


def gen_emotion_dataset(
    endpoint: ChatEndpoint, seed_sentence: str, n: int, rng: np.random.Generator
) -> tuple[list[EmotionSample], int]:
    """Returns the samples and the number of failed generations."""
    if n < 1:
        raise ContractError("need at least one emotion sample")
    combos = emotion_combos()
    samples, failures = [], 0
    for _ in range(n):
        combo = combos[int(rng.integers(len(combos)))]
        prompt = EMOTION_GENERATION_TEMPLATE.format(
            seed=seed_sentence, emotions=", ".join(EMOTIONS[i] for i in combo)
        )
        try:
            sentence = endpoint.complete(prompt).strip()
        except _GENERATION_FAILURES as exc:
            logger.warning("emotion generation failed: %s", exc)
            failures += 1
            continue
        if not sentence:
            failures += 1
            continue
        label = [int(i in combo) for i in range(len(EMOTIONS))]
        samples.append(EmotionSample(sentence=sentence, label=label))
    return samples, failures


def emotion_loss_and_gradient(
    scorer: EmotionScorer, embeddings: np.ndarray, labels: np.ndarray
) -> tuple[float, EmotionScorer]:
    """Squared error summed over the 8 emotions, averaged over samples."""
    hidden = np.tanh(embeddings @ scorer.W1e.T + scorer.b1e)
    outputs = hidden @ scorer.W2e.T + scorer.b2e
    residual = outputs - labels
    loss = float(np.mean(np.sum(residual**2, axis=1)))
    d_out = 2.0 * residual / len(labels)
    d_hidden = d_out @ scorer.W2e
    d_pre = d_hidden * (1.0 - hidden**2)
    gradient = EmotionScorer(
        W1e=d_pre.T @ embeddings,
        b1e=d_pre.sum(axis=0),
        W2e=d_out.T @ hidden,
        b2e=d_out.sum(axis=0),
    )
    return loss, gradient


def train_emotion_scorer(
    samples: list[EmotionSample],
    provider: EmbeddingProvider,
    lr: float,
    epochs: int,
    rng: np.random.Generator,
    hidden: int = 64,
    initial: Optional[EmotionScorer] = None,
) -> tuple[EmotionScorer, pd.DataFrame]:
    if not samples:
        raise ContractError("cannot train the emotion scorer on an empty dataset")
    embeddings = provider.embed_many([s.sentence for s in samples])
    labels = np.array([s.label for s in samples], dtype=float)
    scorer = initial or init_emotion_scorer(provider.dim, hidden, rng)
    losses = []
    for epoch in range(epochs):
        loss, gradient = emotion_loss_and_gradient(scorer, embeddings, labels)
        if not np.isfinite(loss):
            raise DivergenceError(f"emotion loss diverged at epoch {epoch} (lr={lr})")
        losses.append({"epoch": epoch, "loss": loss})
        scorer = scorer.with_flat(scorer.flat() - lr * gradient.flat())
    final, _ = emotion_loss_and_gradient(scorer, embeddings, labels)
    losses.append({"epoch": epochs, "loss": final})
    logger.info("emotion scorer trained for %d epochs, mse %.4f", epochs, final)
    return scorer, pd.DataFrame(losses, columns=["epoch", "loss"])


def gen_importance_chains(
    endpoint: ChatEndpoint, queries: list[str], chain_length: int
) -> tuple[list[ImportanceChain], int]:
    """One incrementally enriched chain per query; a failed call drops the chain."""
    if chain_length < 2:
        raise ContractError("an enrichment chain needs at least two sentences")
    chains, failures = [], 0
    for chain_id, query in enumerate(queries):
        try:
            seed = endpoint.complete(IMPORTANCE_SEED_TEMPLATE.format(query=query))
            sentences = [seed.strip()]
            while len(sentences) < chain_length:
                prompt = IMPORTANCE_ENRICH_TEMPLATE.format(
                    query=query, sentence=sentences[-1]
                )
                sentences.append(endpoint.complete(prompt).strip())
        except _GENERATION_FAILURES as exc:
            logger.warning("chain %d skipped: %s", chain_id, exc)
            failures += 1
            continue
        chains.append(
            ImportanceChain(chain_id=chain_id, query=query, sentences=sentences)
        )
    return chains, failures


def triples_from_chains(
    chains: list[ImportanceChain], pairs_per_chain: int, rng: np.random.Generator
) -> list[ImportanceTriple]:
    triples = []
    for chain in chains:
        pairs = list(combinations(range(len(chain.sentences)), 2))
        take = min(pairs_per_chain, len(pairs))
        for index in np.sort(rng.choice(len(pairs), size=take, replace=False)):
            low, high = pairs[index]
            triples.append(
                ImportanceTriple(
                    query=chain.query,
                    positive=chain.sentences[high],
                    negative=chain.sentences[low],
                    chain_id=chain.chain_id,
                    positive_rank=high,
                    negative_rank=low,
                )
            )
    return triples


def gen_importance_dataset(
    endpoint: ChatEndpoint,
    queries: list[str],
    chain_length: int,
    pairs_per_chain: int,
    rng: np.random.Generator,
) -> tuple[list[ImportanceTriple], list[ImportanceChain], int]:
    chains, failures = gen_importance_chains(endpoint, queries, chain_length)
    return triples_from_chains(chains, pairs_per_chain, rng), chains, failures


def _cosine_parts(
    u: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row cosines and their gradients with respect to u and v."""
    nu = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
    nv = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    cos = np.sum(u * v, axis=1, keepdims=True) / (nu * nv)
    d_u = v / (nu * nv) - cos * u / nu**2
    d_v = u / (nu * nv) - cos * v / nv**2
    return cos[:, 0], d_u, d_v


def importance_loss_and_gradient(
    scorer: ImportanceScorer,
    queries: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
) -> tuple[float, ImportanceScorer]:
    """mean softplus(d(q, s-) - d(q, s+)), the pairwise logistic loss."""
    u = queries @ scorer.W1p.T + scorer.b1p
    v_pos = positives @ scorer.W2p.T + scorer.b2p
    v_neg = negatives @ scorer.W2p.T + scorer.b2p
    cos_pos, du_pos, dv_pos = _cosine_parts(u, v_pos)
    cos_neg, du_neg, dv_neg = _cosine_parts(u, v_neg)
    margin = cos_pos - cos_neg
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    weight = (expit(-margin) / len(margin))[:, None]
    d_u = -weight * du_pos + weight * du_neg
    d_vpos = -weight * dv_pos
    d_vneg = weight * dv_neg
    gradient = ImportanceScorer(
        W1p=d_u.T @ queries,
        b1p=d_u.sum(axis=0),
        W2p=d_vpos.T @ positives + d_vneg.T @ negatives,
        b2p=d_vpos.sum(axis=0) + d_vneg.sum(axis=0),
    )
    return loss, gradient


def _triple_embeddings(triples: list[ImportanceTriple], provider: EmbeddingProvider):
    return (
        provider.embed_many([t.query for t in triples]),
        provider.embed_many([t.positive for t in triples]),
        provider.embed_many([t.negative for t in triples]),
    )


def train_importance_scorer(
    triples: list[ImportanceTriple],
    provider: EmbeddingProvider,
    lr: float,
    epochs: int,
    rng: np.random.Generator,
    projection: int = 64,
    initial: Optional[ImportanceScorer] = None,
) -> tuple[ImportanceScorer, pd.DataFrame]:
    if not triples:
        raise ContractError("cannot train the importance scorer on an empty dataset")
    queries, positives, negatives = _triple_embeddings(triples, provider)
    scorer = initial or init_importance_scorer(provider.dim, projection, rng)
    losses = []
    for epoch in range(epochs):
        loss, gradient = importance_loss_and_gradient(
            scorer, queries, positives, negatives
        )
        if not np.isfinite(loss):
            raise DivergenceError(
                f"importance loss diverged at epoch {epoch} (lr={lr})"
            )
        losses.append({"epoch": epoch, "loss": loss})
        scorer = scorer.with_flat(scorer.flat() - lr * gradient.flat())
    final, _ = importance_loss_and_gradient(scorer, queries, positives, negatives)
    losses.append({"epoch": epochs, "loss": final})
    logger.info("importance scorer trained for %d epochs, loss %.4f", epochs, final)
    return scorer, pd.DataFrame(losses, columns=["epoch", "loss"])


def importance_scores(
    scorer: ImportanceScorer,
    provider: EmbeddingProvider,
    query: str,
    sentences: list[str],
) -> np.ndarray:
    query_features = scorer.query_features(provider.embed(query))
    memory_features = scorer.memory_features(provider.embed_many(sentences))
    return row_cosines(query_features, memory_features)


def pair_accuracy(
    scorer: ImportanceScorer,
    provider: EmbeddingProvider,
    triples: list[ImportanceTriple],
) -> float:
    if not triples:
        raise ContractError("pair accuracy of an empty set is undefined")
    queries, positives, negatives = _triple_embeddings(triples, provider)
    u = scorer.query_features(queries)
    better = row_cosines(u, scorer.memory_features(positives)) > row_cosines(
        u, scorer.memory_features(negatives)
    )
    return float(np.mean(better))


def ndcg_at_k(relevances: list[float], k: int) -> float:
    """NDCG@k of relevances listed in ranked order (linear gain)."""
    if k < 1:
        raise ContractError("k must be at least 1")
    if len(relevances) == 0:
        raise ContractError("NDCG of an empty ranking is undefined")
    relevances = np.asarray(relevances, dtype=float)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    top = relevances[:k]
    ideal = np.sort(relevances)[::-1][:k]
    idcg = float(np.sum(ideal * discounts[: len(ideal)]))
    if idcg == 0:
        return 0.0
    return float(np.sum(top * discounts[: len(top)])) / idcg


def mse(predictions, labels) -> float:
    """Squared error summed over dimensions, averaged over samples."""
    predictions = np.atleast_2d(np.asarray(predictions, dtype=float))
    labels = np.atleast_2d(np.asarray(labels, dtype=float))
    if predictions.size == 0:
        raise ContractError("MSE of an empty set is undefined")
    if predictions.shape != labels.shape:
        raise ContractError(f"shape mismatch {predictions.shape} vs {labels.shape}")
    return float(np.mean(np.sum((predictions - labels) ** 2, axis=1)))


def ifr(failed: list[bool]) -> float:
    """Instruction-failure rate: unparsable outputs over scoring calls."""
    if not failed:
        raise ContractError("IFR of zero calls is undefined")
    return float(np.mean(failed))


def chain_ndcg(scores: np.ndarray, k: int = 5) -> float:
    """NDCG of a chain ranked by `scores`; relevance is the enrichment depth."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return ndcg_at_k(order.astype(float).tolist(), k)


def parse_score(text: str) -> Optional[float]:
    match = _NUMBER.search(text)
    if match is None:
        return None
    value = float(match.group(0))
    return value if 0.0 <= value <= 1.0 else None


def parse_emotion_scores(text: str) -> Optional[list[float]]:
    values = [float(v) for v in _NUMBER.findall(text)]
    if len(values) != len(EMOTIONS) or not all(0.0 <= v <= 1.0 for v in values):
        return None
    return values


def _importance_examples(chains: list[ImportanceChain], count: int) -> str:
    lines = []
    for chain in chains[:count]:
        depth = len(chain.sentences) - 1
        for rank in (0, depth):
            lines.append(
                f"Question: {chain.query}\nSentence: {chain.sentences[rank]}\n"
                f"Score: {rank / depth:.1f}\n\n"
            )
    return "".join(lines)


def _emotion_examples(samples: list[EmotionSample], count: int) -> str:
    return "".join(
        f"Sentence: {s.sentence}\nScores: {', '.join(f'{v:.1f}' for v in s.label)}\n\n"
        for s in samples[:count]
    )


def _prompted_importance(
    endpoint: ChatEndpoint, chains: list[ImportanceChain], examples: str
) -> tuple[float, list[bool]]:
    ndcgs, failed = [], []
    for chain in chains:
        scores = []
        for sentence in chain.sentences:
            prompt = IMPORTANCE_SCORING_TEMPLATE.format(
                examples=examples, query=chain.query, sentence=sentence
            )
            try:
                score = parse_score(endpoint.complete(prompt))
            except _GENERATION_FAILURES:
                score = None
            failed.append(score is None)
            scores.append(0.0 if score is None else score)
        ndcgs.append(chain_ndcg(np.array(scores)))
    return float(np.mean(ndcgs)), failed


def _prompted_emotion(
    endpoint: ChatEndpoint, samples: list[EmotionSample], examples: str
) -> tuple[np.ndarray, list[bool]]:
    predictions, failed = [], []
    for sample in samples:
        prompt = EMOTION_SCORING_TEMPLATE.format(
            examples=examples, sentence=sample.sentence
        )
        try:
            values = parse_emotion_scores(endpoint.complete(prompt))
        except _GENERATION_FAILURES:
            values = None
        failed.append(values is None)
        predictions.append([0.0] * len(EMOTIONS) if values is None else values)
    return np.array(predictions), failed


def evaluate_scorers(
    endpoint: ChatEndpoint,
    provider: EmbeddingProvider,
    emotion_scorer: EmotionScorer,
    importance_scorer: ImportanceScorer,
    emotion_test: list[EmotionSample],
    chains_test: list[ImportanceChain],
    emotion_train: list[EmotionSample],
    chains_train: list[ImportanceChain],
    few_shot: int,
    rng: np.random.Generator,
) -> list[ScorerEvaluationRow]:
    """Random, zero-shot, few-shot and trained scorers on the held-out data."""
    if not emotion_test or not chains_test:
        raise ContractError("evaluation needs held-out emotion samples and chains")
    labels = np.array([s.label for s in emotion_test], dtype=float)
    rows = []

    random_ndcg = np.mean(
        [chain_ndcg(rng.random(len(chain.sentences))) for chain in chains_test]
    )
    random_mse = mse(rng.random(labels.shape), labels)
    rows.append(
        ScorerEvaluationRow(
            method="random", ndcg_at_5=random_ndcg, mse=random_mse, ifr=0.0
        )
    )

    for method, count in (("zero-shot", 0), ("few-shot", few_shot)):
        ndcg, failed_imp = _prompted_importance(
            endpoint, chains_test, _importance_examples(chains_train, count)
        )
        predictions, failed_emo = _prompted_emotion(
            endpoint, emotion_test, _emotion_examples(emotion_train, count)
        )
        rows.append(
            ScorerEvaluationRow(
                method=method,
                ndcg_at_5=ndcg,
                mse=mse(predictions, labels),
                ifr=ifr(failed_imp + failed_emo),
            )
        )

    trained_ndcg = np.mean(
        [
            chain_ndcg(
                importance_scores(importance_scorer, provider, c.query, c.sentences)
            )
            for c in chains_test
        ]
    )
    test_embeddings = provider.embed_many([s.sentence for s in emotion_test])
    predictions = emotion_scorer.emotions(test_embeddings)
    rows.append(
        ScorerEvaluationRow(
            method="trained",
            ndcg_at_5=trained_ndcg,
            mse=mse(predictions, labels),
            ifr=0.0,
        )
    )
    return rows


def split_holdout(items: list, fraction: float) -> tuple[list, list]:
    """Deterministic tail split: the last `fraction` of items are held out."""
    held = int(round(len(items) * fraction))
    if fraction > 0 and held == 0 and len(items) > 1:
        held = 1
    cut = len(items) - held
    return items[:cut], items[cut:]


class ScorerArtifacts:
    def __init__(self, output_dir: str):
        self.root = Path(output_dir)
        self.emotion_dataset = self.root / "emotion_dataset.jsonl"
        self.importance_chains = self.root / "importance_chains.jsonl"
        self.importance_dataset = self.root / "importance_dataset.jsonl"
        self.emotion_scorer = self.root / "emotion_scorer.json"
        self.importance_scorer = self.root / "importance_scorer.json"
        self.emotion_loss = self.root / "emotion_loss.csv"
        self.importance_loss = self.root / "importance_loss.csv"
        self.evaluation = self.root / "scorer_evaluation.csv"


def pretrain_scorers(
    config: ScorerTrainingConfig,
    metrics: MetricConfig,
    endpoint: ChatEndpoint,
    provider: EmbeddingProvider,
    output_dir: str,
    seed: int,
) -> dict:
    """Generate both datasets, train both scorers and write them to `output_dir`."""
    rng = np.random.default_rng(seed)
    paths = ScorerArtifacts(output_dir)
    paths.root.mkdir(parents=True, exist_ok=True)

    samples, emotion_failures = gen_emotion_dataset(
        endpoint, config.emotion_seed_sentence, config.emotion_samples, rng
    )
    write_models(str(paths.emotion_dataset), samples)
    emotion_train, _ = split_holdout(samples, config.holdout_fraction)
    emotion_scorer, emotion_log = train_emotion_scorer(
        emotion_train,
        provider,
        config.emotion_lr,
        config.emotion_epochs,
        rng,
        hidden=metrics.emotion_hidden,
    )
    save_scorer(emotion_scorer, str(paths.emotion_scorer))
    emotion_log.to_csv(paths.emotion_loss, index=False)

    chains, chain_failures = gen_importance_chains(
        endpoint, config.importance_queries, config.chain_length
    )
    write_models(str(paths.importance_chains), chains)
    chains_train, _ = split_holdout(chains, config.holdout_fraction)
    triples = triples_from_chains(chains_train, config.pairs_per_chain, rng)
    write_models(str(paths.importance_dataset), triples)
    importance_scorer, importance_log = train_importance_scorer(
        triples,
        provider,
        config.importance_lr,
        config.importance_epochs,
        rng,
        projection=metrics.importance_projection,
    )
    save_scorer(importance_scorer, str(paths.importance_scorer))
    importance_log.to_csv(paths.importance_loss, index=False)

    logger.info(
        "scorer pre-training done: %d emotion samples (%d failed), "
        "%d chains (%d failed)",
        len(samples),
        emotion_failures,
        len(chains),
        chain_failures,
    )
    return {
        "emotion_samples": len(samples),
        "emotion_failures": emotion_failures,
        "chains": len(chains),
        "chain_failures": chain_failures,
        "triples": len(triples),
    }


def evaluate_scorer_grid(
    config: ScorerTrainingConfig,
    endpoint: ChatEndpoint,
    provider: EmbeddingProvider,
    output_dir: str,
    seed: int,
) -> pd.DataFrame:
    """Evaluate the artifacts of `pretrain_scorers` and write the grid as CSV."""
    paths = ScorerArtifacts(output_dir)
    samples = read_models(str(paths.emotion_dataset), EmotionSample)
    chains = read_models(str(paths.importance_chains), ImportanceChain)
    emotion_train, emotion_test = split_holdout(samples, config.holdout_fraction)
    chains_train, chains_test = split_holdout(chains, config.holdout_fraction)
    rows = evaluate_scorers(
        endpoint,
        provider,
        load_emotion_scorer(str(paths.emotion_scorer)),
        load_importance_scorer(str(paths.importance_scorer)),
        emotion_test,
        chains_test,
        emotion_train,
        chains_train,
        config.few_shot_examples,
        np.random.default_rng(seed),
    )
    frame = pd.DataFrame([row.model_dump() for row in rows])
    frame.to_csv(paths.evaluation, index=False)
    return frame
