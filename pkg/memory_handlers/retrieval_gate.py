import json
import logging
from itertools import groupby
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy.special import expit
from scipy.stats import kendalltau

from clients.embedding import EmbeddingProvider
from memory_handlers.metric_functions import MetricSuite, embed
from pydantic_models.arrays import NdArray
from pydantic_models.memory import MemoryStore, RankedEntry, RankedMemories, Trajectory
from pydantic_models.metrics import MetricVector
from pydantic_models.retrieval import GateParams, PairWeighting
from utils.errors import ContractError, DivergenceError

logger = logging.getLogger(__name__)


class RankingExample(BaseModel):
    """One retrieval query: the query embedding and its ranked memories, best first."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    group: str
    query: NdArray
    memories: NdArray
    metrics: NdArray


class CompiledBatch(BaseModel):
    """Stack every ranked row of a batch; contrastive pairs become index arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    inputs: NdArray
    metrics: NdArray
    hi: np.ndarray
    lo: np.ndarray
    pair_weight: NdArray


def init_gate_params(
    dim: int,
    metric_names: list[str],
    hidden: int = 32,
    scale: float = 0.01,
    rng: Optional[np.random.Generator] = None,
) -> GateParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(metric_names)
    return GateParams(
        W1=rng.normal(0.0, scale, size=(hidden, 2 * dim)),
        b1=np.zeros(hidden),
        W2=rng.normal(0.0, scale, size=(n, hidden)),
        b2=np.zeros(n),
        metric_names=list(metric_names),
    )


def save_gate(params: GateParams, path: str) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(params.model_dump_json())


def load_gate(path: str) -> GateParams:
    return GateParams.model_validate(json.loads(Path(path).read_text()))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _check_finite(params: GateParams) -> None:
    if not np.all(np.isfinite(params.flat())):
        raise ContractError("gate parameters contain non-finite values")


def _forward(params: GateParams, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows of [h_s; h_m] to (hidden activations, mixture weights)."""
    hidden = expit(np.einsum("nk,hk->nh", inputs, params.W1) + params.b1)
    logits = np.einsum("nh,ih->ni", hidden, params.W2) + params.b2
    return hidden, _softmax(logits)


def _joint_inputs(s_emb: np.ndarray, memories: np.ndarray) -> np.ndarray:
    memories = np.atleast_2d(memories)
    query = np.broadcast_to(s_emb, memories.shape)
    return np.concatenate([query, memories], axis=1)


def gate_forward(params: GateParams, s_emb, m_emb) -> np.ndarray:
    _check_finite(params)
    s_emb = np.asarray(s_emb, dtype=float)
    m_emb = np.asarray(m_emb, dtype=float)
    if s_emb.shape != (params.dim,) or m_emb.shape != (params.dim,):
        raise ContractError(f"gate expects {params.dim}-dim embeddings")
    _, weights = _forward(params, _joint_inputs(s_emb, m_emb))
    return weights[0]


def match_score(
    params: GateParams, s_emb, m_emb, metrics: Union[MetricVector, np.ndarray]
) -> float:
    values = np.asarray(
        metrics.values if isinstance(metrics, MetricVector) else metrics, dtype=float
    )
    if values.shape != (len(params.metric_names),):
        raise ContractError(
            f"gate mixes {len(params.metric_names)} metrics, got {values.shape[0]}"
        )
    weights = gate_forward(params, s_emb, m_emb)
    return float(np.einsum("ni,ni->n", weights[None, :], values[None, :])[0])


def scores_from_metrics(
    params: GateParams, s_emb: np.ndarray, memories: np.ndarray, metrics: np.ndarray
) -> np.ndarray:
    if len(memories) == 0:
        return np.zeros(0)
    _check_finite(params)
    inputs = _joint_inputs(np.asarray(s_emb, dtype=float), memories)
    _, weights = _forward(params, inputs)
    return np.einsum("ni,ni->n", weights, metrics)


def score_memories(
    params: GateParams, suite: MetricSuite, s_emb, step_now: int, units
) -> np.ndarray:
    if suite.names != params.metric_names:
        raise ContractError(
            f"gate was built for {params.metric_names}, metrics are {suite.names}"
        )
    if not units:
        return np.zeros(0)
    embeddings = np.array([unit.embedding for unit in units], dtype=float)
    metrics = suite.matrix(s_emb, step_now, units)
    return scores_from_metrics(params, s_emb, embeddings, metrics)


def order_by_score(
    scores: np.ndarray, steps: np.ndarray, ids: np.ndarray
) -> np.ndarray:
    # descending score, then most recent step, then highest id
    return np.lexsort((-ids, -steps, -scores))


def rank(
    params: GateParams,
    suite: MetricSuite,
    s_emb,
    store: MemoryStore,
    step_now: int,
    size: Optional[int] = None,
) -> RankedMemories:
    """Rank the store (or its first `size` units) by matching score."""
    units = store.units if size is None else store.prefix(size)
    if not units:
        return RankedMemories(entries=[], query_step=step_now)
    scores = score_memories(params, suite, s_emb, step_now, units)
    steps = np.array([unit.step for unit in units])
    ids = np.array([unit.id for unit in units])
    order = order_by_score(scores, steps, ids)
    return RankedMemories(
        entries=[RankedEntry(id=int(ids[i]), score=float(scores[i])) for i in order],
        query_step=step_now,
    )


def pair_weights(t: int, gamma: float) -> PairWeighting:
    """Position j (1-based) pairs ranks j and t-j+1, signed by sign(t-2j+1)."""
    if t < 2:
        return PairWeighting(gamma=gamma, t=t)
    positions = np.arange(1, t + 1)
    exponents = t - 1 - np.abs(t - 2 * positions + 1)
    powers = gamma ** exponents.astype(float)
    magnitudes = powers / powers.sum()
    orientations = np.sign(t - 2 * positions + 1).astype(int)
    return PairWeighting(
        gamma=gamma,
        t=t,
        exponents=exponents.tolist(),
        magnitudes=magnitudes.tolist(),
        orientations=orientations.tolist(),
    )


def _pairs(t: int, gamma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(higher-ranked, lower-ranked, |w|) for every non-self pair, 0-based."""
    weighting = pair_weights(t, gamma)
    hi, lo, weight = [], [], []
    signed = zip(weighting.orientations, weighting.magnitudes)
    for j, (o, m) in enumerate(signed, start=1):
        if o == 0:
            continue
        hi.append(min(j, t - j + 1) - 1)
        lo.append(max(j, t - j + 1) - 1)
        weight.append(m)
    return np.array(hi, dtype=int), np.array(lo, dtype=int), np.array(weight)


def compile_examples(examples: list[RankingExample], gamma: float) -> CompiledBatch:
    """Stack examples; pair weights carry the per-group then per-batch averaging."""
    usable = [e for e in examples if len(e.memories) >= 2]
    groups = [list(items) for _, items in groupby(usable, key=lambda e: e.group)]
    inputs, metrics, his, los, weights = [], [], [], [], []
    offset = 0
    for group in groups:
        for example in group:
            t = len(example.memories)
            hi, lo, weight = _pairs(t, gamma)
            inputs.append(_joint_inputs(example.query, example.memories))
            metrics.append(example.metrics)
            his.append(hi + offset)
            los.append(lo + offset)
            weights.append(weight / (len(group) * len(groups)))
            offset += t
    if not groups:
        return CompiledBatch(
            inputs=np.zeros((0, 0)),
            metrics=np.zeros((0, 0)),
            hi=np.zeros(0, dtype=int),
            lo=np.zeros(0, dtype=int),
            pair_weight=np.zeros(0),
        )
    return CompiledBatch(
        inputs=np.vstack(inputs),
        metrics=np.vstack(metrics),
        hi=np.concatenate(his),
        lo=np.concatenate(los),
        pair_weight=np.concatenate(weights),
    )


def _loss_and_gradient(
    params: GateParams, batch: CompiledBatch, with_gradient: bool = True
) -> tuple[float, Optional[GateParams]]:
    if len(batch.pair_weight) == 0:
        zero = params.with_flat(np.zeros_like(params.flat()))
        return 0.0, zero
    hidden, weights = _forward(params, batch.inputs)
    scores = np.einsum("ni,ni->n", weights, batch.metrics)
    gaps = scores[batch.hi] - scores[batch.lo]
    # softplus(-gap) = -log sigmoid(gap)
    loss = float(np.sum(batch.pair_weight * np.logaddexp(0.0, -gaps)))
    if not with_gradient:
        return loss, None

    push = batch.pair_weight * expit(-gaps)
    rows = len(scores)
    d_scores = np.bincount(batch.lo, push, minlength=rows) - np.bincount(
        batch.hi, push, minlength=rows
    )
    d_logits = d_scores[:, None] * weights * (batch.metrics - scores[:, None])
    d_hidden = d_logits @ params.W2
    d_pre = d_hidden * hidden * (1.0 - hidden)
    gradient = GateParams(
        W1=d_pre.T @ batch.inputs,
        b1=d_pre.sum(axis=0),
        W2=d_logits.T @ hidden,
        b2=d_logits.sum(axis=0),
        metric_names=params.metric_names,
    )
    return loss, gradient


def retrieval_loss(
    params: GateParams, examples: list[RankingExample], gamma: float
) -> float:
    loss, _ = _loss_and_gradient(params, compile_examples(examples, gamma), False)
    return loss


def retrieval_gradient(
    params: GateParams, examples: list[RankingExample], gamma: float
) -> GateParams:
    _, gradient = _loss_and_gradient(params, compile_examples(examples, gamma))
    return gradient


def train_gate(
    params: GateParams,
    examples: list[RankingExample],
    lr: float,
    steps: int,
    gamma: float = 0.8,
    batch_size: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[GateParams, pd.DataFrame]:
    """Plain gradient descent on the contrastive ranking loss.

    `batch_size` counts groups (trajectories); None means full batch.
    Returns the new parameters and a (step, loss) log.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    rng = rng if rng is not None else np.random.default_rng(0)
    groups = [list(items) for _, items in groupby(examples, key=lambda e: e.group)]
    full_batch = compile_examples(examples, gamma)
    current = params
    log = []
    for step in range(steps):
        if batch_size is None or batch_size >= len(groups):
            batch = full_batch
        else:
            chosen = np.sort(rng.choice(len(groups), size=batch_size, replace=False))
            batch = compile_examples([e for i in chosen for e in groups[i]], gamma)
        loss, gradient = _loss_and_gradient(current, batch)
        flat_gradient = gradient.flat()
        if not np.isfinite(loss) or not np.all(np.isfinite(flat_gradient)):
            raise DivergenceError(
                f"retrieval loss diverged at step {step} (loss={loss}, lr={lr})"
            )
        log.append({"step": step, "loss": loss})
        updated = current.flat() - lr * flat_gradient
        if not np.all(np.isfinite(updated)):
            raise DivergenceError(f"gate parameters became non-finite at step {step}")
        current = current.with_flat(updated)
    final_loss, _ = _loss_and_gradient(current, full_batch, False)
    log.append({"step": steps, "loss": final_loss})
    logger.info("gate trained for %d steps, loss %.6f", steps, final_loss)
    return current, pd.DataFrame(log, columns=["step", "loss"])


def examples_from_trajectories(
    trajectories: list[Trajectory], suite: MetricSuite, provider: EmbeddingProvider
) -> list[RankingExample]:
    """Recorded rankings of every step, re-scored with the current metric functions."""
    examples = []
    for trajectory in trajectories:
        for record in trajectory.steps:
            if len(record.ranked_ids) < 2:
                continue
            units = [trajectory.memories.get(uid) for uid in record.ranked_ids]
            query = embed(provider, record.state_text)
            examples.append(
                RankingExample(
                    group=trajectory.id,
                    query=query,
                    memories=np.array([u.embedding for u in units], dtype=float),
                    metrics=suite.matrix(query, record.step, units),
                )
            )
    return examples


def synthetic_ranking_examples(
    metric_names: list[str],
    designated: str,
    queries: int,
    units_per_query: int = 10,
    dim: int = 16,
    rng: Optional[np.random.Generator] = None,
    group_prefix: str = "synthetic",
) -> list[RankingExample]:
    """Queries whose true ranking is governed by one designated metric column.

    Other columns are independent noise with a wider spread, so a uniform mix
    ranks poorly.
    """
    if designated not in metric_names:
        raise ContractError(f"unknown designated metric {designated!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    column = metric_names.index(designated)
    examples = []
    for q in range(queries):
        query = rng.standard_normal(dim)
        query /= np.linalg.norm(query)
        memories = rng.standard_normal((units_per_query, dim))
        memories /= np.linalg.norm(memories, axis=1, keepdims=True)
        metrics = rng.uniform(0.0, 1.0, size=(units_per_query, len(metric_names)))
        metrics[:, column] = rng.uniform(0.0, 0.5, size=units_per_query)
        order = np.argsort(-metrics[:, column], kind="stable")
        examples.append(
            RankingExample(
                group=f"{group_prefix}-{q}",
                query=query,
                memories=memories[order],
                metrics=metrics[order],
            )
        )
    return examples


def mean_kendall_tau(
    params: GateParams, examples: list[RankingExample], designated: str
) -> float:
    """Average Kendall tau between gate scores and the designated metric per query."""
    column = params.metric_names.index(designated)
    taus = []
    for example in examples:
        scores = scores_from_metrics(
            params, example.query, example.memories, example.metrics
        )
        tau = kendalltau(scores, example.metrics[:, column]).statistic
        taus.append(0.0 if np.isnan(tau) else tau)
    return float(np.mean(taus)) if taus else 0.0
