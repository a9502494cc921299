import logging

import numpy as np

from clients.chat import ChatEndpoint, build_chat_endpoint
from clients.embedding import EmbeddingProvider, build_embedding_provider
from memory_handlers.metric_functions import MetricSuite, build_metric_suite
from memory_handlers.policies import fixed_weight_metric_config
from pydantic_models.config import RunConfig

logger = logging.getLogger(__name__)


class Runtime:
    """Everything a pipeline builds from a RunConfig; nothing is global."""

    def __init__(
        self,
        config: RunConfig,
        chat: ChatEndpoint,
        expert: ChatEndpoint,
        provider: EmbeddingProvider,
        suite: MetricSuite,
    ):
        self.config = config
        self.chat = chat
        self.expert = expert
        self.provider = provider
        self.suite = suite


def build_runtime(config: RunConfig) -> Runtime:
    provider = build_embedding_provider(config.embedding)
    # scorer init draws from its own stream so pipelines see the same rng either way
    metrics = config.metrics
    if config.policy.kind == "fixed-weight":
        metrics = fixed_weight_metric_config(metrics)
    suite = build_metric_suite(
        metrics, provider.dim, np.random.default_rng([config.seed, 1])
    )
    logger.info(
        "runtime: chat=%s/%s, embedding=%s dim %d, metrics=%s",
        config.chat.backend,
        config.chat.model_ref,
        config.embedding.backend,
        provider.dim,
        ",".join(suite.names),
    )
    return Runtime(
        config,
        build_chat_endpoint(config.chat),
        build_chat_endpoint(config.expert),
        provider,
        suite,
    )
