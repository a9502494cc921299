import hashlib
import logging
import os
import threading
import time
from typing import Optional

import httpx
import numpy as np

from pydantic_models.config import EmbeddingConfig
from utils.errors import ContractError, EndpointError, RetryableEndpointError
from utils.text import tokenize

logger = logging.getLogger(__name__)


class EmbeddingProvider:
    dim: int

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed_many(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed(text) for text in texts])


def token_vector(seed: int, token: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim)


class MockEmbeddingProvider(EmbeddingProvider):
    """Seeded token vectors summed into one unit vector; offline and deterministic."""

    def __init__(self, dim: int = 768, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._tokens: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _token(self, token: str) -> np.ndarray:
        with self._lock:
            vector = self._tokens.get(token)
            if vector is None:
                vector = token_vector(self.seed, token, self.dim)
                self._tokens[token] = vector
        return vector

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ContractError("cannot embed empty text")
        tokens = tokenize(text) or [text.strip()]
        total = np.zeros(self.dim)
        for token in tokens:
            total += self._token(token)
        return total / np.linalg.norm(total)


class RemoteEmbeddingProvider(EmbeddingProvider):
    def __init__(
        self, config: EmbeddingConfig, transport: Optional[httpx.BaseTransport] = None
    ):
        self.config = config
        self.dim = config.dim
        headers = {}
        token = os.getenv(config.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=config.base_url,
            timeout=config.timeout,
            headers=headers,
            transport=transport,
        )

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ContractError("cannot embed empty text")
        for attempt in range(self.config.max_retries + 1):
            try:
                vector = self._request(text)
                break
            except RetryableEndpointError:
                if attempt == self.config.max_retries:
                    raise
                logger.warning("embedding call failed, retry %d", attempt + 1)
                time.sleep(self.config.backoff_seconds * (2**attempt))
        if vector.shape != (self.dim,):
            raise EndpointError(
                f"endpoint returned {vector.shape[0]} dims, want {self.dim}"
            )
        norm = np.linalg.norm(vector)
        if norm == 0:
            raise EndpointError("endpoint returned a zero vector")
        return vector / norm

    def _request(self, text: str) -> np.ndarray:
        try:
            response = self._client.post(
                "/embeddings", json={"model": self.config.model, "input": text}
            )
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise RetryableEndpointError(str(exc)) from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise RetryableEndpointError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise EndpointError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            return np.asarray(response.json()["data"][0]["embedding"], dtype=float)
        except (KeyError, IndexError, ValueError) as exc:
            raise EndpointError(f"unexpected embedding response: {exc}") from exc


def build_embedding_provider(config: EmbeddingConfig) -> EmbeddingProvider:
    if config.backend == "remote":
        return RemoteEmbeddingProvider(config)
    return MockEmbeddingProvider(config.dim, config.seed)
