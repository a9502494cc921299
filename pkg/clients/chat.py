import hashlib
import logging
import os
import threading
import time
from typing import Callable, Optional, Union

import httpx
from pydantic import BaseModel

from pydantic_models.config import EndpointConfig
from utils.errors import (
    ContractError,
    EndpointError,
    RetryableEndpointError,
    ScriptExhaustedError,
)

logger = logging.getLogger(__name__)

Messages = list[dict[str, str]]
# (prompt, call_index) -> reply text
Responder = Callable[[str, int], str]


class ChatReply(BaseModel):
    text: str
    token_logprobs: Optional[list[float]] = None


def prompt_of(messages: Messages) -> str:
    return "\n".join(message["content"] for message in messages)


def prompt_hash(messages: Messages) -> str:
    return hashlib.sha256(prompt_of(messages).encode("utf-8")).hexdigest()


def user_message(prompt: str) -> Messages:
    return [{"role": "user", "content": prompt}]


class ChatEndpoint:
    model_ref: str
    supports_logprobs: bool = False

    def chat(self, messages: Messages) -> ChatReply:
        raise NotImplementedError

    def complete(self, prompt: str) -> str:
        return self.chat(user_message(prompt)).text

    def with_model(self, model_ref: str) -> "ChatEndpoint":
        raise NotImplementedError


class RemoteChatEndpoint(ChatEndpoint):
    """Chat-completions client; retries timeouts, transport errors, 429 and 5xx."""

    def __init__(
        self, config: EndpointConfig, transport: Optional[httpx.BaseTransport] = None
    ):
        self.config = config
        self.model_ref = config.model_ref
        self.supports_logprobs = config.logprobs
        self.retries = 0
        self._transport = transport
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

    def with_model(self, model_ref: str) -> "RemoteChatEndpoint":
        return RemoteChatEndpoint(
            self.config.model_copy(update={"model_ref": model_ref}), self._transport
        )

    def chat(self, messages: Messages) -> ChatReply:
        if not messages:
            raise ContractError("chat needs at least one message")
        payload = {
            "model": self.model_ref,
            "messages": messages,
            "temperature": self.config.temperature,
        }
        if self.supports_logprobs:
            payload["logprobs"] = True

        attempts = self.config.max_retries + 1
        for attempt in range(attempts):
            try:
                return self._post(payload)
            except RetryableEndpointError as exc:
                if attempt == attempts - 1:
                    raise
                self.retries += 1
                delay = self.config.backoff_seconds * (2**attempt)
                logger.warning(
                    "chat call to %s failed (%s), retry %d/%d in %.2fs",
                    self.model_ref,
                    exc,
                    attempt + 1,
                    self.config.max_retries,
                    delay,
                )
                time.sleep(delay)
        raise EndpointError("unreachable")

    def _post(self, payload: dict) -> ChatReply:
        try:
            response = self._client.post("/chat/completions", json=payload)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise RetryableEndpointError(str(exc)) from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise RetryableEndpointError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise EndpointError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            choice = response.json()["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, ValueError) as exc:
            raise EndpointError(f"unexpected chat response: {exc}") from exc
        logprobs = None
        if self.supports_logprobs and choice.get("logprobs"):
            content = choice["logprobs"].get("content", [])
            logprobs = [item["logprob"] for item in content]
        return ChatReply(text=text.strip(), token_logprobs=logprobs)


class _ScriptCursor:
    def __init__(self):
        self.lock = threading.Lock()
        self.calls = 0
        self.prompts: list[str] = []


class ScriptedChatEndpoint(ChatEndpoint):
    """Deterministic endpoint over a reply list or a (prompt, call index) responder.

    Calls are serialized so concurrent callers still consume the script in order.
    Views made by `with_model` share the script position.
    """

    def __init__(
        self,
        script: Union[list[str], Responder],
        model_ref: str = "scripted",
        logprobs: Optional[list[float]] = None,
        _cursor: Optional[_ScriptCursor] = None,
    ):
        self.script = script
        self.model_ref = model_ref
        self.supports_logprobs = logprobs is not None
        self._logprobs = logprobs
        self._cursor = _cursor or _ScriptCursor()

    @property
    def calls(self) -> int:
        return self._cursor.calls

    @property
    def prompts(self) -> list[str]:
        return self._cursor.prompts

    def with_model(self, model_ref: str) -> "ScriptedChatEndpoint":
        return ScriptedChatEndpoint(
            self.script, model_ref, self._logprobs, self._cursor
        )

    def chat(self, messages: Messages) -> ChatReply:
        if not messages:
            raise ContractError("chat needs at least one message")
        prompt = prompt_of(messages)
        cursor = self._cursor
        with cursor.lock:
            index = cursor.calls
            if callable(self.script):
                text = self.script(prompt, index)
            else:
                if index >= len(self.script):
                    raise ScriptExhaustedError(
                        f"script has {len(self.script)} replies, "
                        f"call {index + 1} requested"
                    )
                text = self.script[index]
            cursor.calls += 1
            cursor.prompts.append(prompt)
        logger.debug("scripted call %d, prompt %s", index, prompt_hash(messages)[:12])
        return ChatReply(text=text, token_logprobs=self._logprobs)


def build_chat_endpoint(config: EndpointConfig) -> ChatEndpoint:
    if config.backend == "remote":
        return RemoteChatEndpoint(config)
    if config.script is not None:
        return ScriptedChatEndpoint(list(config.script), config.model_ref)
    # local import: the responders module imports the prompt templates
    from clients.scripted import responder_by_name

    return ScriptedChatEndpoint(responder_by_name(config.responder), config.model_ref)
