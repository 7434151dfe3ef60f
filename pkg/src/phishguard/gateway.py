"""Chat-completion access across the evaluated model families.

One OpenAI-compatible remote backend covers the hosted models; the
scripted backend answers from a substring rule table for offline,
fully deterministic runs. complete() wraps either with bounded
retries (transient failures only) and exponential backoff + jitter.
"""
from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import requests

from .errors import (AuthFailed, ContextOverflow, Exhausted, NoDefaultRule,
                     UnknownModel)
from .prompting import SYSTEM_MESSAGE

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.2
DEFAULT_MAX_OUTPUT_TOKENS = 1024
MAX_RETRIES = 3
CHARS_PER_TOKEN = 4  # character-budget estimate for window checks


@dataclass(frozen=True)
class ModelSpec:
    key: str
    provider_label: str
    parameter_count: str
    context_window_tokens: int
    endpoint_model_id: str


def registry_default() -> list[ModelSpec]:
    """The four evaluated model families."""
    return [
        ModelSpec("llama4-scout", "Meta", "17B", 131000,
                  "llama-4-scout-17b-16e-instruct"),
        ModelSpec("deepseek-r1", "DeepSeek", "70B", 128000,
                  "deepseek-r1-distill-llama-70b"),
        ModelSpec("mistral-saba", "Mistral", "24B", 32000,
                  "mistral-saba-24b"),
        ModelSpec("gemma2-9b", "Google", "9B", 8000,
                  "gemma2-9b-it"),
    ]


def lookup(key: str, registry: Optional[list[ModelSpec]] = None) -> ModelSpec:
    for spec in registry if registry is not None else registry_default():
        if spec.key == key:
            return spec
    raise UnknownModel(f"model key {key!r} not in registry")


def endpoint_model_id(spec: ModelSpec) -> str:
    """Endpoint id, overridable per model via LLM_MODEL_ID_<KEY>."""
    env_key = "LLM_MODEL_ID_" + spec.key.upper().replace("-", "_")
    return os.environ.get(env_key, spec.endpoint_model_id)


@dataclass
class ChatRequest:
    user_message: str
    system_message: str = SYSTEM_MESSAGE
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS


class _Transient(Exception):
    """Internal marker for retryable failures (timeout, 5xx, 429)."""


@dataclass
class ScriptedRule:
    response: str
    contains: Optional[str] = None  # None or "" is the default rule
    min_count: int = 1

    def matches(self, prompt: str) -> bool:
        if not self.contains:
            return True
        return prompt.count(self.contains) >= self.min_count


class ScriptedBackend:
    """Deterministic rule-table backend: first matching rule wins.

    Matchers test substring presence in the rendered prompt; min_count
    requires that many occurrences. A default (matcher-less) rule is
    mandatory so every prompt gets an answer.
    """

    kind = "scripted"

    def __init__(self, rules: list[ScriptedRule],
                 model_spec: Optional[ModelSpec] = None):
        if not rules or not any(r.contains in (None, "") for r in rules):
            raise NoDefaultRule("scripted backend needs a default rule")
        self.rules = list(rules)
        self.model_spec = model_spec
        self.calls = 0

    @classmethod
    def from_json_file(cls, path, model_spec: Optional[ModelSpec] = None
                       ) -> "ScriptedBackend":
        with open(path, "r", encoding="utf-8") as fh:
            raw_rules = json.load(fh)
        rules = []
        for entry in raw_rules:
            response = entry["response"]
            if not isinstance(response, str):
                response = json.dumps(response)
            contains = None if entry.get("default") else entry.get("contains")
            rules.append(ScriptedRule(response=response, contains=contains,
                                      min_count=int(entry.get("min_count", 1))))
        return cls(rules, model_spec=model_spec)

    def send(self, req: ChatRequest) -> str:
        self.calls += 1
        for rule in self.rules:
            if rule.matches(req.user_message):
                return rule.response
        raise AssertionError("unreachable: default rule always matches")


class RemoteChatBackend:
    """OpenAI-compatible POST /chat/completions client."""

    kind = "remote"

    def __init__(self, model_spec: ModelSpec,
                 base_url: Optional[str] = None,
                 api_key: Optional[str] = None,
                 timeout: float = 60.0,
                 max_in_flight: int = 2,
                 session: Optional[requests.Session] = None):
        self.model_spec = model_spec
        self.base_url = (base_url or os.environ.get("LLM_BASE_URL", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("LLM_API_KEY", "")
        self.timeout = timeout
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(max_in_flight)
        self.last_meta: dict = {}

    def send(self, req: ChatRequest) -> str:
        estimated = (len(req.system_message) + len(req.user_message)) / CHARS_PER_TOKEN
        if estimated > self.model_spec.context_window_tokens:
            raise ContextOverflow(
                f"~{estimated:.0f} tokens exceed {self.model_spec.key} window "
                f"of {self.model_spec.context_window_tokens}")
        payload = {
            "model": endpoint_model_id(self.model_spec),
            "messages": [
                {"role": "system", "content": req.system_message},
                {"role": "user", "content": req.user_message},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        started = time.perf_counter()
        try:
            with self._gate:
                resp = self._session.post(f"{self.base_url}/chat/completions",
                                          json=payload, headers=headers,
                                          timeout=self.timeout)
        except requests.RequestException as exc:
            raise _Transient(str(exc)) from exc
        latency = time.perf_counter() - started
        if resp.status_code in (401, 403):
            raise AuthFailed(f"HTTP {resp.status_code} from chat endpoint")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}")
        resp.raise_for_status()
        data = resp.json()
        self.last_meta = {"latency_s": latency,
                          "usage": data.get("usage", {})}
        logger.debug("chat completion in %.2fs usage=%s", latency,
                     self.last_meta["usage"])
        return data["choices"][0]["message"]["content"]


def complete(backend, req: ChatRequest, sleep=time.sleep,
             rng: Optional[random.Random] = None) -> str:
    """Send one chat request; retry transient failures up to MAX_RETRIES
    times with exponential backoff + jitter. AuthFailed never retries."""
    rng = rng or random
    attempts = 0
    while True:
        attempts += 1
        try:
            text = backend.send(req)
            if attempts > 1:
                logger.info("completion succeeded on attempt %d", attempts)
            return text
        except _Transient as exc:
            if attempts > MAX_RETRIES:
                raise Exhausted(
                    f"gave up after {attempts} attempts: {exc}") from exc
            delay = 0.5 * (2 ** (attempts - 1)) + rng.uniform(0.0, 0.25)
            logger.warning("transient failure (%s), retry %d in %.2fs",
                           exc, attempts, delay)
            sleep(delay)
