"""Email embeddings: pluggable providers plus exact vector arithmetic.

Vectors are plain numpy float64 arrays of a fixed dimension (default
384). The hash provider is a deterministic offline substitute for a
transformer embedding service: token-level feature hashing gives
meaningful cosine similarity between texts sharing vocabulary, with no
model weights involved.
"""
from __future__ import annotations

import hashlib
import os
import re
import threading
import time

import numpy as np
import requests

from .emailcore import CleanEmail
from .errors import DimensionMismatch, ProviderUnavailable, ZeroVector

DEFAULT_DIM = 384
# Provider input cap in characters; the body tail is truncated first.
INPUT_CHAR_LIMIT = 8000

_TOKEN_RE = re.compile(r"[0-9A-Za-z]+")


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Project v onto the unit sphere. Raises ZeroVector below 1e-12 norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        raise ZeroVector("cannot normalize a zero vector")
    return v / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """cos(a, b) = a.b / (|a||b|); equals the dot product on unit vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        raise ZeroVector("cosine undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def hash_embed(text: str, dim: int = DEFAULT_DIM, seed: int = 0) -> np.ndarray:
    """Signed token-count histogram under feature hashing.

    Tokens split on non-alphanumerics; each token maps to a bucket and a
    sign derived from a keyed blake2b digest, so the embedding is
    deterministic for a given (text, dim, seed) and stable across runs
    and platforms. Empty text yields the zero vector.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    key = seed.to_bytes(8, "little", signed=True)
    vec = np.zeros(dim, dtype=np.float64)
    for token in _TOKEN_RE.findall(text):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                                 key=key).digest()
        h = int.from_bytes(digest, "little")
        bucket = h % dim
        sign = 1.0 if (h >> 60) & 1 else -1.0
        vec[bucket] += sign
    return vec


def email_text(e: CleanEmail, limit: int = INPUT_CHAR_LIMIT) -> str:
    """Concatenate subject, sender and body with single spaces.

    Body sits last, so cutting the tail keeps the head of the email when
    the provider input limit forces truncation.
    """
    text = f"{e.subject} {e.sender} {e.body}"
    return text if len(text) <= limit else text[:limit]


class HashEmbeddingProvider:
    """Offline deterministic provider backed by hash_embed."""

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.name = f"hash-{dim}-{seed}"
        self.dim = dim
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        return hash_embed(text, self.dim, self.seed)


class RemoteEmbeddingProvider:
    """JSON-over-HTTP embedding client.

    Request {"input": [text], "model": name}, response
    {"data": [{"embedding": [...]}]} — the de facto embedding-API shape.
    Credentials come from the environment, never from flags.
    """

    def __init__(self, base_url: str | None = None, api_key: str | None = None,
                 model: str | None = None, dim: int = DEFAULT_DIM,
                 timeout: float = 30.0, max_in_flight: int = 4,
                 session: requests.Session | None = None):
        self.base_url = (base_url or os.environ.get("EMBED_BASE_URL", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("EMBED_API_KEY", "")
        self.model = model or os.environ.get("EMBED_MODEL", "")
        self.name = f"remote-{self.model or 'unset'}"
        self.dim = dim
        self.timeout = timeout
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(max_in_flight)

    def embed(self, text: str) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"input": [text], "model": self.model}
        last_err = None
        for attempt in range(1, 4):
            try:
                with self._gate:
                    resp = self._session.post(f"{self.base_url}/embeddings",
                                              json=payload, headers=headers,
                                              timeout=self.timeout)
                if resp.status_code >= 500:
                    last_err = f"HTTP {resp.status_code}"
                    time.sleep(min(2 ** (attempt - 1) * 0.5, 4.0))
                    continue
                resp.raise_for_status()
                data = resp.json()
                return np.asarray(data["data"][0]["embedding"], dtype=np.float64)
            except requests.RequestException as exc:
                last_err = str(exc)
                time.sleep(min(2 ** (attempt - 1) * 0.5, 4.0))
        raise ProviderUnavailable(
            f"embedding endpoint unreachable: {last_err}", attempts=3)


def embed_email(provider, e: CleanEmail) -> np.ndarray:
    """Embed one email through a provider; raw (pre-normalization) vector.

    Enforces the provider dimension contract.
    """
    vec = np.asarray(provider.embed(email_text(e)), dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != provider.dim:
        raise DimensionMismatch(
            f"provider {provider.name} returned shape {vec.shape}, "
            f"expected ({provider.dim},)")
    return vec


def provider_from_spec(spec: str, dim: int = DEFAULT_DIM, seed: int = 0):
    """Build a provider from a CLI-style spec: "hash" or "remote"."""
    if spec == "hash":
        return HashEmbeddingProvider(dim=dim, seed=seed)
    if spec == "remote":
        return RemoteEmbeddingProvider(dim=dim)
    raise ValueError(f"unknown embedding provider {spec!r}")
