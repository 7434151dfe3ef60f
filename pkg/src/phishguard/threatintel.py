"""Domain/URL reputation evidence.

Extracts the sender domain and body URLs from an email, queries a
VirusTotal-v3-compatible service (or a JSON fixture file for fully
offline runs), and folds the per-engine verdict counts into a compact
snippet for the classification prompt.

Failed lookups never block classification: they land in the report's
error list and render as "reputation unavailable".
"""
from __future__ import annotations

import base64
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import requests

from .emailcore import CleanEmail
from .errors import NetworkError, NoAtSign, PhishGuardError, RateLimited

logger = logging.getLogger(__name__)

DEFAULT_VT_BASE_URL = "https://www.virustotal.com/api/v3"
DEFAULT_CACHE_TTL = 24 * 3600.0
DEFAULT_RATE_PER_MINUTE = 4.0

_URL_RE = re.compile(r"https?://[^\s<>\"']+", re.IGNORECASE)
_TRAILING_PUNCT = ".,;:!?"


@dataclass(frozen=True)
class ThreatElement:
    value: str
    kind: str  # "domain" | "url"


@dataclass
class ElementVerdict:
    element: ThreatElement
    harmless: int = 0
    suspicious: int = 0
    malicious: int = 0
    reputation: int = 0
    engines_total: int = 0
    fetched_at: float = 0.0
    found: bool = True

    def to_dict(self) -> dict:
        return {"value": self.element.value, "kind": self.element.kind,
                "harmless": self.harmless, "suspicious": self.suspicious,
                "malicious": self.malicious, "reputation": self.reputation,
                "engines_total": self.engines_total,
                "fetched_at": self.fetched_at, "found": self.found}


@dataclass
class ThreatReport:
    verdicts: list[ElementVerdict] = field(default_factory=list)
    errors: list[tuple[ThreatElement, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"verdicts": [v.to_dict() for v in self.verdicts],
                "errors": [{"value": e.value, "kind": e.kind, "reason": r}
                           for e, r in self.errors]}


def extract_domain(sender: str) -> ThreatElement:
    """Domain after the last '@': lowercased, trailing dot stripped,
    angle brackets removed for "Name <addr>" senders."""
    if "@" not in sender:
        raise NoAtSign(f"no '@' in sender {sender!r}")
    m = re.search(r"<([^<>]*)>", sender)
    addr = m.group(1) if m and "@" in m.group(1) else sender
    domain = addr.rsplit("@", 1)[1]
    domain = domain.strip().strip("<>").rstrip(".").lower()
    return ThreatElement(value=domain, kind="domain")


def extract_urls(body: str) -> list[ThreatElement]:
    """http/https URLs in order of first appearance, trailing sentence
    punctuation stripped, duplicates removed."""
    seen: set[str] = set()
    out: list[ThreatElement] = []
    for m in _URL_RE.finditer(body):
        url = m.group(0).rstrip(_TRAILING_PUNCT)
        if url and url not in seen:
            seen.add(url)
            out.append(ThreatElement(value=url, kind="url"))
    return out


class _TokenBucket:
    """Serializes outbound lookups; default 4 requests/minute."""

    def __init__(self, rate_per_minute: float, clock=time.monotonic,
                 sleep=time.sleep):
        self.capacity = max(rate_per_minute, 1.0)
        self.rate = rate_per_minute / 60.0
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.updated = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity,
                                  self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


class ReputationClient:
    """Reputation lookups with caching and rate limiting.

    In fixture mode (a JSON object mapping element value -> verdict
    fields) no network is touched and fetched_at is pinned to 0.0 so
    results are fully deterministic. Live mode speaks the v3 wire
    protocol: GET /domains/{domain} and /urls/{base64-url-id}, consuming
    only last_analysis_stats and reputation.
    """

    def __init__(self, base_url: Optional[str] = None,
                 api_key: Optional[str] = None,
                 fixtures: Optional[dict] = None,
                 cache_ttl: float = DEFAULT_CACHE_TTL,
                 rate_per_minute: float = DEFAULT_RATE_PER_MINUTE,
                 cache_path=None,
                 session: Optional[requests.Session] = None,
                 timeout: float = 30.0,
                 clock=time.time):
        self.base_url = (base_url or os.environ.get("VT_BASE_URL",
                                                    DEFAULT_VT_BASE_URL)).rstrip("/")
        self.api_key = api_key or os.environ.get("VT_API_KEY", "")
        self.fixtures = dict(fixtures) if fixtures else None
        self.cache_ttl = cache_ttl
        self.cache_path = Path(cache_path) if cache_path else None
        self.timeout = timeout
        self.clock = clock
        self._session = session or requests.Session()
        self._bucket = _TokenBucket(rate_per_minute)
        self._cache: dict[str, tuple[float, dict]] = {}
        self._lock = threading.Lock()
        self.network_calls = 0
        if self.cache_path and self.cache_path.exists():
            try:
                self._cache = {k: tuple(v) for k, v in
                               json.loads(self.cache_path.read_text()).items()}
            except (OSError, ValueError):
                logger.warning("ignoring unreadable cache at %s", self.cache_path)

    @classmethod
    def from_fixture_file(cls, path, **kwargs) -> "ReputationClient":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(fixtures=json.load(fh), **kwargs)

    def lookup(self, elem: ThreatElement) -> ElementVerdict:
        """Aggregated verdict counts for one element, cache-first."""
        cached = self._cache_get(elem.value)
        if cached is not None:
            return self._verdict_from_fields(elem, cached)
        if self.fixtures is not None:
            fields = self.fixtures.get(elem.value)
            if fields is None:
                fields = {"found": False}
        else:
            fields = self._fetch_live(elem)
        self._cache_put(elem.value, fields)
        return self._verdict_from_fields(elem, fields)

    def _verdict_from_fields(self, elem: ThreatElement, fields: dict) -> ElementVerdict:
        found = bool(fields.get("found", True))
        stats_known = int(fields.get("harmless", 0)) + \
            int(fields.get("suspicious", 0)) + int(fields.get("malicious", 0))
        return ElementVerdict(
            element=elem,
            harmless=int(fields.get("harmless", 0)),
            suspicious=int(fields.get("suspicious", 0)),
            malicious=int(fields.get("malicious", 0)),
            reputation=int(fields.get("reputation", 0)),
            engines_total=int(fields.get("engines_total", stats_known)),
            fetched_at=float(fields.get("fetched_at", 0.0)),
            found=found,
        )

    def _cache_get(self, value: str) -> Optional[dict]:
        with self._lock:
            hit = self._cache.get(value)
            if hit is None:
                return None
            expires, fields = hit
            if self.clock() >= expires:
                del self._cache[value]
                return None
            return fields

    def _cache_put(self, value: str, fields: dict) -> None:
        with self._lock:
            self._cache[value] = (self.clock() + self.cache_ttl, fields)
            if self.cache_path:
                try:
                    self.cache_path.parent.mkdir(parents=True, exist_ok=True)
                    self.cache_path.write_text(json.dumps(self._cache))
                except OSError:
                    logger.warning("could not persist cache to %s", self.cache_path)

    def _fetch_live(self, elem: ThreatElement) -> dict:
        self._bucket.acquire()
        if elem.kind == "domain":
            url = f"{self.base_url}/domains/{elem.value}"
        else:
            url_id = base64.urlsafe_b64encode(
                elem.value.encode("utf-8")).decode("ascii").rstrip("=")
            url = f"{self.base_url}/urls/{url_id}"
        try:
            self.network_calls += 1
            resp = self._session.get(url, headers={"x-apikey": self.api_key},
                                     timeout=self.timeout)
        except requests.RequestException as exc:
            raise NetworkError(f"lookup of {elem.value!r} failed: {exc}") from exc
        if resp.status_code == 404:
            return {"found": False, "fetched_at": self.clock()}
        if resp.status_code == 429:
            retry_after = resp.headers.get("Retry-After")
            raise RateLimited(f"rate limited on {elem.value!r}",
                              retry_after=float(retry_after) if retry_after else None)
        if resp.status_code >= 400:
            raise NetworkError(
                f"lookup of {elem.value!r}: HTTP {resp.status_code}")
        attrs = resp.json().get("data", {}).get("attributes", {})
        stats = attrs.get("last_analysis_stats", {}) or {}
        return {
            "harmless": int(stats.get("harmless", 0)),
            "suspicious": int(stats.get("suspicious", 0)),
            "malicious": int(stats.get("malicious", 0)),
            "reputation": int(attrs.get("reputation", 0)),
            "engines_total": int(sum(stats.values())),
            "fetched_at": self.clock(),
            "found": True,
        }


def analyze_email(client: ReputationClient, e: CleanEmail) -> ThreatReport:
    """Extract sender domain + body URLs and look everything up.

    Every unique element lands in exactly one of verdicts or errors.
    """
    elements: list[ThreatElement] = []
    try:
        elements.append(extract_domain(e.sender))
    except NoAtSign:
        pass  # sender was validated upstream; purely defensive
    elements.extend(extract_urls(e.body))
    seen: set[ThreatElement] = set()
    report = ThreatReport()
    for elem in elements:
        if elem in seen:
            continue
        seen.add(elem)
        try:
            report.verdicts.append(client.lookup(elem))
        except PhishGuardError as exc:
            report.errors.append((elem, str(exc)))
    return report


def summarize_threat(report: ThreatReport, max_chars: int = 1200) -> str:
    """Deterministic line-per-element snippet for the prompt.

    Elements sort by descending malicious count then value; truncation
    happens at a line boundary with a "(+n more)" suffix, and a larger
    budget always extends the smaller budget's line set.
    """
    if not report.verdicts and not report.errors:
        return "no domains or urls analyzed"
    lines = [
        f"{v.element.kind} {v.element.value}: malicious={v.malicious} "
        f"suspicious={v.suspicious} harmless={v.harmless} "
        f"reputation={v.reputation} (of {v.engines_total} engines)"
        for v in sorted(report.verdicts,
                        key=lambda v: (-v.malicious, v.element.value))
    ]
    lines.extend(
        f"{e.kind} {e.value}: reputation unavailable"
        for e, _ in sorted(report.errors, key=lambda pair: pair[0].value)
    )
    for keep in range(len(lines), -1, -1):
        body = "\n".join(lines[:keep])
        if keep < len(lines):
            suffix = f"(+{len(lines) - keep} more)"
            body = f"{body}\n{suffix}" if body else suffix
        if len(body) <= max_chars:
            return body
    return ""
