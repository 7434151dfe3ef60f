"""End-to-end classification of one email.

Fixed stage order: embed the query, retrieve similar legitimate
history, fetch domain/URL reputation, build the prompt, complete
against the model backend, parse the verdict. Threat-intel failures
degrade to "reputation unavailable"; an unparseable model reply gets
one re-ask and then the fail-closed fallback.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from . import gateway
from .emailcore import CleanEmail, LABEL_LEGITIMATE
from .embedding import embed_email, l2_normalize
from .errors import (EmbeddingFailed, LlmExhausted, NoJsonFound,
                     PhishGuardError, SchemaViolation)
from .gateway import ChatRequest, ModelSpec, complete
from .index import VectorIndex
from .prompting import (DEFAULT_BUDGET_CHARS, PromptBundle, Verdict,
                        build_prompt, consistency_check, fallback_verdict,
                        parse_verdict)
from .threatintel import ReputationClient, ThreatReport, analyze_email, summarize_threat

logger = logging.getLogger(__name__)

STAGES = ("embed", "retrieve", "threat", "prompt", "complete", "parse")

REASK_SUFFIX = ("\n\nYour previous reply was not valid JSON. Respond again "
                "with ONLY the JSON object described above.\n")


@dataclass
class ClassifyOptions:
    rag: bool = True
    threat: bool = True
    k: int = 5
    exclude_self: bool = True
    budget_chars: Optional[int] = None  # None: derive from the model window
    threat_snippet_chars: int = 1200
    fallback_enabled: bool = True


@dataclass
class Engine:
    """Immutable bundle of the stage dependencies for one user profile."""
    provider: object
    index: VectorIndex
    context_store: dict[str, CleanEmail]
    backend: object
    model_spec: ModelSpec
    threat_client: Optional[ReputationClient] = None

    def budget_chars(self, options: "ClassifyOptions") -> int:
        if options.budget_chars is not None:
            return options.budget_chars
        window_chars = (self.model_spec.context_window_tokens
                        - gateway.DEFAULT_MAX_OUTPUT_TOKENS) * gateway.CHARS_PER_TOKEN
        return min(DEFAULT_BUDGET_CHARS, window_chars)


@dataclass
class ContextRef:
    email_id: str
    score: float
    rank: int

    def to_dict(self) -> dict:
        return {"email_id": self.email_id, "score": self.score,
                "rank": self.rank}


@dataclass
class ClassificationResult:
    email_id: str
    verdict: Verdict
    context_ids: list[ContextRef]
    threat_report: ThreatReport
    model_key: str
    rag_enabled: bool
    threat_enabled: bool
    fallback_used: bool
    warnings: list[str]
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {
            "email_id": self.email_id,
            "verdict": self.verdict.to_dict(),
            "context_ids": [c.to_dict() for c in self.context_ids],
            "threat_report": self.threat_report.to_dict(),
            "model_key": self.model_key,
            "rag_enabled": self.rag_enabled,
            "threat_enabled": self.threat_enabled,
            "fallback_used": self.fallback_used,
            "warnings": list(self.warnings),
        }
        if include_timings:
            d["timings"] = dict(self.timings)
        return d

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), sort_keys=True)


@dataclass
class BatchError:
    email_id: str
    error: str
    message: str

    def to_dict(self) -> dict:
        return {"email_id": self.email_id, "error": self.error,
                "message": self.message}


def index_corpus(provider, emails, only_label: Optional[str] = LABEL_LEGITIMATE,
                 dim: Optional[int] = None) -> tuple[VectorIndex, dict[str, CleanEmail]]:
    """Embed and index a corpus; by default only legitimate entries are
    admitted (pass only_label=None to admit all labels for ablation).

    Returns the frozen index plus the id -> email store used to render
    retrieved context.
    """
    idx = VectorIndex(dim or provider.dim)
    store: dict[str, CleanEmail] = {}
    for e in emails:
        if only_label is not None and e.label != only_label:
            continue
        vec = l2_normalize(embed_email(provider, e))
        idx.add(e.id, vec, label=e.label or LABEL_LEGITIMATE)
        store[e.id] = e
    idx.freeze()
    return idx, store


def _complete_and_parse(engine: Engine, bundle: PromptBundle,
                        options: ClassifyOptions
                        ) -> tuple[Verdict, bool, float, float]:
    """Completion with one re-ask on parse failure, then fail-closed.

    Returns (verdict, fallback_used, complete_seconds, parse_seconds).
    """
    complete_s = 0.0
    parse_s = 0.0
    prompts = (bundle.rendered, bundle.rendered + REASK_SUFFIX)
    last_error: Optional[Exception] = None
    for attempt, prompt in enumerate(prompts):
        req = ChatRequest(user_message=prompt,
                          system_message=bundle.system_message)
        t0 = time.perf_counter()
        try:
            raw = complete(engine.backend, req)
        except PhishGuardError as exc:
            complete_s += time.perf_counter() - t0
            last_error = exc
            break  # transport exhausted: re-asking would hit the same wall
        complete_s += time.perf_counter() - t0
        t1 = time.perf_counter()
        try:
            verdict = parse_verdict(raw)
            parse_s += time.perf_counter() - t1
            return verdict, False, complete_s, parse_s
        except (NoJsonFound, SchemaViolation) as exc:
            parse_s += time.perf_counter() - t1
            last_error = exc
            logger.warning("verdict parse failed (attempt %d): %s",
                           attempt + 1, exc)
    if not options.fallback_enabled:
        raise LlmExhausted(f"no usable verdict: {last_error}") from last_error
    logger.warning("failing closed after unusable model output: %s", last_error)
    return fallback_verdict(), True, complete_s, parse_s


def classify(engine: Engine, e: CleanEmail,
             options: Optional[ClassifyOptions] = None) -> ClassificationResult:
    """Run the six-stage pipeline for one email."""
    options = options or ClassifyOptions()
    timings = {stage: 0.0 for stage in STAGES}

    context_refs: list[ContextRef] = []
    context_emails: list[CleanEmail] = []
    if options.rag:
        t0 = time.perf_counter()
        try:
            query = l2_normalize(embed_email(engine.provider, e))
        except PhishGuardError as exc:
            raise EmbeddingFailed(f"query embedding failed: {exc}") from exc
        timings["embed"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        exclude = {e.id} if options.exclude_self else None
        hits = engine.index.search(query, options.k, exclude=exclude) \
            if len(engine.index) else []
        for hit in hits:
            context_refs.append(ContextRef(hit.email_id, hit.score, hit.rank))
            stored = engine.context_store.get(hit.email_id)
            if stored is not None:
                context_emails.append(stored)
        timings["retrieve"] = time.perf_counter() - t0

    threat_report = ThreatReport()
    threat_text = ""
    if options.threat and engine.threat_client is not None:
        t0 = time.perf_counter()
        threat_report = analyze_email(engine.threat_client, e)
        threat_text = summarize_threat(threat_report,
                                       options.threat_snippet_chars)
        timings["threat"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    bundle = build_prompt(e, context_emails, threat_text,
                          budget=engine.budget_chars(options))
    timings["prompt"] = time.perf_counter() - t0

    verdict, fallback_used, complete_s, parse_s = _complete_and_parse(
        engine, bundle, options)
    timings["complete"] = complete_s
    timings["parse"] = parse_s

    return ClassificationResult(
        email_id=e.id,
        verdict=verdict,
        context_ids=context_refs,
        threat_report=threat_report,
        model_key=engine.model_spec.key,
        rag_enabled=options.rag,
        threat_enabled=options.threat and engine.threat_client is not None,
        fallback_used=fallback_used,
        warnings=consistency_check(verdict),
        timings=timings,
    )


def classify_batch(engine: Engine, emails: list[CleanEmail],
                   options: Optional[ClassifyOptions] = None,
                   parallelism: int = 1):
    """Classify many emails; results in input order, one failure yields
    an error record rather than aborting the batch."""
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    options = options or ClassifyOptions()

    def one(e: CleanEmail):
        try:
            return classify(engine, e, options)
        except PhishGuardError as exc:
            return BatchError(email_id=e.id, error=type(exc).__name__,
                              message=str(exc))

    if parallelism == 1 or len(emails) <= 1:
        return [one(e) for e in emails]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, emails))
