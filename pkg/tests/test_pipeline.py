import json

import pytest

from phishguard.emailcore import CleanEmail
from phishguard.embedding import HashEmbeddingProvider
from phishguard.errors import EmbeddingFailed, LlmExhausted
from phishguard.gateway import ScriptedBackend, ScriptedRule, lookup
from phishguard.pipeline import (BatchError, ClassificationResult,
                                 ClassifyOptions, Engine, STAGES, classify,
                                 classify_batch, index_corpus)
from phishguard.threatintel import ReputationClient

PHISH_JSON = ('{"classification_decision":"phishing","phishing_score":9,'
              '"risk":"high","social_engineering_elements":["urgency"],'
              '"recommended_actions":["do not click"],'
              '"brief_reason":"known bad domain"}')
LEGIT_JSON = ('{"classification_decision":"legitimate","phishing_score":1,'
              '"risk":"low","social_engineering_elements":[],'
              '"recommended_actions":[],"brief_reason":"looks routine"}')

FIXTURES = {
    "evil.test": {"harmless": 1, "suspicious": 4, "malicious": 62,
                  "reputation": -50, "engines_total": 75},
    "corp.example": {"harmless": 70, "suspicious": 0, "malicious": 0,
                     "reputation": 20, "engines_total": 70},
}


def history(n=8):
    return [CleanEmail(id=f"hist-{i}", subject=f"status update {i}",
                       sender="team@corp.example",
                       body=f"weekly status update {i}: all services nominal "
                            "and deploys on schedule.",
                       label="legitimate")
            for i in range(n)]


def scripted():
    return ScriptedBackend([
        ScriptedRule(response=PHISH_JSON, contains="evil.test"),
        ScriptedRule(response=LEGIT_JSON, contains=None),
    ])


def make_engine(backend=None, with_threat=True, emails=None):
    provider = HashEmbeddingProvider(dim=384, seed=0)
    idx, store = index_corpus(provider, emails if emails is not None
                              else history())
    client = ReputationClient(fixtures=FIXTURES) if with_threat else None
    return Engine(provider=provider, index=idx, context_store=store,
                  backend=backend or scripted(),
                  model_spec=lookup("llama4-scout"), threat_client=client)


def benign_email():
    return CleanEmail(id="query-benign", subject="status update 99",
                      sender="team@corp.example",
                      body="weekly status update 99: all services nominal.")


def phishing_email():
    return CleanEmail(id="query-phish", subject="account locked",
                      sender="helpdesk@evil.test",
                      body="restore access at http://evil.test/login now.")


# --- classify ----------------------------------------------------------------------

def test_classify_benign_end_to_end():
    result = classify(make_engine(), benign_email())
    assert result.verdict.classification_decision == "legitimate"
    assert result.model_key == "llama4-scout"
    assert not result.fallback_used
    assert len(result.context_ids) == 5
    assert result.threat_report.verdicts


def test_classify_phishing_by_threat_block():
    # the evil.test marker reaches the prompt via the threat snippet
    result = classify(make_engine(), phishing_email())
    assert result.verdict.classification_decision == "phishing"


def test_ablation_mode_renders_placeholders():
    engine = make_engine()
    options = ClassifyOptions(rag=False, threat=False)
    result = classify(engine, benign_email(), options)
    assert result.context_ids == []
    assert not result.rag_enabled
    assert not result.threat_enabled
    assert result.threat_report.verdicts == []


def test_exclude_self_keeps_query_out_of_context():
    emails = history()
    engine = make_engine(emails=emails)
    query = emails[0]  # indexed email classifies itself
    result = classify(engine, query,
                      ClassifyOptions(exclude_self=True))
    assert query.id not in [c.email_id for c in result.context_ids]
    included = classify(engine, query, ClassifyOptions(exclude_self=False))
    assert included.context_ids[0].email_id == query.id


def test_stage_timings_order():
    result = classify(make_engine(), benign_email())
    assert tuple(result.timings.keys()) == STAGES


def test_classify_deterministic_json():
    engine = make_engine()
    options = ClassifyOptions()
    first = classify(engine, benign_email(), options)
    second = classify(engine, benign_email(), options)
    assert first.to_json() == second.to_json()


def test_rag_toggle_changes_only_context(monkeypatch):
    """Differential: rag on/off must differ only in the context block."""
    from phishguard import pipeline as pipeline_mod
    captured = []
    real_build = pipeline_mod.build_prompt

    def spy(e, context, threat, budget):
        bundle = real_build(e, context, threat, budget=budget)
        captured.append(bundle)
        return bundle

    monkeypatch.setattr(pipeline_mod, "build_prompt", spy)
    engine = make_engine()
    classify(engine, benign_email(), ClassifyOptions(rag=True))
    classify(engine, benign_email(), ClassifyOptions(rag=False))
    with_rag, without_rag = captured
    assert with_rag.context_block != without_rag.context_block
    assert with_rag.role_block == without_rag.role_block
    assert with_rag.email_block == without_rag.email_block
    assert with_rag.threat_block == without_rag.threat_block
    assert with_rag.output_spec_block == without_rag.output_spec_block


def test_empty_index_with_rag_is_not_an_error():
    engine = make_engine(emails=[])
    result = classify(engine, benign_email(), ClassifyOptions(rag=True))
    assert result.context_ids == []
    assert result.verdict.classification_decision == "legitimate"


def test_embedding_failure_raises():
    engine = make_engine()
    no_tokens = CleanEmail(id="weird", subject="", sender="@",
                           body="!!! ---")
    with pytest.raises(EmbeddingFailed):
        classify(engine, no_tokens)


def test_unparseable_output_falls_back_after_reask():
    backend = ScriptedBackend([ScriptedRule(response="not json at all",
                                            contains=None)])
    engine = make_engine(backend=backend)
    result = classify(engine, benign_email())
    assert result.fallback_used
    assert result.verdict.classification_decision == "phishing"
    assert result.verdict.phishing_score == 5
    assert backend.calls == 2  # original ask + one re-ask


def test_reask_can_rescue_parse():
    class SecondTimeLucky:
        kind = "flaky-json"

        def __init__(self):
            self.calls = 0

        def send(self, req):
            self.calls += 1
            return "garbage" if self.calls == 1 else LEGIT_JSON

    backend = SecondTimeLucky()
    engine = make_engine(backend=backend)
    result = classify(engine, benign_email())
    assert not result.fallback_used
    assert result.verdict.classification_decision == "legitimate"
    assert backend.calls == 2


def test_fallback_disabled_raises():
    backend = ScriptedBackend([ScriptedRule(response="garbage", contains=None)])
    engine = make_engine(backend=backend)
    with pytest.raises(LlmExhausted):
        classify(engine, benign_email(),
                 ClassifyOptions(fallback_enabled=False))


def test_threat_failure_degrades_gracefully():
    class DownClient(ReputationClient):
        def lookup(self, elem):
            from phishguard.errors import NetworkError
            raise NetworkError("service down")

    provider = HashEmbeddingProvider(dim=384, seed=0)
    idx, store = index_corpus(provider, history())
    engine = Engine(provider=provider, index=idx, context_store=store,
                    backend=scripted(), model_spec=lookup("llama4-scout"),
                    threat_client=DownClient(fixtures={}))
    result = classify(engine, benign_email())
    assert result.threat_report.errors
    assert result.verdict.classification_decision == "legitimate"


# --- batch ---------------------------------------------------------------------------

def test_batch_preserves_order_and_isolates_errors():
    engine = make_engine()
    emails = [benign_email(), CleanEmail(id="bad", subject="", sender="@",
                                         body="..."), phishing_email()]
    results = classify_batch(engine, emails, parallelism=1)
    assert len(results) == 3
    assert isinstance(results[0], ClassificationResult)
    assert isinstance(results[1], BatchError)
    assert results[1].error == "EmbeddingFailed"
    assert isinstance(results[2], ClassificationResult)
    assert [r.email_id for r in results] == ["query-benign", "bad",
                                             "query-phish"]


def test_batch_parallelism_equivalence():
    engine = make_engine()
    emails = [CleanEmail(id=f"q{i}", subject=f"note {i}",
                         sender="team@corp.example",
                         body=f"routine note {i} about the roadmap.")
              for i in range(10)]
    sequential = classify_batch(engine, emails, parallelism=1)
    parallel = classify_batch(engine, emails, parallelism=4)
    assert [r.to_json() for r in sequential] == \
        [r.to_json() for r in parallel]


def test_batch_empty():
    assert classify_batch(make_engine(), []) == []
