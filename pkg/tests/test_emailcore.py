import json
import random
import string

import pytest
from hypothesis import given, strategies as st

from phishguard import emailcore
from phishguard.emailcore import (CleanEmail, RawEmail, anonymize_sender,
                                  decode_message, decode_with_fallback,
                                  dedup_key, extract_features, html_to_text,
                                  normalize_text, preprocess_corpus,
                                  preprocess_records, prune_body,
                                  validate_sender)
from phishguard.errors import MissingSender, NoAtSign


# --- decode ------------------------------------------------------------------

def test_decode_valid_utf8():
    assert decode_with_fallback("Invoice attached".encode()) == "Invoice attached"


def test_decode_invalid_utf8_falls_back_to_latin1():
    assert decode_with_fallback(b"\xe9") == "é"


def test_decode_empty():
    assert decode_with_fallback(b"") == ""


# --- extraction --------------------------------------------------------------

def _msg(raw: bytes):
    return decode_message(raw)


def test_extract_direct_fields():
    raw = b"From: a@b.co\nSubject: Hi\n\nhello\n"
    subject, sender, body = extract_features(_msg(raw))
    assert (subject, sender, body.strip()) == ("Hi", "a@b.co", "hello")


def test_extract_html_only_body():
    raw = (b"From: a@b.co\nSubject: x\n"
           b"Content-Type: text/html\n\n<p>Pay&nbsp;now</p>\n")
    _, _, body = extract_features(_msg(raw))
    assert body.strip() == "Pay now"


def test_extract_missing_sender():
    with pytest.raises(MissingSender):
        extract_features(_msg(b"Subject: orphan\n\nno sender\n"))


def test_extract_prefers_plain_over_html(eml_dir):
    decoded = _msg((eml_dir / "06_multipart_alternative.eml").read_bytes())
    _, _, body = extract_features(decoded)
    assert "3pm" in body
    assert "<p>" not in body


def test_extract_ignores_attachment(eml_dir):
    decoded = _msg((eml_dir / "07_attachment.eml").read_bytes())
    _, _, body = extract_features(decoded)
    assert "PDF" in body
    assert "JVBERi" not in body  # base64 of %PDF


def test_html_to_text_drops_script_and_style():
    text = html_to_text("<style>p{}</style><p>A &amp; B</p>"
                        "<script>alert(1)</script><br>C")
    assert "alert" not in text
    assert "p{}" not in text
    assert "A & B" in text and "C" in text


def test_prune_body_quotes_and_signature():
    body = "Reply text.\n> quoted line\nMore.\n-- \nSig\nCorp"
    assert prune_body(body) == "Reply text.\nMore."


# --- normalization -----------------------------------------------------------

def test_normalize_whitespace_and_case():
    assert normalize_text("Hello   World\r\n") == "hello world"


def test_normalize_drops_non_ascii_after_nfc():
    assert normalize_text("Café ☕ open") == "caf open"
    # decomposed e + combining acute folds to the same output under NFC
    assert normalize_text("Café ☕ open") == "caf open"


def test_normalize_strips_embedded_transport_headers():
    body = ("Received: from relay by mx\nX-Tracker: 1\n\n"
            "actual content here")
    assert normalize_text(body) == "actual content here"


def test_normalize_keeps_non_header_colons():
    assert normalize_text("re: the plan\nnote: bring slides") == \
        "re: the plan note: bring slides"


def test_normalize_idempotent_random_strings():
    rng = random.Random(1234)
    alphabet = string.printable + "éß世☕ "
    for _ in range(1000):
        s = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 80)))
        once = normalize_text(s)
        assert normalize_text(once) == once


@given(st.text(max_size=200))
def test_normalize_idempotent_and_ascii(s):
    once = normalize_text(s)
    assert normalize_text(once) == once
    once.encode("ascii")  # must not raise


# --- validation / dedup / anonymization ---------------------------------------

@pytest.mark.parametrize("sender,expected", [
    ("alice@example.com", True),
    ("no-reply example.com", False),
    ("@", True),
    ("", False),
])
def test_validate_sender_truth_table(sender, expected):
    assert validate_sender(sender) is expected


def test_dedup_key_deterministic(sample_email):
    clone = CleanEmail(**{**sample_email.to_dict()})
    assert dedup_key(sample_email) == dedup_key(clone)


def test_dedup_key_sender_sensitivity(sample_email):
    other = CleanEmail(id="x", subject=sample_email.subject,
                       sender="mallory@example.com", body=sample_email.body)
    assert dedup_key(sample_email) != dedup_key(other)


def test_dedup_key_ignores_whitespace_runs(sample_email):
    spaced = CleanEmail(id="y", subject=sample_email.subject,
                        sender=sample_email.sender,
                        body=sample_email.body.replace(" ", "   "))
    assert dedup_key(sample_email) == dedup_key(spaced)


def test_anonymize_sender():
    assert anonymize_sender("alice.smith@uni.edu") == "user@uni.edu"
    assert anonymize_sender("user@uni.edu") == "user@uni.edu"
    with pytest.raises(NoAtSign):
        anonymize_sender("plainstring")


def test_anonymize_display_name_form():
    assert anonymize_sender("alice smith <alice.smith@example.com>") == \
        "alice smith <user@example.com>"


# --- corpus pipeline -----------------------------------------------------------

def _raw(source_id, sender=b"a@b.co", subject=b"s", body=b"content"):
    data = b"From: %s\nSubject: %s\n\n%s\n" % (sender, subject, body)
    return RawEmail(data=data, source_id=source_id)


def test_preprocess_drops_invalid_sender():
    raws = [_raw("one"), RawEmail(b"From: noatsign\nSubject: s\n\nbody\n", "two"),
            _raw("three", body=b"other content")]
    emails, report = preprocess_corpus(raws)
    assert [e.id for e in emails] == ["one", "three"]
    assert report.to_dict() == {"input": 3, "kept": 2, "dropped_invalid": 1,
                                "dropped_empty": 0, "dropped_duplicate": 0}


def test_preprocess_dedup_keeps_first():
    raws = [_raw("first"), _raw("second"), _raw("third", body=b"unique")]
    emails, report = preprocess_corpus(raws)
    assert [e.id for e in emails] == ["first", "third"]
    assert report.dropped_duplicate == 1


def test_preprocess_drops_empty_body():
    raws = [_raw("kept"), _raw("empty", body=b"   \n  ")]
    _, report = preprocess_corpus(raws)
    assert report.dropped_empty == 1


def test_preprocess_records_path():
    records = [
        {"id": "r1", "subject": "S", "sender": "a@b.co", "body": "Hello  there"},
        {"id": "r2", "sender": "nope", "body": "x"},
        {"id": "r3", "subject": "S", "sender": "a@b.co", "body": "Hello there"},
        {"id": "r4", "sender": "a@b.co", "body": "Hello there"},
    ]
    emails, report = preprocess_records(records)
    # r2 invalid; r3 dedups against r1 (whitespace runs collapse);
    # r4 survives because its subject differs.
    assert [e.id for e in emails] == ["r1", "r4"]
    assert report.dropped_invalid == 1
    assert report.dropped_duplicate == 1


def test_golden_fixture_ingestion(eml_dir, golden_corpus_path):
    files = sorted(eml_dir.glob("*.eml"))
    assert len(files) == 20
    raws = [RawEmail(p.read_bytes(), p.stem) for p in files]
    emails, report = preprocess_corpus(raws)
    assert report.to_dict() == {"input": 20, "kept": 20, "dropped_invalid": 0,
                                "dropped_empty": 0, "dropped_duplicate": 0}
    golden = [json.loads(line) for line in
              golden_corpus_path.read_text().splitlines()]
    assert [e.to_dict() for e in emails] == golden


def test_preprocess_deterministic(eml_dir):
    raws = [RawEmail(p.read_bytes(), p.stem)
            for p in sorted(eml_dir.glob("*.eml"))]
    first = preprocess_corpus(raws)
    second = preprocess_corpus(raws)
    assert [e.to_dict() for e in first[0]] == [e.to_dict() for e in second[0]]
    assert first[1].to_dict() == second[1].to_dict()


def test_pipeline_stage_order(monkeypatch):
    calls = []

    def tracer(name, fn):
        def wrapped(*args, **kwargs):
            calls.append(name)
            return fn(*args, **kwargs)
        return wrapped

    monkeypatch.setattr(emailcore, "decode_message",
                        tracer("decode", decode_message))
    monkeypatch.setattr(emailcore, "extract_features",
                        tracer("structure", extract_features))
    monkeypatch.setattr(emailcore, "normalize_text",
                        tracer("normalize", normalize_text))
    monkeypatch.setattr(emailcore, "validate_sender",
                        tracer("validate", validate_sender))

    preprocess_corpus([_raw("trace-me")])
    order = [calls.index(stage)
             for stage in ("decode", "structure", "normalize", "validate")]
    assert order == sorted(order)
    assert all(stage in calls
               for stage in ("decode", "structure", "normalize", "validate"))


@given(st.builds(
    dict,
    subject=st.text(max_size=60),
    sender=st.text(max_size=60),
    body=st.text(max_size=200),
))
def test_clean_email_invariants(record):
    record = {"id": "prop", **record}
    emails, _ = preprocess_records([record])
    for e in emails:
        assert "@" in e.sender
        assert e.body
        for value in (e.subject, e.sender, e.body):
            value.encode("ascii")
            assert normalize_text(value) == value
