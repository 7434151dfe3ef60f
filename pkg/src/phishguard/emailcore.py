"""Email preprocessing: decode, structure, normalize, validate.

Turns raw messages (RFC-822/MIME bytes or flat JSONL records) into the
canonical three-field form (subject, sender, body) used by every
downstream stage. The corpus pipeline additionally deduplicates by a
content hash and can anonymize sender local parts for storage.
"""
from __future__ import annotations

import email
import email.header
import email.message
import hashlib
import html.parser
import json
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .errors import MissingSender, NoAtSign

# Decoders tried in order; latin-1 maps every byte so the chain is total.
# iso-8859-1 is an alias of latin-1 in Python but is kept for explicitness.
DECODE_CHAIN = ("utf-8", "latin-1", "iso-8859-1")

LABEL_LEGITIMATE = "legitimate"
LABEL_PHISHING = "phishing"

# Transport/envelope header keys stripped when they leak into body text.
# Matched case-insensitively against leading "Key: value" lines only.
_TRANSPORT_HEADER_KEYS = frozenset({
    "received", "return-path", "delivered-to", "envelope-to",
    "content-type", "content-transfer-encoding", "mime-version",
    "message-id", "in-reply-to", "references",
    "dkim-signature", "domainkey-signature", "authentication-results",
    "received-spf", "arc-seal", "arc-message-signature",
    "arc-authentication-results", "list-unsubscribe", "list-id",
    "precedence", "from", "to", "cc", "bcc", "subject", "sender",
    "reply-to", "date",
})

_HEADER_LINE_RE = re.compile(r"^([A-Za-z][A-Za-z0-9-]*):\s")
_WS_RE = re.compile(r"\s+")
_SIGNATURE_DELIMITER = "-- "
_ADDR_RE = re.compile(r"[^\s<>,;@]+@[^\s<>,;@]+")


@dataclass(frozen=True)
class RawEmail:
    """An undecoded message plus a stable identifier (file path, UID, ...)."""
    data: bytes
    source_id: str


@dataclass
class DecodedMessage:
    """Message after the decode stage: headers and text parts as str."""
    subject: Optional[str]
    sender: Optional[str]
    plain_parts: list[str] = field(default_factory=list)
    html_parts: list[str] = field(default_factory=list)


@dataclass
class CleanEmail:
    """Validated (subject, sender, body) triple; label present for corpus emails."""
    id: str
    subject: str
    sender: str
    body: str
    label: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "subject": self.subject,
             "sender": self.sender, "body": self.body}
        if self.label is not None:
            d["label"] = self.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CleanEmail":
        return cls(id=str(d["id"]), subject=d.get("subject", ""),
                   sender=d["sender"], body=d["body"], label=d.get("label"))


@dataclass
class IngestionReport:
    input: int = 0
    kept: int = 0
    dropped_invalid: int = 0
    dropped_empty: int = 0
    dropped_duplicate: int = 0

    def to_dict(self) -> dict:
        return {"input": self.input, "kept": self.kept,
                "dropped_invalid": self.dropped_invalid,
                "dropped_empty": self.dropped_empty,
                "dropped_duplicate": self.dropped_duplicate}


def decode_with_fallback(data: bytes) -> str:
    """Decode bytes with the first codec in DECODE_CHAIN that accepts them.

    Total by construction: latin-1 decodes every byte sequence. Empty
    input returns the empty string.
    """
    for codec in DECODE_CHAIN:
        try:
            return data.decode(codec)
        except UnicodeDecodeError:
            continue
    # Unreachable: latin-1 never fails. Kept as a defensive last resort.
    return data.decode("latin-1", errors="replace")


class _HtmlTextExtractor(html.parser.HTMLParser):
    """Tag stripper: entities unescaped, <br> and block tags become
    newlines, <script>/<style> subtrees dropped."""

    _BLOCK_TAGS = {"p", "div", "tr", "li", "h1", "h2", "h3", "h4", "h5",
                   "h6", "table", "ul", "ol", "blockquote"}
    _SKIP_TAGS = {"script", "style"}

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self._chunks: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP_TAGS:
            self._skip_depth += 1
        elif tag == "br" or tag in self._BLOCK_TAGS:
            self._chunks.append("\n")

    def handle_endtag(self, tag):
        if tag in self._SKIP_TAGS and self._skip_depth > 0:
            self._skip_depth -= 1
        elif tag in self._BLOCK_TAGS:
            self._chunks.append("\n")

    def handle_data(self, data):
        if self._skip_depth == 0:
            self._chunks.append(data)

    def text(self) -> str:
        return "".join(self._chunks)


def html_to_text(markup: str) -> str:
    """Convert an HTML body to plain text; &nbsp; becomes a plain space."""
    extractor = _HtmlTextExtractor()
    extractor.feed(markup)
    extractor.close()
    return extractor.text().replace("\xa0", " ")


def _decode_header_value(value) -> str:
    """Decode a possibly RFC2047-encoded header to text."""
    if value is None:
        return ""
    if not isinstance(value, str):
        value = str(value)
    try:
        parts = email.header.decode_header(value)
    except Exception:
        return value
    out = []
    for text, charset in parts:
        if isinstance(text, bytes):
            if charset:
                try:
                    out.append(text.decode(charset, errors="replace"))
                    continue
                except LookupError:
                    pass
            out.append(decode_with_fallback(text))
        else:
            out.append(text)
    return "".join(out)


def _decode_part(part: email.message.Message) -> str:
    """Decode one MIME part payload, declared charset first, then the chain."""
    payload = part.get_payload(decode=True)
    if payload is None:
        payload = b""
    charset = part.get_content_charset()
    if charset:
        try:
            return payload.decode(charset, errors="replace")
        except LookupError:
            pass
    return decode_with_fallback(payload)


def decode_message(data: bytes) -> DecodedMessage:
    """Decode stage: parse MIME structure and decode headers and every
    non-attachment text part to str. Attachments are ignored."""
    msg = email.message_from_bytes(data)
    subject = _decode_header_value(msg.get("Subject")) if msg.get("Subject") is not None else None
    sender = _decode_header_value(msg.get("From")) if msg.get("From") is not None else None
    decoded = DecodedMessage(subject=subject, sender=sender)
    for part in msg.walk():
        if part.is_multipart():
            continue
        disposition = str(part.get("Content-Disposition", "")).lower()
        if disposition.startswith("attachment"):
            continue
        ctype = part.get_content_type()
        if ctype == "text/plain":
            decoded.plain_parts.append(_decode_part(part))
        elif ctype == "text/html":
            decoded.html_parts.append(_decode_part(part))
    return decoded


def prune_body(text: str) -> str:
    """Heuristic reply/footer pruning: drop quoted lines (leading '>')
    and everything after a '-- ' signature delimiter line."""
    kept = []
    for line in text.splitlines():
        if line.rstrip("\r") == _SIGNATURE_DELIMITER or line.rstrip() == "--":
            break
        if line.lstrip().startswith(">"):
            continue
        kept.append(line)
    return "\n".join(kept)


def extract_features(msg: DecodedMessage) -> tuple[str, str, str]:
    """Structure stage: select (subject, sender, body) from a decoded
    message.

    Body is the concatenation of text/plain parts; if none exist, the
    first text/html part converted to plain text. Raises MissingSender
    when there is no From header.
    """
    if msg.sender is None:
        raise MissingSender("message has no From header")
    if msg.plain_parts:
        body = "\n".join(msg.plain_parts)
    elif msg.html_parts:
        body = html_to_text(msg.html_parts[0])
    else:
        body = ""
    return msg.subject or "", msg.sender, prune_body(body)


def _strip_embedded_headers(text: str) -> str:
    """Drop leading transport-header lines (and their continuations)
    that leaked into body text."""
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        m = _HEADER_LINE_RE.match(lines[i])
        key = m.group(1).lower() if m else None
        if key and (key in _TRANSPORT_HEADER_KEYS or key.startswith("x-")):
            i += 1
            while i < len(lines) and lines[i][:1] in (" ", "\t"):
                i += 1
            continue
        break
    return "\n".join(lines[i:])


def normalize_text(text: str) -> str:
    """Canonical text form: embedded transport headers stripped, NFC
    folding, non-ASCII dropped, lowercased, whitespace runs collapsed.

    Idempotent, and the output is always pure ASCII.
    """
    text = _strip_embedded_headers(text)
    text = unicodedata.normalize("NFC", text)
    # Collapse before the ASCII strip so unicode spaces (nbsp etc.)
    # become plain separators instead of silently vanishing.
    text = _WS_RE.sub(" ", text)
    text = text.encode("ascii", errors="ignore").decode("ascii")
    text = text.lower()
    return _WS_RE.sub(" ", text).strip()


def validate_sender(sender: str) -> bool:
    """The validity rule is literal membership of '@'."""
    return "@" in sender


def dedup_key(e: CleanEmail) -> str:
    """128-bit content digest over (normalized body, subject, sender)."""
    material = "\x1f".join((normalize_text(e.body), e.subject, e.sender))
    return hashlib.sha256(material.encode("utf-8")).hexdigest()[:32]


def anonymize_sender(sender: str) -> str:
    """Replace the local part of each address with 'user'; domains kept."""
    if "@" not in sender:
        raise NoAtSign(f"cannot anonymize {sender!r}: no '@'")
    return _ADDR_RE.sub(lambda m: "user@" + m.group(0).rsplit("@", 1)[1], sender)


def clean_record(record_id: str, subject: str, sender: str, body: str,
                 label: Optional[str] = None) -> Optional[CleanEmail]:
    """Normalize + validate one structured record.

    Returns None when the sender fails validation. Empty-body records
    are returned so the caller can count them separately.
    """
    cleaned = CleanEmail(
        id=record_id,
        subject=normalize_text(subject),
        sender=normalize_text(sender),
        body=normalize_text(body),
        label=label,
    )
    if not validate_sender(cleaned.sender):
        return None
    return cleaned


def preprocess_corpus(raws: Iterable[RawEmail],
                      labels: Optional[dict[str, str]] = None,
                      ) -> tuple[list[CleanEmail], IngestionReport]:
    """Full corpus pipeline: decode, structure, normalize, validate,
    then drop empty bodies and duplicates (keep first occurrence).

    Survivor order equals input order. Drops are counted, never raised.
    """
    report = IngestionReport()
    kept: list[CleanEmail] = []
    seen: set[str] = set()
    for raw in raws:
        report.input += 1
        try:
            decoded = decode_message(raw.data)
            subject, sender, body = extract_features(decoded)
        except Exception:
            report.dropped_invalid += 1
            continue
        label = labels.get(raw.source_id) if labels else None
        cleaned = clean_record(raw.source_id, subject, sender, body, label)
        if cleaned is None:
            report.dropped_invalid += 1
            continue
        if not cleaned.body:
            report.dropped_empty += 1
            continue
        key = dedup_key(cleaned)
        if key in seen:
            report.dropped_duplicate += 1
            continue
        seen.add(key)
        kept.append(cleaned)
    report.kept = len(kept)
    return kept, report


def preprocess_records(records: Iterable[dict],
                       ) -> tuple[list[CleanEmail], IngestionReport]:
    """Same pipeline for already-structured JSONL records."""
    report = IngestionReport()
    kept: list[CleanEmail] = []
    seen: set[str] = set()
    for i, rec in enumerate(records):
        report.input += 1
        record_id = str(rec.get("id", f"rec-{i}"))
        sender = rec.get("sender")
        body = rec.get("body")
        if sender is None or body is None:
            report.dropped_invalid += 1
            continue
        cleaned = clean_record(record_id, rec.get("subject", ""), sender,
                               body, rec.get("label"))
        if cleaned is None:
            report.dropped_invalid += 1
            continue
        if not cleaned.body:
            report.dropped_empty += 1
            continue
        key = dedup_key(cleaned)
        if key in seen:
            report.dropped_duplicate += 1
            continue
        seen.add(key)
        kept.append(cleaned)
    report.kept = len(kept)
    return kept, report


def anonymize_corpus(emails: Iterable[CleanEmail]) -> list[CleanEmail]:
    """Corpus-storage anonymization; never applied to live queries."""
    out = []
    for e in emails:
        out.append(CleanEmail(id=e.id, subject=e.subject,
                              sender=anonymize_sender(e.sender),
                              body=e.body, label=e.label))
    return out


def load_corpus_jsonl(path) -> list[CleanEmail]:
    emails = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                emails.append(CleanEmail.from_dict(json.loads(line)))
    return emails


def save_corpus_jsonl(path, emails: Iterable[CleanEmail]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in emails:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
