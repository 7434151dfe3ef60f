"""Classification prompt assembly and structured verdict parsing.

The prompt is five blocks concatenated in a fixed order: role, query
email, retrieved legitimate-email context, reputation snippet, output
schema. Truncation under a character budget eats context email bodies
first (longest first), then the query body tail, and never touches the
role or output-spec blocks.
"""
from __future__ import annotations

import importlib.resources
import json
import re
from dataclasses import dataclass, field

from .emailcore import CleanEmail
from .errors import BudgetTooSmall, NoJsonFound, SchemaViolation

SYSTEM_MESSAGE = ("You are a cybersecurity expert specialized in phishing "
                  "detection. Always respond with a single JSON object "
                  "matching the requested schema.")

DECISIONS = ("legitimate", "phishing")
RISKS = ("low", "medium", "high")

# Per-retrieved-email body excerpt cap before budget pressure kicks in.
CONTEXT_EXCERPT_CHARS = 500
# 6000 tokens approximated at 4 chars/token; models may override.
DEFAULT_BUDGET_CHARS = 24000

CONTEXT_HEADING = "Known legitimate emails for this user:"
EMPTY_PLACEHOLDER = "none available"

TEMPLATE_VERSION = "v1"
_SLOT_SEQUENCE = "{email}{context}{threat}"


def load_template(version: str = TEMPLATE_VERSION) -> tuple[str, str]:
    """Load a versioned prompt template resource.

    A template is fixed role text, the literal slot run
    "{email}{context}{threat}", then fixed output-spec text. Returns
    (role_block, output_spec_block).
    """
    text = (importlib.resources.files("phishguard")
            .joinpath(f"templates/prompt_{version}.txt").read_text("utf-8"))
    if text.count(_SLOT_SEQUENCE) != 1:
        raise ValueError(
            f"template {version}: expected exactly one {_SLOT_SEQUENCE!r} run")
    role, output_spec = text.split(_SLOT_SEQUENCE)
    return role, output_spec


ROLE_BLOCK, OUTPUT_SPEC_BLOCK = load_template()

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)
_INT_STRING_RE = re.compile(r"^[+-]?\d+$")


@dataclass
class Verdict:
    classification_decision: str
    phishing_score: int
    risk: str
    social_engineering_elements: list[str]
    recommended_actions: list[str]
    brief_reason: str

    def to_dict(self) -> dict:
        return {"classification_decision": self.classification_decision,
                "phishing_score": self.phishing_score,
                "risk": self.risk,
                "social_engineering_elements": list(self.social_engineering_elements),
                "recommended_actions": list(self.recommended_actions),
                "brief_reason": self.brief_reason}


def render_verdict(v: Verdict) -> str:
    """Canonical JSON rendering; parse_verdict inverts it exactly."""
    return json.dumps(v.to_dict(), sort_keys=True)


@dataclass
class PromptBundle:
    role_block: str
    email_block: str
    context_block: str
    threat_block: str
    output_spec_block: str
    rendered: str
    system_message: str = SYSTEM_MESSAGE

    @property
    def blocks(self) -> tuple[str, str, str, str, str]:
        return (self.role_block, self.email_block, self.context_block,
                self.threat_block, self.output_spec_block)


def _email_block(e: CleanEmail, body: str) -> str:
    return (f"Email to classify:\n"
            f"Subject: {e.subject}\n"
            f"Sender: {e.sender}\n"
            f"Body:\n{body}\n\n")


def _context_block(context: list[CleanEmail], excerpt_cap: int) -> str:
    if not context:
        return f"{CONTEXT_HEADING}\n{EMPTY_PLACEHOLDER}\n\n"
    parts = [CONTEXT_HEADING]
    for i, c in enumerate(context, start=1):
        parts.append(f"{i}. Subject: {c.subject} | Sender: {c.sender}")
        parts.append(f"   {c.body[:excerpt_cap]}")
    return "\n".join(parts) + "\n\n"


def _threat_block(threat: str) -> str:
    content = threat.strip() if threat and threat.strip() else EMPTY_PLACEHOLDER
    return f"Domain and URL reputation:\n{content}\n\n"


def build_prompt(e: CleanEmail, context: list[CleanEmail], threat: str,
                 budget: int = DEFAULT_BUDGET_CHARS) -> PromptBundle:
    """Assemble the five prompt blocks under a character budget.

    Raises BudgetTooSmall when the blocks cannot fit even with all
    context excerpts and the query body reduced to nothing.
    """
    def render(excerpt_cap: int, body: str) -> tuple[str, ...]:
        blocks = (ROLE_BLOCK, _email_block(e, body),
                  _context_block(context, excerpt_cap),
                  _threat_block(threat), OUTPUT_SPEC_BLOCK)
        return blocks

    def total(blocks) -> int:
        return sum(len(b) for b in blocks)

    blocks = render(CONTEXT_EXCERPT_CHARS, e.body)
    if total(blocks) > budget:
        # Shrink context excerpts first: a uniform cap cuts the longest
        # bodies first. Binary search the largest cap that fits.
        lo, hi = 0, CONTEXT_EXCERPT_CHARS
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if total(render(mid, e.body)) <= budget:
                lo = mid
            else:
                hi = mid - 1
        blocks = render(lo, e.body)
        overflow = total(blocks) - budget
        if overflow > 0:
            # Then trim the query body tail by exactly the overflow.
            keep = len(e.body) - overflow
            if keep < 0:
                raise BudgetTooSmall(
                    f"fixed prompt blocks need {total(render(0, ''))} chars, "
                    f"budget is {budget}")
            blocks = render(lo, e.body[:keep])

    rendered = "".join(blocks)
    return PromptBundle(role_block=blocks[0], email_block=blocks[1],
                        context_block=blocks[2], threat_block=blocks[3],
                        output_spec_block=blocks[4], rendered=rendered)


def _first_json_object(raw: str):
    """First parseable JSON object in raw; tolerates prose and fences."""
    candidates = [raw.strip()]
    candidates.extend(m.strip() for m in _FENCE_RE.findall(raw))
    for cand in candidates:
        try:
            obj = json.loads(cand)
            if isinstance(obj, dict):
                return obj
        except ValueError:
            pass
    decoder = json.JSONDecoder()
    for pos in range(len(raw)):
        if raw[pos] != "{":
            continue
        try:
            obj, _ = decoder.raw_decode(raw, pos)
        except ValueError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _coerce_score(value, raw: str) -> int:
    if isinstance(value, bool):
        raise SchemaViolation("phishing_score", "not an integer", raw)
    if isinstance(value, int):
        score = value
    elif isinstance(value, float):
        if not value.is_integer():
            raise SchemaViolation("phishing_score", "not an integer", raw)
        score = int(value)
    elif isinstance(value, str) and _INT_STRING_RE.match(value.strip()):
        score = int(value.strip())
    else:
        raise SchemaViolation("phishing_score", "not an integer", raw)
    if not 0 <= score <= 10:
        raise SchemaViolation("phishing_score", "out of range", raw)
    return score


def _coerce_enum(obj: dict, name: str, allowed: tuple, raw: str) -> str:
    value = obj[name]
    if not isinstance(value, str):
        raise SchemaViolation(name, "not a string", raw)
    value = value.strip().lower()
    if value not in allowed:
        raise SchemaViolation(name, f"must be one of {allowed}", raw)
    return value


def _coerce_str_list(obj: dict, name: str, raw: str) -> list[str]:
    value = obj[name]
    if not isinstance(value, list):
        raise SchemaViolation(name, "not a list", raw)
    items = []
    for item in value:
        if isinstance(item, str):
            items.append(item)
        elif isinstance(item, (int, float)) and not isinstance(item, bool):
            items.append(str(item))
        else:
            raise SchemaViolation(name, "items must be strings", raw)
    return items


def parse_verdict(raw: str) -> Verdict:
    """Extract and validate the model's JSON verdict.

    Tolerates surrounding prose and triple-backtick fences; coerces a
    numeric-string score; lowercases enum values before matching.
    Raises NoJsonFound or SchemaViolation (both carry the raw text).
    """
    obj = _first_json_object(raw)
    if obj is None:
        raise NoJsonFound("no JSON object in model output", raw=raw)
    for name in ("classification_decision", "phishing_score", "risk",
                 "social_engineering_elements", "recommended_actions",
                 "brief_reason"):
        if name not in obj:
            raise SchemaViolation(name, "missing", raw)
    decision = _coerce_enum(obj, "classification_decision", DECISIONS, raw)
    score = _coerce_score(obj["phishing_score"], raw)
    risk = _coerce_enum(obj, "risk", RISKS, raw)
    tactics = _coerce_str_list(obj, "social_engineering_elements", raw)
    actions = _coerce_str_list(obj, "recommended_actions", raw)
    reason = obj["brief_reason"]
    if not isinstance(reason, str) or not reason.strip():
        raise SchemaViolation("brief_reason", "must be a non-empty string", raw)
    return Verdict(classification_decision=decision, phishing_score=score,
                   risk=risk, social_engineering_elements=tactics,
                   recommended_actions=actions, brief_reason=reason)


def consistency_check(v: Verdict) -> list[str]:
    """Warnings for internally inconsistent verdicts; the decision field
    stays authoritative for metrics either way."""
    warnings = []
    if v.classification_decision == "phishing" and v.phishing_score <= 3:
        warnings.append("decision is phishing but phishing_score <= 3")
    if v.classification_decision == "legitimate" and v.phishing_score >= 7:
        warnings.append("decision is legitimate but phishing_score >= 7")
    if v.risk == "high" and v.classification_decision == "legitimate":
        warnings.append("risk is high but decision is legitimate")
    return warnings


def fallback_verdict() -> Verdict:
    """Fail-closed verdict used after a re-ask still fails to parse."""
    return Verdict(classification_decision="phishing", phishing_score=5,
                   risk="medium", social_engineering_elements=[],
                   recommended_actions=["review manually"],
                   brief_reason="model output unparseable, failing closed")
