"""Regex post-processing layer.

URLs, IP addresses (v4/v6) and MAC addresses are detected with patterns
and override the neural output: every rule match becomes a span, and any
neural span overlapping a match is removed entirely. Classes URL_WEB and
DIREC_PROT_INTERNET rarely occur in training data, which is why they are
handled here instead of by the tagger.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .ingest import AnnotatedDocument, PhiSpan

# Trailing sentence punctuation is not part of a URL even though \S eats it.
_URL_TRAIL = ".,;:!?)]}'\"»"

_URL = re.compile(r"(?:(?:https?|ftp)://|www\.)\S+", re.IGNORECASE)
_OCTET = r"(?:25[0-5]|2[0-4][0-9]|1[0-9]{2}|[1-9]?[0-9])"
_IPV4 = re.compile(rf"(?<![\w.]){_OCTET}(?:\.{_OCTET}){{3}}(?![\w.])")
_MAC = re.compile(r"(?<![0-9A-Fa-f:-])[0-9A-Fa-f]{2}(?:([:-])[0-9A-Fa-f]{2})(?:\1[0-9A-Fa-f]{2}){4}(?![0-9A-Fa-f:-])")
_IPV6 = re.compile(
    r"(?<![0-9A-Za-z:.])"
    r"(?:"
    r"(?:[0-9A-Fa-f]{1,4}:){7}[0-9A-Fa-f]{1,4}"  # full 8-group form
    r"|(?:[0-9A-Fa-f]{1,4}:)+:(?:[0-9A-Fa-f]{1,4}(?::[0-9A-Fa-f]{1,4})*)?"  # a::, a:b::c
    r"|::(?:[0-9A-Fa-f]{1,4}(?::[0-9A-Fa-f]{1,4})*)?"  # ::1, ::
    r")"
    r"(?![0-9A-Za-z:])"
)


@dataclass(frozen=True)
class Rule:
    name: str
    pattern: re.Pattern
    phi_class: str


DEFAULT_RULES: tuple[Rule, ...] = (
    Rule("url", _URL, "URL_WEB"),
    Rule("ipv4", _IPV4, "DIREC_PROT_INTERNET"),
    Rule("mac", _MAC, "DIREC_PROT_INTERNET"),
    Rule("ipv6", _IPV6, "DIREC_PROT_INTERNET"),
)


def rule_matches(text: str, rules: tuple[Rule, ...] = DEFAULT_RULES) -> list[PhiSpan]:
    """All maximal rule matches; overlaps resolved in rule order."""
    claimed: list[PhiSpan] = []
    for rule in rules:
        for m in rule.pattern.finditer(text):
            start, end = m.start(), m.end()
            if rule.name == "url":
                while end > start and text[end - 1] in _URL_TRAIL:
                    end -= 1
            if end <= start:
                continue
            if any(s.start < end and s.end > start for s in claimed):
                continue
            claimed.append(PhiSpan(start, end, rule.phi_class, text[start:end]))
    return sorted(claimed)


def apply_rules(doc: AnnotatedDocument, rules: tuple[Rule, ...] = DEFAULT_RULES) -> AnnotatedDocument:
    """Overwrite neural spans with rule matches; idempotent."""
    matches = rule_matches(doc.text, rules)
    if not matches:
        return AnnotatedDocument(doc.doc_id, doc.text, list(doc.spans))
    kept = [
        s for s in doc.spans if not any(m.start < s.end and m.end > s.start for m in matches)
    ]
    return AnnotatedDocument(doc.doc_id, doc.text, sorted([*kept, *matches]))


def compile_rule(name: str, pattern: str, phi_class: str) -> Rule:
    return Rule(name, re.compile(pattern), phi_class)
