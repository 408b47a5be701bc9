"""Request normalization, modality detection, and fast rule-based safety checks.

Nothing here calls a model: media kinds come from a frozen magic-byte sniff
table, safety and intent are ordered pattern lists, and every function is pure
over an immutable request.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from urllib.parse import urlparse

__all__ = [
    "Attachment",
    "IngressSummary",
    "MediaKind",
    "Modality",
    "Request",
    "SafetyRule",
    "SafetyVerdict",
    "detect_modalities",
    "load_safety_rules",
    "normalize_request",
    "parse_safety_rules",
    "safety_check",
    "sniff_media_kind",
    "summarize",
]


class MediaKind(str, Enum):
    IMAGE = "image"
    AUDIO = "audio"
    PDF = "pdf"
    HTML = "html"
    PLAIN_TEXT = "plain_text"
    UNKNOWN = "unknown"


class Modality(str, Enum):
    TEXT = "text"
    IMAGE = "image"
    AUDIO = "audio"
    DOCUMENT = "document"
    URL = "url"


class SafetyVerdict(str, Enum):
    ALLOW = "allow"
    FLAG = "flag"
    DENY = "deny"


@dataclass(frozen=True, slots=True)
class Attachment:
    name: str
    media_kind: MediaKind
    payload: bytes
    sniffed: bool = False

    def __post_init__(self) -> None:
        if not self.payload:
            raise ValueError(f"attachment {self.name!r}: payload must be non-empty")


@dataclass(frozen=True, slots=True)
class Request:
    """A normalized inbound request.  flagged_urls records syntactically bad
    URLs dropped during normalization (recorded, not fatal)."""

    id: str
    text: str | None = None
    attachments: tuple[Attachment, ...] = ()
    declared_urls: tuple[str, ...] = ()
    config_overrides: dict[str, object] = field(default_factory=dict)
    flagged_urls: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "attachments", tuple(self.attachments))
        object.__setattr__(self, "declared_urls", tuple(self.declared_urls))
        object.__setattr__(self, "flagged_urls", tuple(self.flagged_urls))


@dataclass(frozen=True, slots=True)
class IngressSummary:
    modalities: frozenset[Modality]
    safety: SafetyVerdict
    intent_hint: str


# Frozen sniff table (see docs/config.md).  First matching prefix rule wins;
# HTML and plain text are checked on decoded content afterwards.
_MAGIC_PREFIXES: tuple[tuple[bytes, MediaKind], ...] = (
    (b"\x89PNG\r\n\x1a\n", MediaKind.IMAGE),
    (b"\xff\xd8\xff", MediaKind.IMAGE),
    (b"%PDF-", MediaKind.PDF),
)

_HTML_PATTERN = re.compile(rb"^\s*(<!doctype\s+html|<html)", re.IGNORECASE)


def sniff_media_kind(payload: bytes) -> MediaKind:
    """Classify *payload* by magic bytes; undecodable content maps to unknown."""
    for prefix, kind in _MAGIC_PREFIXES:
        if payload.startswith(prefix):
            return kind
    if payload.startswith(b"RIFF") and payload[8:12] == b"WAVE":
        return MediaKind.AUDIO
    if _HTML_PATTERN.match(payload):
        return MediaKind.HTML
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError:
        return MediaKind.UNKNOWN
    if "\x00" in text:
        return MediaKind.UNKNOWN
    return MediaKind.PLAIN_TEXT


def _valid_url(url: str) -> bool:
    parsed = urlparse(url)
    return parsed.scheme in ("http", "https") and bool(parsed.netloc)


def normalize_request(request: Request) -> Request:
    """Sniff attachment kinds, trim text, validate and deduplicate URLs.

    Sniffing overrides declared kinds; a malformed URL moves to flagged_urls
    rather than failing the request.
    """
    attachments = tuple(
        replace(a, media_kind=sniff_media_kind(a.payload), sniffed=True)
        for a in request.attachments
    )
    text = request.text.strip() if request.text is not None else None

    seen: set[str] = set()
    urls: list[str] = []
    flagged = list(request.flagged_urls)
    for url in request.declared_urls:
        if url in seen:
            continue
        seen.add(url)
        if _valid_url(url):
            urls.append(url)
        elif url not in flagged:
            flagged.append(url)

    return replace(
        request,
        text=text,
        attachments=attachments,
        declared_urls=tuple(urls),
        flagged_urls=tuple(flagged),
    )


_KIND_TO_MODALITY = {
    MediaKind.IMAGE: Modality.IMAGE,
    MediaKind.AUDIO: Modality.AUDIO,
    MediaKind.PDF: Modality.DOCUMENT,
    MediaKind.HTML: Modality.DOCUMENT,
    MediaKind.PLAIN_TEXT: Modality.DOCUMENT,
    # MediaKind.UNKNOWN maps to nothing: the document pipeline skips it.
}


def detect_modalities(request: Request) -> frozenset[Modality]:
    """Map request content to its modality set; empty requests are an error."""
    modalities: set[Modality] = set()
    if request.text:
        modalities.add(Modality.TEXT)
    for attachment in request.attachments:
        kind = _KIND_TO_MODALITY.get(attachment.media_kind)
        if kind is not None:
            modalities.add(kind)
    if request.declared_urls:
        modalities.add(Modality.URL)
    if not modalities and not request.attachments:
        raise ValueError("no content")
    return frozenset(modalities)


@dataclass(frozen=True, slots=True)
class SafetyRule:
    verdict: SafetyVerdict
    pattern: re.Pattern[str]


def parse_safety_rules(lines: list[str] | tuple[str, ...]) -> tuple[SafetyRule, ...]:
    """Parse "deny:<regex>" / "flag:<regex>" lines; blanks and '#' comments skip."""
    rules: list[SafetyRule] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        prefix, _, pattern = line.partition(":")
        if prefix not in ("deny", "flag") or not pattern:
            raise ValueError(f"safety rules line {lineno}: expected deny:/flag: prefix")
        rules.append(SafetyRule(SafetyVerdict(prefix), re.compile(pattern, re.IGNORECASE)))
    return tuple(rules)


def load_safety_rules(path: str) -> tuple[SafetyRule, ...]:
    with open(path, encoding="utf-8") as fh:
        return parse_safety_rules(fh.read().splitlines())


def safety_check(request: Request, rules: tuple[SafetyRule, ...]) -> SafetyVerdict:
    """First matching rule wins over the request text; default allow."""
    text = request.text or ""
    for rule in rules:
        if rule.pattern.search(text):
            return rule.verdict
    return SafetyVerdict.ALLOW


def _intent_hint(request: Request, modalities: frozenset[Modality]) -> str:
    text = request.text or ""
    if "```" in text:
        return "code"
    if Modality.AUDIO in modalities:
        return "transcribe"
    if "?" in text:
        return "question"
    return ""


def summarize(request: Request, rules: tuple[SafetyRule, ...]) -> IngressSummary:
    """Run the full ingress pass over an already-normalized request."""
    modalities = detect_modalities(request)
    return IngressSummary(
        modalities=modalities,
        safety=safety_check(request, rules),
        intent_hint=_intent_hint(request, modalities),
    )
