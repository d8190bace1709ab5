"""Prompt template rendering and parsers for the bracketed response grammars.

Each pipeline step prompts the model to answer under numbered headers like
``[2. Relevant Segments]:``; the parsers here pull those sections apart and
decode the per-step payload formats. All parsers are total over arbitrary
text: they either return a value (possibly with warnings) or raise
ParseFailure, never anything else.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources

from .core import TimeInterval
from .errors import ParseFailure

TEMPLATE_IDS = (
    "scene_split",
    "scene_merge",
    "character_selection",
    "dense_caption",
    "character_merge",
    "caption_rewrite",
    "intention_map",
    "intention_reduce",
    "goal_proposal",
    "answer",
    "baseline",
)

_SLOT_RE = re.compile(r"<<([a-z_]+)>>")
# Title must start with a letter so bracketed number lists in section bodies
# (e.g. "[5.5, 9]") are never mistaken for headers.
_HEADER_RE = re.compile(r"\[(\d+)\.\s*([A-Za-z][^\]\n]*?)\]\s*:?", re.IGNORECASE)


@dataclass(frozen=True, slots=True)
class Section:
    index: int
    title: str
    body: str


@dataclass(slots=True)
class SectionMap:
    """Ordered header -> body mapping extracted from a model response."""

    sections: list[Section] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def by_index(self, k: int) -> Section | None:
        for s in self.sections:
            if s.index == k:
                return s
        return None

    def by_title(self, prefix: str) -> Section | None:
        prefix = prefix.lower()
        for s in self.sections:
            if s.title.lower().startswith(prefix):
                return s
        return None

    def body(self, k: int, title: str) -> str:
        """Body of section k, falling back to a title-prefix match."""
        s = self.by_index(k) or self.by_title(title)
        if s is None:
            raise ParseFailure(f"missing section [{k}. {title}]")
        return s.body


class PromptTemplate:
    """A prompt text asset with <<slot>> placeholders."""

    def __init__(self, template_id: str, text: str):
        self.template_id = template_id
        self.text = text
        self.slots = tuple(dict.fromkeys(_SLOT_RE.findall(text)))

    def render(self, **values: str) -> str:
        out = self.text
        for name in self.slots:
            if name not in values:
                raise ParseFailure(f"template {self.template_id}: unbound slot <<{name}>>")
            out = out.replace(f"<<{name}>>", values[name])
        if _SLOT_RE.search(out):
            raise ParseFailure(f"template {self.template_id}: unbound placeholder remains")
        return out


_TEMPLATE_CACHE: dict[str, PromptTemplate] = {}


def load_template(template_id: str) -> PromptTemplate:
    """Load a prompt asset by id (one file per pipeline step)."""
    if template_id not in TEMPLATE_IDS:
        raise KeyError(f"unknown template id: {template_id}")
    if template_id not in _TEMPLATE_CACHE:
        text = (
            resources.files("sceneqa").joinpath(f"prompts/{template_id}.txt").read_text("utf-8")
        )
        _TEMPLATE_CACHE[template_id] = PromptTemplate(template_id, text)
    return _TEMPLATE_CACHE[template_id]


def parse_sections(text: str) -> SectionMap:
    """Split a response into its ``[k. Title]:`` sections.

    Leading chatter before the first header is discarded; headers out of
    ascending order are kept but flagged with a warning.
    """
    matches = list(_HEADER_RE.finditer(text))
    if not matches:
        raise ParseFailure("no [k. Title]: headers found")
    smap = SectionMap()
    for i, m in enumerate(matches):
        body_end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        body = text[m.end():body_end].strip()
        smap.sections.append(Section(int(m.group(1)), m.group(2).strip(), body))
    indices = [s.index for s in smap.sections]
    if indices != sorted(indices):
        smap.warnings.append(f"section indices out of order: {indices}")
    return smap


def parse_frame_list(body: str) -> list[int]:
    """Decode a bracketed integer list like ``[5, 9]``; ``[]`` is allowed."""
    m = re.search(r"\[([^\[\]]*)\]", body)
    if m is None:
        raise ParseFailure(f"no bracketed list in {body!r}")
    inner = m.group(1).strip()
    if not inner:
        return []
    out = []
    for token in inner.split(","):
        token = token.strip().strip("\"'")
        if not re.fullmatch(r"-?\d+", token):
            raise ParseFailure(f"non-integer frame token {token!r}")
        out.append(int(token))
    return out


def parse_interval_list(body: str) -> tuple[list[TimeInterval], list[str]]:
    """Decode ``[(a, b), ...]`` time tuples; invalid tuples are dropped with warnings."""
    if body.count("(") != body.count(")"):
        raise ParseFailure(f"unbalanced parentheses in {body!r}")
    warnings: list[str] = []
    intervals: list[TimeInterval] = []
    for m in re.finditer(r"\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)", body):
        a, b = float(m.group(1)), float(m.group(2))
        if a < 0 or a >= b:
            warnings.append(f"dropped invalid interval ({a}, {b})")
            continue
        intervals.append(TimeInterval(a, b))
    return intervals, warnings


def parse_merge_tuples(body: str) -> tuple[list[tuple[str, str, str]], list[str]]:
    """Decode ``(name_a, name_b, better)`` triples from a character-merge response.

    The third element must equal the first or second; violating triples are
    dropped with a warning. An empty body means no repeated characters.
    """
    warnings: list[str] = []
    triples: list[tuple[str, str, str]] = []
    for m in re.finditer(r"\(([^()]*)\)", body):
        fields = [f.strip().strip("\"'") for f in m.group(1).split(",")]
        if len(fields) != 3:
            raise ParseFailure(f"merge tuple with arity {len(fields)}: {m.group(0)!r}")
        a, b, better = fields
        if better not in (a, b):
            warnings.append(f"dropped triple ({a}, {b}, {better}): better not in pair")
            continue
        triples.append((a, b, better))
    return triples, warnings


def parse_yes_no(body: str) -> bool:
    m = re.search(r"\b(yes|no)\b", body, re.IGNORECASE)
    if m is None:
        raise ParseFailure(f"expected yes/no, got {body!r}")
    return m.group(1).lower() == "yes"


def parse_answer_letter(body: str) -> str:
    """First standalone capital A-E in the body."""
    m = re.search(r"\b([A-E])\b", body)
    if m is None:
        raise ParseFailure(f"no answer letter A-E in {body!r}")
    return m.group(1)


def parse_key_characters(body: str) -> list[tuple[str, str]]:
    """Decode ``[(synonym, identifier), ...]`` pairs.

    The identifier may be free text containing commas, so only the first
    comma splits; pairs without one are dropped.
    """
    pairs: list[tuple[str, str]] = []
    for m in re.finditer(r"\(([^()]*)\)", body):
        inner = m.group(1)
        if "," not in inner:
            continue
        syn, ident = inner.split(",", 1)
        pairs.append((syn.strip(), ident.strip()))
    return pairs


def parse_confidence(body: str) -> tuple[int, list[str]]:
    """First integer in the body, clamped into 1..5 with a warning if outside."""
    m = re.search(r"-?\d+", body)
    if m is None:
        raise ParseFailure(f"no confidence integer in {body!r}")
    value = int(m.group(0))
    warnings = []
    if not 1 <= value <= 5:
        warnings.append(f"confidence {value} outside 1..5, clamped")
        value = min(5, max(1, value))
    return value, warnings


def parse_local_or_global(body: str) -> str:
    """Map a local/global (or yes=global / no=local) answer onto the flag."""
    m = re.search(r"\b(local|global|yes|no)\b", body, re.IGNORECASE)
    if m is None:
        raise ParseFailure(f"no local/global flag in {body!r}")
    word = m.group(1).lower()
    return "global" if word in ("global", "yes") else "local"


_MEMORY_RE = re.compile(
    r"\[\[\s*NAME:\s*([^\]]*?)\s*\]\s*,\s*\[\s*DESCRIPTION:\s*([^\]]*?)\s*\]\s*,"
    r"\s*\[\s*FRAME:\s*(\d+)\s*\]\s*\]"
)


def parse_character_details(body: str) -> list[tuple[str, str, int]]:
    """Decode visual-memory entries ``[[NAME: n], [DESCRIPTION: d], [FRAME: i]]``."""
    out = []
    for m in _MEMORY_RE.finditer(body):
        name = sanitize_name(m.group(1))
        if not name:
            continue
        out.append((name, m.group(2).strip(), int(m.group(3))))
    return out


def parse_name_list(body: str) -> list[str]:
    """Decode a bracketed name list like ``["person_a", person_b]``."""
    m = re.search(r"\[([^\[\]]*)\]", body)
    inner = m.group(1) if m else body
    names = []
    for token in inner.split(","):
        name = sanitize_name(token)
        if name:
            names.append(name)
    return names


def sanitize_name(raw: str) -> str:
    """Normalize a character name to the snake-token form used in <name> mentions."""
    s = raw.strip().strip("\"'").strip()
    if s.startswith("<") and s.endswith(">"):
        s = s[1:-1]
    s = s.lower().replace(" ", "_").replace("-", "_")
    return re.sub(r"[^a-z0-9_]", "", s)


# ---------------------------------------------------------------------------
# Response renderers. These produce synthetic responses in the exact grammars
# the parsers accept; the scripted fixtures are built with them and the
# render-inject-parse roundtrip tests close the loop.
# ---------------------------------------------------------------------------


REPAIR_REMINDER = (
    "Your previous reply could not be parsed ({error}). "
    "Reply again, strictly following the required output format."
)


def repair_query(req, error: ParseFailure, gateway, parser, on_call=None):
    """Re-issue a request once with a format reminder appended.

    The retry carries attempt=1, so scripted transcripts address it
    separately; a second parse failure (or a missing retry transcript)
    propagates for the caller's stage-specific fallback.
    """
    from .core import ModelRequest, TextPart  # deferred: keep parsers importable alone

    retry = ModelRequest(
        stage_tag=req.stage_tag,
        unit_id=req.unit_id,
        parts=tuple(req.parts) + (TextPart(REPAIR_REMINDER.format(error=error)),),
        params=req.params,
        attempt=req.attempt + 1,
        baseline_exempt=req.baseline_exempt,
    )
    response = gateway.query(retry, on_call)
    return parser(response.text)


def query_parsed(gateway, req, parser, on_call=None):
    """query -> parse, with the single bounded repair retry on malformed output."""
    response = gateway.query(req, on_call)
    try:
        return parser(response.text)
    except ParseFailure as error:
        return repair_query(req, error, gateway, parser, on_call)


def render_interval_list(intervals: list[TimeInterval]) -> str:
    return "[" + ", ".join(f"({iv.t_start:g}, {iv.t_end:g})" for iv in intervals) + "]"


def render_key_characters(pairs: list[tuple[str, str]]) -> str:
    return "[" + ", ".join(f"({a}, {b})" for a, b in pairs) + "]"


def render_scene_split_response(description: str, single: bool, frames: list[int]) -> str:
    lines = [
        f"[1. Description]: {description}",
        f"[2. Single: yes/no]: {'Yes' if single else 'No'}.",
    ]
    if not single:
        lines.append(f"[3. Frames]: [{', '.join(str(f) for f in frames)}]")
    return "\n".join(lines)


def render_character_selection_response(details: list[tuple[str, str, int]]) -> str:
    appeared = "[" + ", ".join(f'"{name}"' for name, _, _ in details) + "]"
    lines = [f"[1. Appeared Characters]: {appeared}", "[2. Character Details]:"]
    for i, (name, desc, frame) in enumerate(details, start=1):
        lines.append(
            f"[Visual Memory {i}:] [[NAME: {name}], [DESCRIPTION: {desc}],"
            f" [FRAME: {frame}]] [Visual Memory Ends]"
        )
    return "\n".join(lines)


def render_dense_caption_response(brief: str, appeared: list[str], detailed: str) -> str:
    names = "[" + ", ".join(appeared) + "]"
    return (
        f"[1. Brief Description]: {brief}\n"
        f"[2. Appeared Characters]: {names}\n"
        f"[3. Detailed Description]: {detailed}"
    )


def render_character_merge_response(triples: list[tuple[str, str, str]]) -> str:
    body = ", ".join(f"({a}, {b}, {c})" for a, b, c in triples)
    return f"[Repeated Characters and Objects]: {body}"


def render_intention_map_response(
    reasoning: str,
    relevant: list[TimeInterval],
    confidence: int,
    key_characters: list[tuple[str, str]],
) -> str:
    return (
        f"[1. Reasoning]: {reasoning}\n"
        f"[2. Relevant Segments]: {render_interval_list(relevant)}\n"
        f"[3. Confidence Level]: {confidence}\n"
        f"[4. Key Characters]: {render_key_characters(key_characters)}"
    )


def render_intention_reduce_response(
    reasoning: str,
    relevant: list[TimeInterval],
    key_characters: list[tuple[str, str]],
    local_or_global: str,
) -> str:
    return (
        f"[1. Reasoning]: {reasoning}\n"
        f"[2. Relevant Segments]: {render_interval_list(relevant)}\n"
        f"[3. Key Characters]: {render_key_characters(key_characters)}\n"
        f"[4. Local or Global]: {local_or_global}"
    )


def render_goal_proposal_response(reasoning: str, local_q: str, global_q: str) -> str:
    return (
        f"[1. Reasoning]: {reasoning}\n"
        f"[2. Local Question]: {local_q}\n"
        f"[3. Global Question]: {global_q}"
    )


def render_answer_response(reasoning: str, letter: str) -> str:
    return f"[1. Reasoning]: {reasoning}\n[2. Answer]: {letter}"
