"""Domain types shared across the captioning and analysis pipeline.

Everything here is an immutable value object; serialization helpers keep
full float fidelity so that ``from_dict(to_dict(x)) == x`` holds exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import InvalidInputError

# Character mentions inside captions use the literal token form <name>,
# where the name is a snake token.
NAME_TOKEN_RE = re.compile(r"<([a-z0-9_]+)>")

ANSWER_LETTERS = "ABCDE"


@dataclass(frozen=True, slots=True)
class TimeInterval:
    """A half-open span of video time in seconds, t_start < t_end."""

    t_start: float
    t_end: float

    def __post_init__(self) -> None:
        if self.t_start < 0 or not self.t_start < self.t_end:
            raise InvalidInputError(
                f"invalid interval ({self.t_start}, {self.t_end}): need 0 <= start < end"
            )

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    @property
    def midpoint(self) -> float:
        return (self.t_start + self.t_end) / 2.0

    def overlaps(self, other: "TimeInterval") -> bool:
        """Positive-measure overlap; merely touching endpoints does not count."""
        return self.t_start < other.t_end and other.t_start < self.t_end

    def to_pair(self) -> list[float]:
        return [self.t_start, self.t_end]

    @classmethod
    def from_pair(cls, pair: Iterable[float]) -> "TimeInterval":
        a, b = pair
        return cls(float(a), float(b))


def merge_intervals(intervals: list[TimeInterval]) -> list[TimeInterval]:
    """Union overlapping or exactly adjacent intervals; result sorted and disjoint."""
    if not intervals:
        return []
    ordered = sorted(intervals, key=lambda iv: (iv.t_start, iv.t_end))
    merged = [ordered[0]]
    for iv in ordered[1:]:
        last = merged[-1]
        if iv.t_start <= last.t_end:
            if iv.t_end > last.t_end:
                merged[-1] = TimeInterval(last.t_start, iv.t_end)
        else:
            merged.append(iv)
    return merged


@dataclass(frozen=True, slots=True)
class FrameRef:
    """A single sampled frame: where it came from and how to load its pixels."""

    video_id: str
    timestamp: float
    path: str | None = None
    data: bytes | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"video_id": self.video_id, "timestamp": self.timestamp}
        if self.path is not None:
            d["path"] = self.path
        if self.data is not None:
            d["data_hex"] = self.data.hex()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FrameRef":
        data = bytes.fromhex(d["data_hex"]) if "data_hex" in d else None
        return cls(d["video_id"], float(d["timestamp"]), d.get("path"), data)


@dataclass(frozen=True, slots=True)
class Scene:
    """Atomic captioned time span; the unit of all downstream reasoning."""

    scene_id: int
    interval: TimeInterval
    brief: str
    detailed: str
    appeared_characters: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "t_start": self.interval.t_start,
            "t_end": self.interval.t_end,
            "brief": self.brief,
            "detailed": self.detailed,
            "appeared": list(self.appeared_characters),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scene":
        return cls(
            scene_id=int(d["scene_id"]),
            interval=TimeInterval(float(d["t_start"]), float(d["t_end"])),
            brief=d["brief"],
            detailed=d["detailed"],
            appeared_characters=tuple(d["appeared"]),
        )

    def name_tokens(self) -> set[str]:
        """Names mentioned as <name> tokens anywhere in the scene text."""
        found = set(NAME_TOKEN_RE.findall(self.brief))
        found.update(NAME_TOKEN_RE.findall(self.detailed))
        return found


@dataclass(frozen=True, slots=True)
class CharacterRecord:
    """One salient character or object with its most representative frame."""

    name: str
    description: str
    representative_frame: FrameRef

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "frame": self.representative_frame.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CharacterRecord":
        return cls(d["name"], d["description"], FrameRef.from_dict(d["frame"]))


@dataclass(frozen=True, slots=True)
class CharacterRegistry:
    """Canonical character records plus the old-name -> canonical-name map."""

    records: tuple[CharacterRecord, ...] = ()
    rename_map: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        names = [r.name for r in self.records]
        if len(names) != len(set(names)):
            raise InvalidInputError("registry record names must be unique")

    def names(self) -> set[str]:
        return {r.name for r in self.records}

    def rename(self, name: str) -> str:
        return self.rename_map.get(name, name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "records": [r.to_dict() for r in self.records],
            "rename_map": dict(sorted(self.rename_map.items())),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CharacterRegistry":
        return cls(
            records=tuple(CharacterRecord.from_dict(r) for r in d["records"]),
            rename_map=dict(d["rename_map"]),
        )


@dataclass(frozen=True, slots=True)
class SegmentAnalysis:
    """Per-chunk question-intention analysis (the map half of stage B)."""

    chunk_id: int
    reasoning: str
    relevant: tuple[TimeInterval, ...]
    confidence: int
    key_characters: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if self.confidence not in (1, 2, 3, 4, 5):
            raise InvalidInputError(f"confidence must be in 1..5, got {self.confidence}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_id": self.chunk_id,
            "reasoning": self.reasoning,
            "relevant": [iv.to_pair() for iv in self.relevant],
            "confidence": self.confidence,
            "key_characters": [list(p) for p in self.key_characters],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SegmentAnalysis":
        return cls(
            chunk_id=int(d["chunk_id"]),
            reasoning=d["reasoning"],
            relevant=tuple(TimeInterval.from_pair(p) for p in d["relevant"]),
            confidence=int(d["confidence"]),
            key_characters=tuple((a, b) for a, b in d["key_characters"]),
        )


@dataclass(frozen=True, slots=True)
class GlobalAnalysis:
    """Video-level intention analysis (the reduce half of stage B)."""

    reasoning: str
    relevant: tuple[TimeInterval, ...]
    key_characters: tuple[tuple[str, str], ...]
    local_or_global: str  # "local" | "global"

    def __post_init__(self) -> None:
        if not self.relevant:
            raise InvalidInputError("global analysis needs at least one relevant interval")
        if self.local_or_global not in ("local", "global"):
            raise InvalidInputError(f"bad local_or_global flag: {self.local_or_global!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "reasoning": self.reasoning,
            "relevant": [iv.to_pair() for iv in self.relevant],
            "key_characters": [list(p) for p in self.key_characters],
            "local_or_global": self.local_or_global,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GlobalAnalysis":
        return cls(
            reasoning=d["reasoning"],
            relevant=tuple(TimeInterval.from_pair(p) for p in d["relevant"]),
            key_characters=tuple((a, b) for a, b in d["key_characters"]),
            local_or_global=d["local_or_global"],
        )


@dataclass(frozen=True, slots=True)
class GoalProposal:
    """The two perception queries proposed for the vision model."""

    reasoning: str
    local_question: str
    global_question: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "reasoning": self.reasoning,
            "local_question": self.local_question,
            "global_question": self.global_question,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GoalProposal":
        return cls(d["reasoning"], d["local_question"], d["global_question"])


@dataclass(frozen=True, slots=True)
class PerceptionResult:
    """Raw vision-model answer for one local interval or the global pass."""

    scope: str  # "local" | "global"
    interval: TimeInterval | None
    query: str
    answer: str
    frames_used: tuple[FrameRef, ...]
    degraded: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "scope": self.scope,
            "interval": self.interval.to_pair() if self.interval else None,
            "query": self.query,
            "answer": self.answer,
            "frames_used": [f.to_dict() for f in self.frames_used],
            "degraded": self.degraded,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PerceptionResult":
        return cls(
            scope=d["scope"],
            interval=TimeInterval.from_pair(d["interval"]) if d["interval"] else None,
            query=d["query"],
            answer=d["answer"],
            frames_used=tuple(FrameRef.from_dict(f) for f in d["frames_used"]),
            degraded=bool(d.get("degraded", False)),
        )


@dataclass(frozen=True, slots=True)
class FinalAnswer:
    """The answer letter plus the reasoning that produced it; always populated."""

    reasoning: str
    letter: str

    def __post_init__(self) -> None:
        if self.letter not in ANSWER_LETTERS:
            raise InvalidInputError(f"answer letter must be one of A..E, got {self.letter!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"reasoning": self.reasoning, "letter": self.letter}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FinalAnswer":
        return cls(d["reasoning"], d["letter"])


@dataclass(frozen=True, slots=True)
class TextPart:
    text: str


@dataclass(frozen=True, slots=True)
class ImagePart:
    frame: FrameRef


@dataclass(frozen=True, slots=True)
class GenParams:
    temperature: float | None = None
    max_tokens: int | None = None


@dataclass(frozen=True, slots=True)
class ModelRequest:
    """One interleaved text+image query, addressable for transcript replay.

    (stage_tag, unit_id, attempt) uniquely identify the call: attempt 0 is
    the primary call and attempt 1 the single repair retry.
    """

    stage_tag: str
    unit_id: str
    parts: tuple[TextPart | ImagePart, ...]
    params: GenParams = GenParams()
    attempt: int = 0
    baseline_exempt: bool = False

    def image_parts(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]

    def text_parts(self) -> list[TextPart]:
        return [p for p in self.parts if isinstance(p, TextPart)]


@dataclass(frozen=True, slots=True)
class Usage:
    """Token/unit counts for one call; cost kept in integer micro-dollars so
    ledger totals are exact and order-independent."""

    input_units: int = 0
    output_units: int = 0
    cost_micros: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.input_units + other.input_units,
            self.output_units + other.output_units,
            self.cost_micros + other.cost_micros,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_units": self.input_units,
            "output_units": self.output_units,
            "cost_micros": self.cost_micros,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Usage":
        return cls(
            int(d.get("input_units", 0)),
            int(d.get("output_units", 0)),
            int(d.get("cost_micros", 0)),
        )


@dataclass(frozen=True, slots=True)
class ModelResponse:
    text: str
    usage: Usage


@dataclass(frozen=True, slots=True)
class Question:
    """One multiple-choice benchmark item."""

    question_id: str
    video_id: str
    text: str
    options: tuple[str, ...]
    category: str | None = None
    gt_answer: str | None = None
    gt_interval: TimeInterval | None = None

    def __post_init__(self) -> None:
        if not 2 <= len(self.options) <= 5:
            raise InvalidInputError(
                f"{self.question_id}: need 2..5 options, got {len(self.options)}"
            )
        if self.gt_answer is not None and self.gt_answer not in self.labels():
            raise InvalidInputError(
                f"{self.question_id}: gt_answer {self.gt_answer!r} outside labels {self.labels()}"
            )

    def labels(self) -> str:
        """Contiguous option labels starting at A."""
        return ANSWER_LETTERS[: len(self.options)]

    def options_block(self) -> str:
        return " ".join(
            f"({label}) {text}" for label, text in zip(self.labels(), self.options)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "video_id": self.video_id,
            "question": self.text,
            "options": list(self.options),
            "category": self.category,
            "answer": self.gt_answer,
            "gt_interval": self.gt_interval.to_pair() if self.gt_interval else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Question":
        gt_iv = d.get("gt_interval")
        return cls(
            question_id=str(d["question_id"]),
            video_id=str(d["video_id"]),
            text=d["question"],
            options=tuple(d["options"]),
            category=d.get("category"),
            gt_answer=d.get("answer"),
            gt_interval=TimeInterval.from_pair(gt_iv) if gt_iv else None,
        )


def format_seconds(t: float) -> str:
    """Seconds with one decimal, the printing convention for all rendered times."""
    return f"{t:.1f}"
