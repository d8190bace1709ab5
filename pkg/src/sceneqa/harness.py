"""Benchmark ingestion, accuracy/recall/cost reporting, and the baseline preset."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .analysis import answer_question
from .captioning import parallel_map
from .config import PipelineConfig, resolve_video_path
from .core import (
    ANSWER_LETTERS,
    FinalAnswer,
    FrameRef,
    ImagePart,
    ModelRequest,
    Question,
    TextPart,
    TimeInterval,
    format_seconds,
)
from .errors import InvalidInputError, ParseFailure, TransportError
from .frames import FrameExtractionError, FrameSource, probe_duration
from .gateway import ModelGateway
from .store import exists as store_exists
from .store import load as store_load
from .structured import load_template, parse_answer_letter, parse_sections, query_parsed

log = logging.getLogger(__name__)


def load_benchmark(path: str | Path) -> tuple[list[Question], list[str]]:
    """Read a benchmark file; invalid items are collected as per-item errors."""
    raw = json.loads(Path(path).read_text("utf-8"))
    items = raw["questions"] if isinstance(raw, dict) else raw
    questions: list[Question] = []
    errors: list[str] = []
    for i, item in enumerate(items):
        try:
            if isinstance(item.get("options"), dict):
                # labeled options must be contiguous from A
                labels = sorted(item["options"])
                expected = list(ANSWER_LETTERS[: len(labels)])
                if labels != expected:
                    raise InvalidInputError(f"option labels {labels} not contiguous from A")
                item = dict(item, options=[item["options"][k] for k in labels])
            questions.append(Question.from_dict(item))
        except (InvalidInputError, KeyError, TypeError, ValueError) as exc:
            errors.append(f"item {item.get('question_id', i)}: {exc}")
    return questions, errors


def interval_match(predicted: list[TimeInterval], gt: TimeInterval) -> bool:
    """True iff any predicted interval overlaps the ground truth with positive
    measure; merely touching endpoints does not count."""
    return any(iv.overlaps(gt) for iv in predicted)


@dataclass(slots=True)
class Report:
    """Aggregated evaluation results, reproducible from per_question alone."""

    answered: int = 0
    correct: int = 0
    skipped: int = 0
    overall_accuracy: float | None = None
    per_category: dict[str, dict[str, Any]] = field(default_factory=dict)
    recall: dict[str, Any] = field(default_factory=dict)
    usage: dict[str, Any] = field(default_factory=dict)
    per_question: list[dict[str, Any]] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "answered": self.answered,
            "correct": self.correct,
            "skipped": self.skipped,
            "overall_accuracy": self.overall_accuracy,
            "per_category": self.per_category,
            "recall": self.recall,
            "usage": self.usage,
            "per_question": self.per_question,
            "errors": self.errors,
        }

    def render_table(self) -> str:
        lines = []
        cats = sorted(self.per_category)
        header = [f"{c:>8}" for c in cats] + [f"{'Overall':>8}"]
        values = []
        for c in cats:
            acc = self.per_category[c]["accuracy"]
            values.append(f"{acc * 100:>7.1f}%" if acc is not None else f"{'n/a':>8}")
        overall = (
            f"{self.overall_accuracy * 100:>7.1f}%"
            if self.overall_accuracy is not None
            else f"{'n/a':>8}"
        )
        values.append(overall)
        lines.append(" ".join(header))
        lines.append(" ".join(values))
        lines.append(
            f"answered={self.answered} correct={self.correct} skipped={self.skipped}"
        )
        if self.recall.get("applicable"):
            value = self.recall.get("value")
            lines.append(
                f"relevant-segment recall: {self.recall['matched']}/{self.recall['applicable']}"
                + (f" = {value * 100:.1f}%" if value is not None else "")
            )
        else:
            lines.append("relevant-segment recall: n/a (no ground-truth intervals)")
        totals = self.usage.get("totals", {})
        if totals:
            lines.append(
                f"cost: ${totals.get('cost_micros', 0) / 1e6:.4f} over "
                f"{totals.get('calls', 0)} calls"
            )
        return "\n".join(lines)


def aggregate(per_question: list[dict[str, Any]], usage: dict[str, Any]) -> Report:
    """Fold per-question records into a Report; pure so it can be re-checked."""
    report = Report(usage=usage)
    report.per_question = sorted(per_question, key=lambda r: str(r["question_id"]))
    by_cat: dict[str, dict[str, int]] = {}
    recall_applicable = 0
    recall_matched = 0
    for rec in report.per_question:
        if rec.get("skipped"):
            report.skipped += 1
        else:
            report.answered += 1
            cat = rec.get("category") or "uncategorized"
            entry = by_cat.setdefault(cat, {"answered": 0, "correct": 0})
            entry["answered"] += 1
            if rec.get("correct"):
                report.correct += 1
                entry["correct"] += 1
        if rec.get("gt_interval") is not None:
            recall_applicable += 1
            if rec.get("matched"):
                recall_matched += 1
    report.overall_accuracy = (
        report.correct / report.answered if report.answered else None
    )
    report.per_category = {
        cat: {
            "answered": entry["answered"],
            "correct": entry["correct"],
            "accuracy": entry["correct"] / entry["answered"] if entry["answered"] else None,
        }
        for cat, entry in sorted(by_cat.items())
    }
    report.recall = {
        "applicable": recall_applicable,
        "matched": recall_matched,
        "value": recall_matched / recall_applicable if recall_applicable else None,
    }
    return report


def _usage_delta(before: dict[str, Any], after: dict[str, Any]) -> dict[str, Any]:
    stages = {}
    for stage, entry in after["stages"].items():
        prev = before["stages"].get(stage, {})
        delta = {k: v - prev.get(k, 0) for k, v in entry.items()}
        if any(delta.values()):
            stages[stage] = delta
    totals = {k: after["totals"][k] - before["totals"].get(k, 0) for k in after["totals"]}
    return {"stages": stages, "totals": totals}


def evaluate(
    questions: list[Question],
    cfg: PipelineConfig,
    gateway: ModelGateway,
    frame_source: FrameSource,
    trace_dir: Path | None = None,
    errors: list[str] | None = None,
) -> Report:
    """Answer every question (parallel across questions) and aggregate.

    Questions whose caption store is missing are skipped and reported, not
    failed; recall uses the predicted relevant intervals from each trace.
    """
    before = gateway.ledger.snapshot()

    def one(question: Question) -> dict[str, Any]:
        record: dict[str, Any] = {
            "question_id": question.question_id,
            "video_id": question.video_id,
            "category": question.category,
            "gt": question.gt_answer,
            "gt_interval": question.gt_interval.to_pair() if question.gt_interval else None,
        }
        if not store_exists(question.video_id, cfg.store_root):
            record.update(skipped=True, predicted=None, relevant=[], matched=None)
            return record
        store = store_load(question.video_id, cfg.store_root)
        final, trace = answer_question(
            store,
            question,
            cfg.sampling,
            gateway,
            frame_source,
            cfg.analysis,
            resolve_video_path(cfg, question.video_id),
        )
        relevant = [iv.to_pair() for iv in trace.global_analysis.relevant]
        matched = None
        if question.gt_interval is not None:
            matched = interval_match(
                list(trace.global_analysis.relevant), question.gt_interval
            )
        record.update(
            skipped=False,
            predicted=final.letter,
            correct=(final.letter == question.gt_answer) if question.gt_answer else None,
            relevant=relevant,
            matched=matched,
        )
        if trace_dir is not None:
            trace_dir.mkdir(parents=True, exist_ok=True)
            (trace_dir / f"{question.question_id}.json").write_text(
                json.dumps(trace.to_dict(), ensure_ascii=False, sort_keys=True, indent=1),
                encoding="utf-8",
            )
        return record

    records = parallel_map(one, questions, cfg.question_workers)
    usage = _usage_delta(before, gateway.ledger.snapshot())
    report = aggregate(records, usage)
    if errors:
        report.errors = list(errors)
    return report


def baseline_frame_times(duration: float, n_frames: int) -> list[float]:
    """Uniform sampling convention: frame k sits at (k + 0.5) * duration / N."""
    return [(k + 0.5) * duration / n_frames for k in range(n_frames)]


def _baseline_answer(
    question: Question,
    duration: float,
    cfg: PipelineConfig,
    gateway: ModelGateway,
    frame_source: FrameSource,
    video_path: str,
) -> FinalAnswer:
    n = (
        cfg.baseline.frames_long
        if duration > cfg.baseline.short_video_s
        else cfg.baseline.frames_short
    )
    times = baseline_frame_times(duration, n)
    frames = frame_source.frames(question.video_id, video_path, times)
    prompt = load_template("baseline").render(
        question=f"{question.text} {question.options_block()}"
    )
    parts: list = [TextPart(prompt)]
    for frame in frames:
        # timestamps interleaved with frames so second-specific questions resolve
        parts.append(TextPart(f"t={format_seconds(frame.timestamp)}s"))
        parts.append(ImagePart(frame))
    req = ModelRequest(
        stage_tag="baseline",
        unit_id=question.question_id,
        parts=tuple(parts),
        baseline_exempt=True,
    )
    labels = question.labels()

    def parser(text: str):
        smap = parse_sections(text)
        reasoning = smap.body(1, "reasoning")
        letter = parse_answer_letter(smap.body(2, "answer"))
        if letter not in labels:
            raise ParseFailure(f"letter {letter} outside options {labels}")
        return reasoning, letter

    try:
        reasoning, letter = query_parsed(gateway, req, parser)
    except (ParseFailure, TransportError) as exc:
        return FinalAnswer(f"Baseline unparseable ({exc}); guessing A.", "A")
    return FinalAnswer(reasoning, letter)


def run_baseline(
    questions: list[Question],
    cfg: PipelineConfig,
    gateway: ModelGateway,
    frame_source: FrameSource,
    errors: list[str] | None = None,
) -> Report:
    """Single-call-per-question preset with N uniformly sampled frames.

    This path intentionally exceeds the 32-frame pipeline cap and is the only
    one allowed to: its requests carry the baseline exemption flag.
    """
    before = gateway.ledger.snapshot()

    def one(question: Question) -> dict[str, Any]:
        record: dict[str, Any] = {
            "question_id": question.question_id,
            "video_id": question.video_id,
            "category": question.category,
            "gt": question.gt_answer,
            "gt_interval": question.gt_interval.to_pair() if question.gt_interval else None,
        }
        video_path = resolve_video_path(cfg, question.video_id)
        try:
            if store_exists(question.video_id, cfg.store_root):
                duration = store_load(question.video_id, cfg.store_root).duration
            else:
                duration = probe_duration(video_path)
            final = _baseline_answer(
                question, duration, cfg, gateway, frame_source, video_path
            )
        except (FrameExtractionError, TransportError) as exc:
            log.warning("baseline %s skipped: %s", question.question_id, exc)
            record.update(skipped=True, predicted=None, relevant=[], matched=None)
            return record
        record.update(
            skipped=False,
            predicted=final.letter,
            correct=(final.letter == question.gt_answer) if question.gt_answer else None,
            relevant=[],
            matched=None,
        )
        return record

    records = parallel_map(one, questions, cfg.question_workers)
    usage = _usage_delta(before, gateway.ledger.snapshot())
    report = aggregate(records, usage)
    # the baseline never localizes segments, so recall is not applicable
    report.recall = {"applicable": 0, "matched": 0, "value": None}
    if errors:
        report.errors = list(errors)
    return report
