"""Stage B: question intention analysis over scene chunks, goal proposal,
goal-aware local/global perception, and the answer reduce.

Every stage has a deterministic fallback, so a question always yields an
answer letter; the AnswerTrace records each intermediate result and every
model call for audit and for the relevant-segment recall metric.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any

from .captioning import parallel_map
from .core import (
    FinalAnswer,
    FrameRef,
    GlobalAnalysis,
    GoalProposal,
    ImagePart,
    ModelRequest,
    PerceptionResult,
    Question,
    Scene,
    SegmentAnalysis,
    TextPart,
    TimeInterval,
    format_seconds,
    merge_intervals,
)
from .errors import InvalidInputError, ParseFailure, TransportError
from .frames import FrameExtractionError, FrameSource
from .framing import SamplingConfig, even_subsample, sample_global, sample_local
from .gateway import STAGE_ORDER, ModelGateway
from .store import CaptionStore
from .structured import (
    load_template,
    parse_answer_letter,
    parse_confidence,
    parse_interval_list,
    parse_key_characters,
    parse_local_or_global,
    parse_sections,
    query_parsed,
    render_interval_list,
    render_key_characters,
)

log = logging.getLogger(__name__)

MAX_GLOBAL_INTERVALS = 10


@dataclass(frozen=True, slots=True)
class SceneChunk:
    """Up to chunk_scenes consecutive scenes, the map unit of intention analysis."""

    chunk_id: int
    scenes: tuple[Scene, ...]
    span: TimeInterval
    middle_frames: tuple[FrameRef, ...] = ()


@dataclass(frozen=True, slots=True)
class AnalysisOptions:
    """Dispatch knobs for stage B."""

    intention_frames: str = "auto"  # "on" | "off" | "auto" (off for hour-scale videos)
    hour_scale_s: float = 1800.0
    global_perception: str = "auto"  # "auto" | "always" | "never"
    global_captions: bool = True
    workers: int = 4


@dataclass(slots=True)
class AnswerTrace:
    """Everything one question produced, in stage order."""

    question_id: str
    video_id: str
    segment_analyses: list[SegmentAnalysis] = field(default_factory=list)
    global_analysis: GlobalAnalysis | None = None
    goal_proposal: GoalProposal | None = None
    perceptions: list[PerceptionResult] = field(default_factory=list)
    final: FinalAnswer | None = None
    calls: list[tuple[str, str, int]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "video_id": self.video_id,
            "segment_analyses": [a.to_dict() for a in self.segment_analyses],
            "global_analysis": self.global_analysis.to_dict() if self.global_analysis else None,
            "goal_proposal": self.goal_proposal.to_dict() if self.goal_proposal else None,
            "perceptions": [p.to_dict() for p in self.perceptions],
            "final": self.final.to_dict() if self.final else None,
            "calls": [list(c) for c in self.calls],
        }


class _CallRecorder:
    """Thread-safe collector; calls are later sorted into stage order."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls: list[tuple[str, str, int]] = []

    def __call__(self, req: ModelRequest, _response) -> None:
        with self._lock:
            self.calls.append((req.stage_tag, req.unit_id, req.attempt))

    def sorted_calls(self) -> list[tuple[str, str, int]]:
        return sorted(self.calls, key=lambda c: (STAGE_ORDER.get(c[0], 99), c[1], c[2]))


def _scene_text(scene: Scene) -> str:
    text = scene.detailed or scene.brief
    return " ".join(text.split())


def caption_lines(scenes: tuple[Scene, ...] | list[Scene]) -> str:
    return "\n".join(
        f"({format_seconds(s.interval.t_start)}, {format_seconds(s.interval.t_end)}): "
        f"{_scene_text(s)}"
        for s in scenes
    )


def chunk_scenes(
    store: CaptionStore,
    cfg: SamplingConfig,
    with_frames: bool = False,
    frame_source: FrameSource | None = None,
    video_path: str = "",
) -> list[SceneChunk]:
    """Partition the scene list into consecutive chunks of chunk_scenes."""
    if not store.scenes:
        raise InvalidInputError(f"caption store for {store.video_id} has no scenes")
    size = cfg.chunk_scenes
    chunks = []
    for i in range(0, len(store.scenes), size):
        group = tuple(store.scenes[i:i + size])
        span = TimeInterval(group[0].interval.t_start, group[-1].interval.t_end)
        frames: tuple[FrameRef, ...] = ()
        if with_frames and frame_source is not None:
            times = [s.interval.midpoint for s in group]
            times = even_subsample(times, cfg.frame_cap)
            try:
                frames = tuple(frame_source.frames(store.video_id, video_path, times))
            except FrameExtractionError as exc:
                log.warning("chunk %d frames unavailable: %s", i // size, exc)
        chunks.append(SceneChunk(i // size, group, span, frames))
    return chunks


def _pad_one_scene(
    interval: TimeInterval, scenes: tuple[Scene, ...], span: TimeInterval
) -> TimeInterval | None:
    """Clip to the chunk span, then widen by one neighboring scene per side."""
    start = max(interval.t_start, span.t_start)
    end = min(interval.t_end, span.t_end)
    if not start < end:
        return None
    overlapping = [
        i for i, s in enumerate(scenes)
        if s.interval.t_start < end and start < s.interval.t_end
    ]
    if not overlapping:
        return TimeInterval(start, end)
    i0, i1 = overlapping[0], overlapping[-1]
    padded_start = scenes[max(0, i0 - 1)].interval.t_start
    padded_end = scenes[min(len(scenes) - 1, i1 + 1)].interval.t_end
    return TimeInterval(min(start, padded_start), max(end, padded_end))


def segment_intention(
    chunk: SceneChunk,
    question: Question,
    gateway: ModelGateway,
    question_id: str,
    on_call=None,
) -> SegmentAnalysis:
    """Map step of intention analysis over one chunk.

    Parsed intervals are clipped to the chunk span and deterministically
    padded by one neighboring scene on each side; trusting the model to pad
    is not robust. A parse failure after repair degrades to no relevant
    intervals at confidence 1.
    """
    prompt = load_template("intention_map").render(
        question=f"{question.text} {question.options_block()}",
        captions=caption_lines(chunk.scenes),
    )
    parts: list = [TextPart(prompt)]
    parts.extend(ImagePart(f) for f in chunk.middle_frames)
    req = ModelRequest(
        stage_tag="intent_map",
        unit_id=f"{question_id}/chunk{chunk.chunk_id}",
        parts=tuple(parts),
    )

    def parser(text: str):
        smap = parse_sections(text)
        reasoning = smap.body(1, "reasoning")
        intervals, warnings = parse_interval_list(smap.body(2, "relevant"))
        confidence, conf_warnings = parse_confidence(smap.body(3, "confidence"))
        key_chars = parse_key_characters(smap.body(4, "key characters"))
        for w in warnings + conf_warnings:
            log.warning("intent_map %s: %s", req.unit_id, w)
        return reasoning, intervals, confidence, key_chars

    try:
        reasoning, intervals, confidence, key_chars = query_parsed(
            gateway, req, parser, on_call
        )
    except (ParseFailure, TransportError) as exc:
        log.warning("intent_map %s degraded: %s", req.unit_id, exc)
        return SegmentAnalysis(chunk.chunk_id, "", (), 1, ())

    padded = []
    for iv in intervals:
        out = _pad_one_scene(iv, chunk.scenes, chunk.span)
        if out is None:
            log.warning("intent_map %s: interval %s outside chunk span, dropped",
                        req.unit_id, iv.to_pair())
            continue
        padded.append(out)
    padded.sort(key=lambda iv: (iv.t_start, iv.t_end))
    return SegmentAnalysis(
        chunk.chunk_id, reasoning, tuple(padded), confidence, tuple(key_chars)
    )


def _analysis_block(analysis: SegmentAnalysis) -> str:
    return (
        f"Segment {analysis.chunk_id}:\n"
        f"1. Reasoning: {analysis.reasoning}\n"
        f"2. Relevant Segments: {render_interval_list(list(analysis.relevant))}\n"
        f"3. Confidence Level: {analysis.confidence}\n"
        f"4. Key Characters: {render_key_characters(list(analysis.key_characters))}"
    )


def _top_confidence_interval(analyses: list[SegmentAnalysis]) -> TimeInterval | None:
    best: tuple[int, float, float] | None = None
    chosen = None
    for a in analyses:
        for iv in a.relevant:
            key = (-a.confidence, iv.t_start, iv.t_end)
            if best is None or key < best:
                best = key
                chosen = iv
    return chosen


def _interval_confidence(interval: TimeInterval, analyses: list[SegmentAnalysis]) -> int:
    conf = 1
    for a in analyses:
        for iv in a.relevant:
            if iv.overlaps(interval):
                conf = max(conf, a.confidence)
    return conf


def reduce_intention(
    analyses: list[SegmentAnalysis],
    question: Question,
    gateway: ModelGateway,
    question_id: str,
    video_span: TimeInterval,
    on_call=None,
) -> GlobalAnalysis:
    """Reduce all chunk analyses into one video-level analysis.

    Overlapping or adjacent intervals are unioned. An empty parsed list falls
    back to the highest-confidence map interval (ties earliest); local
    questions keep at most 10 intervals ranked by map confidence.
    """
    prompt = load_template("intention_reduce").render(
        question=f"{question.text} {question.options_block()}",
        analyses="\n\n".join(_analysis_block(a) for a in analyses),
    )
    req = ModelRequest(
        stage_tag="intent_reduce",
        unit_id=f"{question_id}/reduce",
        parts=(TextPart(prompt),),
    )

    def parser(text: str):
        smap = parse_sections(text)
        reasoning = smap.body(1, "reasoning")
        intervals, warnings = parse_interval_list(smap.body(2, "relevant"))
        key_chars = parse_key_characters(smap.body(3, "key characters"))
        for w in warnings:
            log.warning("intent_reduce %s: %s", req.unit_id, w)
        try:
            flag = parse_local_or_global(smap.body(4, "local or global"))
        except ParseFailure:
            log.warning("intent_reduce %s: unparseable local/global flag, using local",
                        req.unit_id)
            flag = "local"
        return reasoning, intervals, key_chars, flag

    def fallback() -> GlobalAnalysis:
        top = [
            iv
            for a in analyses
            if a.confidence == max((x.confidence for x in analyses), default=1)
            for iv in a.relevant
        ]
        relevant = merge_intervals(top) or [video_span]
        return GlobalAnalysis(
            reasoning="Global reduce failed to parse; using top-confidence map intervals.",
            relevant=tuple(relevant),
            key_characters=(),
            local_or_global="local",
        )

    try:
        reasoning, intervals, key_chars, flag = query_parsed(gateway, req, parser, on_call)
    except (ParseFailure, TransportError) as exc:
        log.warning("intent_reduce %s degraded: %s", req.unit_id, exc)
        return fallback()

    relevant = merge_intervals(intervals)
    if not relevant:
        chosen = _top_confidence_interval(analyses)
        relevant = [chosen] if chosen else [video_span]
    if flag == "local" and len(relevant) > MAX_GLOBAL_INTERVALS:
        ranked = sorted(
            relevant,
            key=lambda iv: (-_interval_confidence(iv, analyses), iv.t_start, iv.t_end),
        )[:MAX_GLOBAL_INTERVALS]
        relevant = sorted(ranked, key=lambda iv: iv.t_start)
    return GlobalAnalysis(reasoning, tuple(relevant), tuple(key_chars), flag)


def _global_block(analysis: GlobalAnalysis) -> str:
    return (
        f"1. Reasoning: {analysis.reasoning}\n"
        f"2. Relevant Segments: {render_interval_list(list(analysis.relevant))}\n"
        f"3. Key Characters: {render_key_characters(list(analysis.key_characters))}\n"
        f"4. Local or Global: {analysis.local_or_global}"
    )


def ensure_options(text: str, question: Question) -> str:
    """Guarantee the proposed query carries the original options."""
    if not question.options:
        return text
    if all(f"({label})" in text for label in question.labels()):
        return text
    return f"{text} Options: {question.options_block()}"


def propose_goals(
    question: Question,
    analysis: GlobalAnalysis,
    gateway: ModelGateway,
    question_id: str,
    on_call=None,
) -> GoalProposal:
    """Let the text model write the local and global perception queries."""
    prompt = load_template("goal_proposal").render(
        question=f"{question.text} {question.options_block()}",
        analysis=_global_block(analysis),
    )
    req = ModelRequest(
        stage_tag="goal_proposal",
        unit_id=f"{question_id}/goal",
        parts=(TextPart(prompt),),
    )

    def parser(text: str):
        smap = parse_sections(text)
        reasoning = smap.body(1, "reasoning")
        local_q = smap.body(2, "local question")
        global_q = smap.body(3, "global question")
        if not local_q or not global_q:
            raise ParseFailure("empty proposed question")
        return reasoning, local_q, global_q

    try:
        reasoning, local_q, global_q = query_parsed(gateway, req, parser, on_call)
    except (ParseFailure, TransportError) as exc:
        log.warning("goal_proposal %s degraded to original question: %s", req.unit_id, exc)
        original = question.text
        return GoalProposal(
            reasoning="Goal proposal failed; reusing the original question.",
            local_question=ensure_options(original, question),
            global_question=ensure_options(original, question),
        )
    return GoalProposal(
        reasoning=reasoning,
        local_question=ensure_options(local_q, question),
        global_question=ensure_options(global_q, question),
    )


def _materialize(
    refs: list[FrameRef], frame_source: FrameSource, video_path: str
) -> list[FrameRef]:
    times = [f.timestamp for f in refs]
    if not times:
        return []
    return frame_source.frames(refs[0].video_id, video_path, times)


def perceive_local(
    interval: TimeInterval,
    local_question: str,
    cfg: SamplingConfig,
    gateway: ModelGateway,
    frame_source: FrameSource,
    video_id: str,
    video_path: str,
    question_id: str,
    index: int,
    on_call=None,
) -> PerceptionResult:
    """Densely inspect one relevant interval with the local question."""
    refs = sample_local(interval, cfg, video_id)
    try:
        frames = _materialize(refs, frame_source, video_path)
    except FrameExtractionError as exc:
        log.warning("perceive_local %s/%d frames unavailable: %s", question_id, index, exc)
        return PerceptionResult("local", interval, local_question, "", (), degraded=True)
    req = ModelRequest(
        stage_tag="perceive_local",
        unit_id=f"{question_id}/local{index}",
        parts=(TextPart(local_question),) + tuple(ImagePart(f) for f in frames),
    )
    try:
        response = gateway.query(req, on_call)
    except TransportError as exc:
        log.warning("perceive_local %s/%d degraded: %s", question_id, index, exc)
        return PerceptionResult("local", interval, local_question, "", tuple(frames), degraded=True)
    return PerceptionResult("local", interval, local_question, response.text, tuple(frames))


def perceive_global(
    relevant: tuple[TimeInterval, ...],
    global_question: str,
    store: CaptionStore,
    cfg: SamplingConfig,
    gateway: ModelGateway,
    frame_source: FrameSource,
    video_path: str,
    question_id: str,
    include_captions: bool = True,
    on_call=None,
) -> PerceptionResult:
    """One sparse pass over the midpoints of all relevant intervals."""
    refs = sample_global(list(relevant), cfg, store.video_id)
    try:
        frames = _materialize(refs, frame_source, video_path)
    except FrameExtractionError as exc:
        log.warning("perceive_global %s frames unavailable: %s", question_id, exc)
        return PerceptionResult("global", None, global_question, "", (), degraded=True)
    parts: list = [TextPart(global_question)]
    if include_captions:
        blocks = []
        for iv in relevant:
            covered = [s for s in store.scenes if s.interval.overlaps(iv)]
            if covered:
                blocks.append(
                    f"Captions for segment ({format_seconds(iv.t_start)}, "
                    f"{format_seconds(iv.t_end)}):\n{caption_lines(covered)}"
                )
        if blocks:
            parts.append(TextPart("\n\n".join(blocks)))
    parts.extend(ImagePart(f) for f in frames)
    req = ModelRequest(
        stage_tag="perceive_global",
        unit_id=f"{question_id}/global",
        parts=tuple(parts),
    )
    try:
        response = gateway.query(req, on_call)
    except TransportError as exc:
        log.warning("perceive_global %s degraded: %s", question_id, exc)
        return PerceptionResult("global", None, global_question, "", tuple(frames), degraded=True)
    return PerceptionResult("global", None, global_question, response.text, tuple(frames))


def _perceptions_block(perceptions: list[PerceptionResult]) -> str:
    blocks = []
    for p in perceptions:
        if p.scope == "local" and p.interval is not None:
            head = (
                f"Local analysis of segment ({format_seconds(p.interval.t_start)}, "
                f"{format_seconds(p.interval.t_end)})"
            )
        else:
            head = "Global analysis across segments"
        body = p.answer if p.answer else "(no result: perception degraded)"
        blocks.append(f"{head}:\n{body}")
    return "\n\n".join(blocks) if blocks else "(no perception results)"


def reduce_answer(
    question: Question,
    analysis: GlobalAnalysis,
    goals: GoalProposal,
    perceptions: list[PerceptionResult],
    gateway: ModelGateway,
    question_id: str,
    on_call=None,
) -> FinalAnswer:
    """Merge everything into the final letter; guessing 'A' when parsing fails twice."""
    prompt = load_template("answer").render(
        question=f"{question.text} {question.options_block()}",
        analysis=_global_block(analysis),
        goals=(
            f"Local question: {goals.local_question}\n"
            f"Global question: {goals.global_question}"
        ),
        perceptions=_perceptions_block(perceptions),
    )
    req = ModelRequest(
        stage_tag="answer_reduce",
        unit_id=f"{question_id}/answer",
        parts=(TextPart(prompt),),
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
        reasoning, letter = query_parsed(gateway, req, parser, on_call)
    except (ParseFailure, TransportError) as exc:
        return FinalAnswer(
            reasoning=f"Unparseable answer after retry ({exc}); guessing A.", letter="A"
        )
    return FinalAnswer(reasoning, letter)


def answer_question(
    store: CaptionStore,
    question: Question,
    cfg: SamplingConfig,
    gateway: ModelGateway,
    frame_source: FrameSource,
    options: AnalysisOptions = AnalysisOptions(),
    video_path: str = "",
) -> tuple[FinalAnswer, AnswerTrace]:
    """Run the full stage-B pipeline for one question.

    Map fan-outs run in parallel; both reduces wait on all their maps, and the
    trace is assembled in stage order regardless of completion order.
    """
    recorder = _CallRecorder()
    question_id = question.question_id
    trace = AnswerTrace(question_id=question_id, video_id=store.video_id)

    with_frames = options.intention_frames == "on" or (
        options.intention_frames == "auto" and store.duration < options.hour_scale_s
    )
    chunks = chunk_scenes(store, cfg, with_frames, frame_source, video_path)

    def intent_one(chunk: SceneChunk) -> SegmentAnalysis:
        return segment_intention(chunk, question, gateway, question_id, recorder)

    trace.segment_analyses = parallel_map(intent_one, chunks, options.workers)

    video_span = TimeInterval(
        store.scenes[0].interval.t_start, store.scenes[-1].interval.t_end
    )
    analysis = reduce_intention(
        trace.segment_analyses, question, gateway, question_id, video_span, recorder
    )
    trace.global_analysis = analysis

    goals = propose_goals(question, analysis, gateway, question_id, recorder)
    trace.goal_proposal = goals

    def local_one(pair: tuple[int, TimeInterval]) -> PerceptionResult:
        index, interval = pair
        return perceive_local(
            interval, goals.local_question, cfg, gateway, frame_source,
            store.video_id, video_path, question_id, index, recorder,
        )

    perceptions = parallel_map(
        local_one, list(enumerate(analysis.relevant)), options.workers
    )
    run_global = options.global_perception == "always" or (
        options.global_perception == "auto"
        and (analysis.local_or_global == "global" or len(analysis.relevant) > 1)
    )
    if run_global:
        perceptions.append(
            perceive_global(
                analysis.relevant, goals.global_question, store, cfg, gateway,
                frame_source, video_path, question_id,
                include_captions=options.global_captions, on_call=recorder,
            )
        )
    trace.perceptions = perceptions

    final = reduce_answer(
        question, analysis, goals, perceptions, gateway, question_id, recorder
    )
    trace.final = final
    trace.calls = recorder.sorted_calls()
    return final, trace
