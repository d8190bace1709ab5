"""Stage A map-reduce: scene splitting and dense descriptions per clip, then
character association, canonical renaming, and caption rewriting.

Map calls are independent per unit and run under the gateway's bounded
parallelism; the reduce over characters is a single-threaded left fold. All
character names are unit-qualified (``person_a_u3``) from extraction onward,
so association triples and the union-find reduce are unambiguous across units.
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .core import (
    NAME_TOKEN_RE,
    CharacterRecord,
    CharacterRegistry,
    FrameRef,
    ImagePart,
    ModelRequest,
    Scene,
    TextPart,
    TimeInterval,
)
from .errors import ParseFailure, TransportError
from .frames import FrameExtractionError, FrameSource
from .framing import (
    CaptionUnit,
    CharacterUnit,
    SamplingConfig,
    even_subsample,
    frame_time,
    plan_caption_units,
    plan_character_units,
)
from .gateway import ModelGateway
from .store import CaptionStore, save, store_lock
from .structured import (
    load_template,
    parse_character_details,
    parse_frame_list,
    parse_merge_tuples,
    parse_name_list,
    parse_sections,
    parse_yes_no,
    query_parsed,
)

log = logging.getLogger(__name__)

_UNIT_SUFFIX_RE = re.compile(r"_u(\d+)$")

# How many records' frames may share one association or description request;
# two batches of this size stay within the 32-image cap.
ASSOC_BATCH = 16


@dataclass(frozen=True, slots=True)
class SceneDraft:
    """A scene boundary decision before any description exists."""

    interval: TimeInterval
    source_unit_id: int


def parallel_map(fn, items, workers: int) -> list:
    """Order-preserving map, optionally fanned out over a thread pool."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def grid_times(interval: TimeInterval, fps: float) -> list[float]:
    """Timestamps of the global fps grid falling inside the interval."""
    start_k = interval.t_start * fps
    k0 = round(start_k) if abs(start_k - round(start_k)) < 1e-9 else math.ceil(start_k)
    out = []
    k = k0
    while k / fps < interval.t_end - 1e-9:
        out.append(k / fps)
        k += 1
    return out


def split_scenes(
    unit: CaptionUnit,
    frames: list[FrameRef],
    gateway: ModelGateway,
    video_id: str,
) -> list[SceneDraft]:
    """Ask the vision model whether the clip is one scene; cut it where not.

    Transition indices outside the unit's frame range are dropped with a
    warning; a parse failure after repair degrades to one whole-unit draft.
    """
    prompt = load_template("scene_split").render()
    req = ModelRequest(
        stage_tag="scene_split",
        unit_id=f"{video_id}/unit{unit.unit_id}",
        parts=(TextPart(prompt),) + tuple(ImagePart(f) for f in frames),
    )

    def parser(text: str):
        smap = parse_sections(text)
        single = parse_yes_no(smap.body(2, "single"))
        if single:
            return []
        return parse_frame_list(smap.body(3, "frames"))

    try:
        indices = query_parsed(gateway, req, parser)
    except (ParseFailure, TransportError) as exc:
        log.warning("split %s/unit%s degraded to single scene: %s", video_id, unit.unit_id, exc)
        return [SceneDraft(unit.interval, unit.unit_id)]

    boundaries = []
    for idx in sorted(set(indices)):
        if idx <= 0:
            continue  # a cut at frame 0 is the unit start, not a new scene
        if idx >= len(unit.frame_times):
            log.warning(
                "split %s/unit%s: frame index %d out of range, dropped",
                video_id, unit.unit_id, idx,
            )
            continue
        boundaries.append(frame_time(unit, idx))

    edges = [unit.interval.t_start] + boundaries + [unit.interval.t_end]
    return [
        SceneDraft(TimeInterval(a, b), unit.unit_id)
        for a, b in zip(edges, edges[1:])
        if a < b
    ]


def merge_boundary(
    prev_last_frame: FrameRef,
    first_scene_frames: list[FrameRef],
    gateway: ModelGateway,
    video_id: str,
    boundary_id: int,
) -> bool:
    """True iff the first scene after a unit boundary continues the previous scene.

    Parse failures answer False: never merging is safer than merging wrongly.
    """
    prompt = load_template("scene_merge").render()
    req = ModelRequest(
        stage_tag="scene_merge",
        unit_id=f"{video_id}/b{boundary_id}",
        parts=(
            TextPart(prompt),
            ImagePart(prev_last_frame),
            *(ImagePart(f) for f in first_scene_frames),
        ),
    )
    try:
        return query_parsed(gateway, req, parse_yes_no)
    except (ParseFailure, TransportError):
        return False


def extract_characters(
    unit: CharacterUnit,
    frames: list[FrameRef],
    gateway: ModelGateway,
    video_id: str,
) -> list[CharacterRecord]:
    """Pull salient characters/objects out of a 2 min window.

    Names come back unit-qualified; the details section is authoritative when
    it disagrees with the appeared list. Representative frame indices beyond
    the window clamp to the last frame. On parse failure the window simply
    contributes no memory.
    """
    prompt = load_template("character_selection").render()
    req = ModelRequest(
        stage_tag="char_extract",
        unit_id=f"{video_id}/cunit{unit.unit_id}",
        parts=(TextPart(prompt),) + tuple(ImagePart(f) for f in frames),
    )

    def parser(text: str):
        smap = parse_sections(text)
        appeared = parse_name_list(smap.body(1, "appeared"))
        details = parse_character_details(smap.body(2, "character details"))
        if not details and smap.by_index(2) is None:
            raise ParseFailure("no character details section")
        return appeared, details

    try:
        appeared, details = query_parsed(gateway, req, parser)
    except (ParseFailure, TransportError) as exc:
        log.warning("char_extract %s/cunit%s yielded nothing: %s", video_id, unit.unit_id, exc)
        return []

    if set(appeared) != {name for name, _, _ in details}:
        log.warning(
            "char_extract %s/cunit%s: appeared list disagrees with details; details win",
            video_id, unit.unit_id,
        )
    records = []
    seen = set()
    for name, description, frame_idx in details:
        if name in seen:
            continue
        seen.add(name)
        if frame_idx >= len(frames):
            log.warning(
                "char_extract %s/cunit%s: frame %d clamped to last",
                video_id, unit.unit_id, frame_idx,
            )
            frame_idx = len(frames) - 1
        records.append(
            CharacterRecord(
                name=f"{name}_u{unit.unit_id}",
                description=description,
                representative_frame=frames[frame_idx],
            )
        )
    return records


def record_unit(record: CharacterRecord) -> int | None:
    """Character-unit ordinal encoded in a qualified record name."""
    m = _UNIT_SUFFIX_RE.search(record.name)
    return int(m.group(1)) if m else None


def _memory_parts(records: list[CharacterRecord]) -> tuple[str, list]:
    lines = []
    parts = []
    for rec in records:
        lines.append(f"<{rec.name}>: {rec.description}")
        parts.append(TextPart(f"Representative frame of <{rec.name}>:"))
        parts.append(ImagePart(rec.representative_frame))
    return "\n".join(lines) if lines else "(empty)", parts


def describe_scene(
    draft: SceneDraft,
    prev_caption: str,
    records: list[CharacterRecord],
    scene_frames: list[FrameRef],
    gateway: ModelGateway,
    video_id: str,
    scene_id: int,
    cfg: SamplingConfig,
) -> Scene:
    """Dense-caption one scene with the character memory prepended.

    Character frames consume image slots first; scene frames are evenly
    truncated into the remainder of the cap. On a double parse failure the
    raw response becomes the detailed text and appeared names fall back to a
    token scan.
    """
    records = records[: ASSOC_BATCH]
    budget = max(1, cfg.frame_cap - len(records))
    scene_frames = even_subsample(scene_frames, budget)

    memory_text, memory_parts = _memory_parts(records)
    prompt = load_template("dense_caption").render(
        visual_memory=memory_text,
        previous_caption=prev_caption if prev_caption else "(none)",
    )
    parts = [TextPart(prompt), *memory_parts, *(ImagePart(f) for f in scene_frames)]
    req = ModelRequest(
        stage_tag="describe",
        unit_id=f"{video_id}/scene{scene_id}",
        parts=tuple(parts),
    )

    known = {r.name for r in records}

    def parser(text: str):
        smap = parse_sections(text)
        brief = smap.body(1, "brief")
        appeared = parse_name_list(smap.body(2, "appeared"))
        detailed = smap.body(3, "detailed")
        if not detailed:
            raise ParseFailure("empty detailed description")
        return brief, appeared, detailed

    raw_text = ""

    def capture(unused_req, response):
        nonlocal raw_text
        raw_text = response.text

    try:
        brief, appeared, detailed = query_parsed(gateway, req, parser, on_call=capture)
    except (ParseFailure, TransportError):
        scanned = sorted(set(NAME_TOKEN_RE.findall(raw_text)))
        return Scene(scene_id, draft.interval, "", raw_text, tuple(scanned))

    mentioned = set(NAME_TOKEN_RE.findall(brief)) | set(NAME_TOKEN_RE.findall(detailed))
    appeared = tuple(n for n in appeared if n in mentioned and n in known)
    return Scene(scene_id, draft.interval, brief, detailed, appeared)


def associate_characters(
    accumulated: list[CharacterRecord],
    incoming: list[CharacterRecord],
    gateway: ModelGateway,
    video_id: str,
    fold_step: int,
) -> list[tuple[str, str, str]]:
    """Compare the registry so far against one window's cast, batched so no
    request carries more than 2x16 record frames. A parse failure yields no
    merges for that batch: duplicate characters are preferable to wrong merges.
    """
    if not accumulated or not incoming:
        return []
    triples: list[tuple[str, str, str]] = []
    acc_batches = [accumulated[i:i + ASSOC_BATCH] for i in range(0, len(accumulated), ASSOC_BATCH)]
    inc_batches = [incoming[i:i + ASSOC_BATCH] for i in range(0, len(incoming), ASSOC_BATCH)]
    prompt = load_template("character_merge").render()
    for ai, acc in enumerate(acc_batches):
        for bi, inc in enumerate(inc_batches):
            _, acc_parts = _memory_parts(acc)
            _, inc_parts = _memory_parts(inc)
            req = ModelRequest(
                stage_tag="char_associate",
                unit_id=f"{video_id}/assoc{fold_step}.{ai}.{bi}",
                parts=(
                    TextPart(prompt),
                    TextPart("Set 1:"),
                    *acc_parts,
                    TextPart("Set 2:"),
                    *inc_parts,
                ),
            )

            acc_names = {r.name for r in acc}
            inc_names = {r.name for r in inc}

            def parser(text: str):
                m = re.search(r"\[Repeated Characters and Objects\]\s*:?", text, re.IGNORECASE)
                body = text[m.end():] if m else text
                parsed, warnings = parse_merge_tuples(body)
                for w in warnings:
                    log.warning("associate %s: %s", req.unit_id, w)
                return parsed

            try:
                parsed = query_parsed(gateway, req, parser)
            except (ParseFailure, TransportError) as exc:
                log.warning("associate %s failed, no merges: %s", req.unit_id, exc)
                continue
            for a, b, better in parsed:
                if a not in acc_names or b not in inc_names:
                    log.warning("associate %s: unknown name in (%s, %s, %s), dropped",
                                req.unit_id, a, b, better)
                    continue
                triples.append((a, b, better))
    return triples


class _UnionFind:
    def __init__(self, names):
        self.parent = {n: n for n in names}

    def find(self, x: str) -> str:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def _kind_of(name: str) -> str:
    m = _UNIT_SUFFIX_RE.search(name)
    base = name[: m.start()] if m else name
    parts = base.rsplit("_", 1)
    if len(parts) == 2 and re.fullmatch(r"[a-z]+", parts[1]) and len(parts[1]) <= 2:
        base = parts[0]
    return base or "object"


def _letter(i: int) -> str:
    # a..z, then aa, ab, ...
    out = ""
    i += 1
    while i > 0:
        i, rem = divmod(i - 1, 26)
        out = chr(ord("a") + rem) + out
    return out


def canonicalize(
    records: list[CharacterRecord],
    triples: list[tuple[str, str, str]],
) -> CharacterRegistry:
    """Union-find over qualified names; each component keeps its best record.

    The canonical record of a component is the member with the most
    better-votes (ties break to the lexicographically smallest name); fresh
    names reuse the canonical record's kind prefix and are assigned in
    first-appearance order, which makes the rename map deterministic.
    """
    order = {rec.name: i for i, rec in enumerate(records)}
    by_name = {rec.name: rec for rec in records}
    uf = _UnionFind(order)
    votes: dict[str, int] = {}
    for a, b, better in triples:
        if a not in order or b not in order or better not in order:
            continue
        uf.union(a, b)
        votes[better] = votes.get(better, 0) + 1

    components: dict[str, list[str]] = {}
    for name in order:
        components.setdefault(uf.find(name), []).append(name)

    comps = sorted(components.values(), key=lambda c: min(order[n] for n in c))
    kind_counts: dict[str, int] = {}
    new_records: list[CharacterRecord] = []
    rename_map: dict[str, str] = {}
    all_old = set(order)
    for members in comps:
        best_votes = max(votes.get(n, 0) for n in members)
        canonical_name = min(n for n in members if votes.get(n, 0) == best_votes)
        canonical = by_name[canonical_name]
        kind = _kind_of(canonical_name)
        idx = kind_counts.get(kind, 0)
        # A fresh name may only coincide with an old name of its own component,
        # otherwise applying the rename map twice would chain renames.
        while True:
            fresh = f"{kind}_{_letter(idx)}"
            idx += 1
            if fresh not in all_old or fresh in members:
                break
        kind_counts[kind] = idx
        new_records.append(replace(canonical, name=fresh))
        for n in members:
            rename_map[n] = fresh
    return CharacterRegistry(tuple(new_records), rename_map)


def _apply_rename(text: str, rename_map: dict[str, str]) -> tuple[str, list[str]]:
    missing: list[str] = []

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name in rename_map:
            return f"<{rename_map[name]}>"
        missing.append(name)
        return m.group(0)

    return NAME_TOKEN_RE.sub(sub, text), missing


def rewrite_scene(scene: Scene, rename_map: dict[str, str]) -> Scene:
    brief, miss_b = _apply_rename(scene.brief, rename_map)
    detailed, miss_d = _apply_rename(scene.detailed, rename_map)
    for name in set(miss_b + miss_d):
        log.warning("rewrite scene %d: token <%s> has no rename entry", scene.scene_id, name)
    appeared = tuple(rename_map.get(n, n) for n in scene.appeared_characters)
    appeared = tuple(dict.fromkeys(appeared))
    return Scene(scene.scene_id, scene.interval, brief, detailed, appeared)


def _strip_tokens(text: str) -> str:
    return NAME_TOKEN_RE.sub("", text)


def rewrite_captions(
    scenes: list[Scene],
    rename_map: dict[str, str],
    gateway: ModelGateway | None = None,
    mode: str = "deterministic",
    video_id: str = "",
    workers: int = 1,
) -> list[Scene]:
    """Replace every <old> token with its canonical name.

    Deterministic mode is pure substitution. Model mode prompts per scene and
    keeps the output only if it changed nothing but names; otherwise the
    deterministic result is used.
    """
    if mode == "deterministic" or not rename_map:
        return [rewrite_scene(s, rename_map) for s in scenes]
    if gateway is None:
        raise ValueError("model rewrite mode needs a gateway")

    template = load_template("caption_rewrite")
    rename_list = "\n".join(f"{old} -> {new}" for old, new in sorted(rename_map.items()))

    def one(scene: Scene) -> Scene:
        deterministic = rewrite_scene(scene, rename_map)
        old_block = (
            f"[1. Brief Description]: {scene.brief}\n"
            f"[2. Appeared Characters]: [{', '.join(scene.appeared_characters)}]\n"
            f"[3. Detailed Description]: {scene.detailed}"
        )
        req = ModelRequest(
            stage_tag="caption_rewrite",
            unit_id=f"{video_id}/rewrite{scene.scene_id}",
            parts=(TextPart(template.render(old_description=old_block, rename_list=rename_list)),),
        )

        def parser(text: str):
            smap = parse_sections(text)
            return (
                smap.body(1, "brief"),
                parse_name_list(smap.body(2, "appeared")),
                smap.body(3, "detailed"),
            )

        try:
            brief, appeared, detailed = query_parsed(gateway, req, parser)
        except (ParseFailure, TransportError):
            return deterministic
        candidate = Scene(scene.scene_id, scene.interval, brief, detailed, tuple(appeared))
        old_names = set(rename_map) - set(rename_map.values())
        touched = candidate.name_tokens() | set(candidate.appeared_characters)
        if touched & old_names:
            return deterministic
        if (
            _strip_tokens(brief) != _strip_tokens(scene.brief)
            or _strip_tokens(detailed) != _strip_tokens(scene.detailed)
            or tuple(appeared) != deterministic.appeared_characters
        ):
            return deterministic
        return candidate

    return parallel_map(one, scenes, workers)


def _safe_frames(
    source: FrameSource, video_id: str, video_path: str, times: list[float]
) -> list[FrameRef] | None:
    try:
        return source.frames(video_id, video_path, times)
    except FrameExtractionError as exc:
        log.warning("frame extraction failed for %s (%d stamps): %s", video_id, len(times), exc)
        return None


def run_captioning(
    video_id: str,
    video_path: str,
    duration: float,
    cfg: SamplingConfig,
    gateway: ModelGateway,
    frame_source: FrameSource,
    store_root,
    workers: int = 4,
    rewrite_mode: str = "deterministic",
    describe_window_units: int = 8,
    stop_after_phase: str | None = None,
) -> CaptionStore:
    """Build (or resume) the caption store for one video.

    Phases checkpoint after split, describe, and reduce; a rerun picks up at
    the first incomplete phase and produces a byte-identical final store.
    stop_after_phase ends the run right after that checkpoint, simulating a
    kill at the phase boundary (also handy for staging long live runs).
    """
    from . import store as store_mod

    lock = store_lock(store_root, video_id)
    with lock:
        if store_mod.exists(video_id, store_root):
            cstore = store_mod.load(video_id, store_root)
        else:
            cstore = CaptionStore(video_id=video_id, duration=duration)

        units = plan_caption_units(cstore.duration, cfg)
        cunits = plan_character_units(cstore.duration, cfg)

        if not cstore.phases["split"]:
            def split_one(unit: CaptionUnit) -> list[SceneDraft]:
                frames = _safe_frames(frame_source, video_id, video_path, list(unit.frame_times))
                if frames is None:
                    return [SceneDraft(unit.interval, unit.unit_id)]
                return split_scenes(unit, frames, gateway, video_id)

            def extract_one(cunit: CharacterUnit) -> list[CharacterRecord]:
                frames = _safe_frames(frame_source, video_id, video_path, list(cunit.frame_times))
                if frames is None:
                    return []
                return extract_characters(cunit, frames, gateway, video_id)

            per_unit_drafts = parallel_map(split_one, units, workers)
            per_unit_records = parallel_map(extract_one, cunits, workers)

            def merge_one(boundary: int) -> bool:
                prev_unit = units[boundary - 1]
                if not prev_unit.frame_times:
                    return False
                prev_last = _safe_frames(
                    frame_source, video_id, video_path, [prev_unit.frame_times[-1]]
                )
                first_draft = per_unit_drafts[boundary][0]
                first_times = grid_times(first_draft.interval, cfg.caption_fps)
                first_frames = _safe_frames(frame_source, video_id, video_path, first_times)
                if prev_last is None or first_frames is None:
                    return False
                return merge_boundary(prev_last[0], first_frames, gateway, video_id, boundary)

            merge_flags = parallel_map(merge_one, range(1, len(units)), workers)

            drafts: list[SceneDraft] = list(per_unit_drafts[0])
            for boundary, unit_drafts in enumerate(per_unit_drafts[1:], start=1):
                unit_drafts = list(unit_drafts)
                if merge_flags[boundary - 1] and drafts and unit_drafts:
                    fused = SceneDraft(
                        TimeInterval(drafts[-1].interval.t_start, unit_drafts[0].interval.t_end),
                        drafts[-1].source_unit_id,
                    )
                    drafts[-1] = fused
                    unit_drafts = unit_drafts[1:]
                drafts.extend(unit_drafts)

            cstore.scenes = [
                Scene(i, d.interval, "", "", ()) for i, d in enumerate(drafts)
            ]
            all_records = [rec for recs in per_unit_records for rec in recs]
            cstore.registry = CharacterRegistry(tuple(all_records), {})
            cstore.mark("split")
            save(cstore, store_root)
            if stop_after_phase == "split":
                return cstore

        if not cstore.phases["describe"]:
            records_by_cunit: dict[int, list[CharacterRecord]] = {}
            for rec in cstore.registry.records:
                cu = record_unit(rec)
                if cu is not None:
                    records_by_cunit.setdefault(cu, []).append(rec)

            drafts = [SceneDraft(s.interval, int(s.interval.t_start // cfg.caption_unit_s))
                      for s in cstore.scenes]
            window_span = max(1, describe_window_units)
            windows: dict[int, list[int]] = {}
            for i, d in enumerate(drafts):
                windows.setdefault(d.source_unit_id // window_span, []).append(i)

            described: dict[int, Scene] = {}

            def describe_window(indices: list[int]) -> list[tuple[int, Scene]]:
                out = []
                prev_caption = ""
                for i in indices:
                    draft = drafts[i]
                    cunit_id = int(draft.interval.t_start // cfg.character_unit_s)
                    records = records_by_cunit.get(cunit_id, [])
                    times = grid_times(draft.interval, cfg.caption_fps)
                    frames = _safe_frames(frame_source, video_id, video_path, times) or []
                    scene = describe_scene(
                        draft, prev_caption, records, frames, gateway, video_id, i, cfg
                    )
                    prev_caption = scene.brief or scene.detailed[:400]
                    out.append((i, scene))
                return out

            results = parallel_map(
                describe_window, [windows[w] for w in sorted(windows)], workers
            )
            for chunk in results:
                for i, scene in chunk:
                    described[i] = scene
            cstore.scenes = [described[i] for i in range(len(drafts))]
            cstore.mark("describe")
            save(cstore, store_root)
            if stop_after_phase == "describe":
                return cstore

        if not cstore.phases["reduce"]:
            records_by_cunit = {}
            for rec in cstore.registry.records:
                cu = record_unit(rec)
                if cu is not None:
                    records_by_cunit.setdefault(cu, []).append(rec)

            accumulated: list[CharacterRecord] = []
            triples: list[tuple[str, str, str]] = []
            for cu in sorted(records_by_cunit):
                incoming = records_by_cunit[cu]
                triples.extend(
                    associate_characters(accumulated, incoming, gateway, video_id, cu)
                )
                accumulated.extend(incoming)

            registry = canonicalize(list(cstore.registry.records), triples)
            cstore.scenes = rewrite_captions(
                cstore.scenes, registry.rename_map, gateway, rewrite_mode, video_id, workers
            )
            cstore.registry = registry
            cstore.mark("reduce")
            save(cstore, store_root)

    return cstore
