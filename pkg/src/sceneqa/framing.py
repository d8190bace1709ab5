"""Deterministic planning of map units and frame-sampling timestamps.

This is the only module that decides which timestamps become model-visible
frames; everything downstream works with the plans produced here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import FrameRef, TimeInterval
from .errors import InvalidInputError


@dataclass(frozen=True, slots=True)
class SamplingConfig:
    """Knobs for unit planning and frame sampling.

    chunk_scenes defaults to 32 scenes per analysis chunk; 50 is a documented
    alternative and both are accepted.
    """

    caption_unit_s: float = 10.0
    caption_fps: float = 2.0
    character_unit_s: float = 120.0
    character_fps: float = 0.25
    frame_cap: int = 32
    local_frames: int = 32
    chunk_scenes: int = 32

    def __post_init__(self) -> None:
        if self.frame_cap > 32:
            raise InvalidInputError("frame_cap must be <= 32")
        if self.local_frames > self.frame_cap:
            raise InvalidInputError("local_frames must be <= frame_cap")


@dataclass(frozen=True, slots=True)
class CaptionUnit:
    """A nominal 10 s clip with its 2 fps frame grid (<= 20 frames)."""

    unit_id: int
    interval: TimeInterval
    frame_times: tuple[float, ...]
    fps: float


@dataclass(frozen=True, slots=True)
class CharacterUnit:
    """A nominal 2 min window with its 0.25 fps frame grid (<= 30 frames)."""

    unit_id: int
    interval: TimeInterval
    frame_times: tuple[float, ...]
    fps: float


def _plan_units(duration: float, unit_s: float, fps: float) -> list[tuple[TimeInterval, tuple[float, ...]]]:
    if duration <= 0:
        raise InvalidInputError(f"duration must be positive, got {duration}")
    n_units = math.ceil(duration / unit_s)
    max_frames = round(unit_s * fps)
    out = []
    for i in range(n_units):
        start = i * unit_s
        end = min((i + 1) * unit_s, duration)
        times = []
        for k in range(max_frames):
            t = start + k / fps
            if t >= end:
                break
            times.append(t)
        out.append((TimeInterval(start, end), tuple(times)))
    return out


def plan_caption_units(duration: float, cfg: SamplingConfig) -> list[CaptionUnit]:
    """Tile [0, duration) into caption units; the last unit may be truncated."""
    plans = _plan_units(duration, cfg.caption_unit_s, cfg.caption_fps)
    return [
        CaptionUnit(i, interval, times, cfg.caption_fps)
        for i, (interval, times) in enumerate(plans)
    ]


def plan_character_units(duration: float, cfg: SamplingConfig) -> list[CharacterUnit]:
    """Tile [0, duration) into character-extraction windows."""
    plans = _plan_units(duration, cfg.character_unit_s, cfg.character_fps)
    return [
        CharacterUnit(i, interval, times, cfg.character_fps)
        for i, (interval, times) in enumerate(plans)
    ]


def frame_time(unit: CaptionUnit | CharacterUnit, index: int) -> float:
    """Timestamp of the unit frame at ``index``.

    Raises IndexError for out-of-range indices; callers treat that as the
    model hallucinating frame indices (a parse-level failure).
    """
    if not 0 <= index < len(unit.frame_times):
        raise IndexError(
            f"frame index {index} out of range for unit {unit.unit_id} "
            f"({len(unit.frame_times)} frames)"
        )
    return unit.interval.t_start + index / unit.fps


def sample_local(interval: TimeInterval, cfg: SamplingConfig, video_id: str) -> list[FrameRef]:
    """Evenly spaced frames across one interval for dense local perception.

    The frame count is min(local_frames, floor(duration)) but at least 1,
    i.e. never denser than one frame per second; frames sit at the midpoints
    of equal sub-intervals, so they are strictly inside the interval.
    """
    n = max(1, min(cfg.local_frames, int(math.floor(interval.duration))))
    n = min(n, cfg.frame_cap)
    step = interval.duration / n
    return [
        FrameRef(video_id, interval.t_start + (k + 0.5) * step)
        for k in range(n)
    ]


def even_subsample(items: list, cap: int) -> list:
    """Keep at most ``cap`` items, evenly spaced, always keeping first and last."""
    n = len(items)
    if n <= cap:
        return list(items)
    if cap == 1:
        return [items[0]]
    indices = [int(i * (n - 1) / (cap - 1) + 0.5) for i in range(cap)]
    return [items[i] for i in indices]


def sample_global(
    intervals: list[TimeInterval], cfg: SamplingConfig, video_id: str
) -> list[FrameRef]:
    """One midpoint frame per interval, evenly subsampled down to the cap.

    Subsampling keeps the first and last interval: index i of the kept frame
    list maps to round(i * (n-1) / (cap-1)) in the full midpoint list.
    """
    if not intervals:
        raise InvalidInputError("sample_global needs at least one interval")
    mids = [iv.midpoint for iv in sorted(intervals, key=lambda iv: iv.t_start)]
    mids = even_subsample(mids, cfg.frame_cap)
    return [FrameRef(video_id, t) for t in mids]
