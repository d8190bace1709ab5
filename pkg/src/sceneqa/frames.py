"""Frame acquisition: a subprocess decoder contract plus a synthetic source.

The production path shells out to a configurable command template that takes
(video path, timestamp list, output directory) and must leave one image per
timestamp behind, named ``<seconds-with-one-decimal>.png``, exiting 0. Any
other outcome degrades the requesting unit instead of aborting the run. The
synthetic source generates deterministic tiny PNGs in-process and backs the
offline test fixtures.
"""

from __future__ import annotations

import hashlib
import io
import shlex
import subprocess
import tempfile
import threading
from pathlib import Path
from typing import Protocol

from PIL import Image

from .core import FrameRef, format_seconds
from .errors import SceneQAError


class FrameExtractionError(SceneQAError):
    """The external decoder failed the contract for a batch of timestamps."""


class FrameSource(Protocol):
    def frames(self, video_id: str, video_path: str, timestamps: list[float]) -> list[FrameRef]:
        ...


class SyntheticFrameSource:
    """Deterministic generated frames; pixel color is a pure function of
    (video_id, timestamp), so request digests are stable across runs."""

    def __init__(self, size: tuple[int, int] = (16, 9)):
        self._size = size
        self._cache: dict[tuple[str, str], bytes] = {}
        self._lock = threading.Lock()

    def _render(self, video_id: str, stamp: str) -> bytes:
        seed = hashlib.sha256(f"{video_id}@{stamp}".encode()).digest()
        img = Image.new("RGB", self._size, (seed[0], seed[1], seed[2]))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()

    def frames(self, video_id: str, video_path: str, timestamps: list[float]) -> list[FrameRef]:
        out = []
        for t in timestamps:
            stamp = format_seconds(t)
            key = (video_id, stamp)
            with self._lock:
                data = self._cache.get(key)
                if data is None:
                    data = self._render(video_id, stamp)
                    self._cache[key] = data
            out.append(FrameRef(video_id, t, data=data))
        return out


class CommandFrameSource:
    """Invoke an external decoder per batch via a command template.

    The template must contain the placeholders {video}, {out_dir} and
    {timestamps}; timestamps are substituted space-separated with one
    decimal. Example: ``python -m sceneqa.extract_frames {video} {out_dir} {timestamps}``.
    """

    def __init__(self, command_template: str, timeout: float = 300.0):
        for placeholder in ("{video}", "{out_dir}", "{timestamps}"):
            if placeholder not in command_template:
                raise FrameExtractionError(f"command template missing {placeholder}")
        self.command_template = command_template
        self.timeout = timeout

    def frames(self, video_id: str, video_path: str, timestamps: list[float]) -> list[FrameRef]:
        stamps = [format_seconds(t) for t in timestamps]
        with tempfile.TemporaryDirectory(prefix="sceneqa_frames_") as tmp:
            command = self.command_template.format(
                video=shlex.quote(video_path),
                out_dir=shlex.quote(tmp),
                timestamps=" ".join(stamps),
            )
            try:
                proc = subprocess.run(
                    command, shell=True, capture_output=True, timeout=self.timeout
                )
            except subprocess.TimeoutExpired as exc:
                raise FrameExtractionError(f"decoder timed out: {command}") from exc
            if proc.returncode != 0:
                raise FrameExtractionError(
                    f"decoder exited {proc.returncode}: {proc.stderr.decode(errors='replace')[:500]}"
                )
            out = []
            for t, stamp in zip(timestamps, stamps):
                path = Path(tmp) / f"{stamp}.png"
                if not path.exists():
                    raise FrameExtractionError(f"decoder produced no frame for t={stamp}")
                out.append(FrameRef(video_id, t, data=path.read_bytes()))
            return out


def make_frame_source(kind: str, command: str = "") -> FrameSource:
    if kind == "synthetic":
        return SyntheticFrameSource()
    if kind == "command":
        return CommandFrameSource(command)
    raise FrameExtractionError(f"unknown frame source kind {kind!r}")


def probe_duration(video_path: str) -> float:
    """Video duration in seconds via OpenCV; raises if the file is unreadable."""
    try:
        import cv2
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise FrameExtractionError("OpenCV unavailable; pass an explicit duration") from exc
    cap = cv2.VideoCapture(video_path)
    try:
        if not cap.isOpened():
            raise FrameExtractionError(f"cannot open video {video_path}")
        fps = cap.get(cv2.CAP_PROP_FPS)
        n_frames = cap.get(cv2.CAP_PROP_FRAME_COUNT)
        if fps <= 0 or n_frames <= 0:
            raise FrameExtractionError(f"cannot probe duration of {video_path}")
        return n_frames / fps
    finally:
        cap.release()
