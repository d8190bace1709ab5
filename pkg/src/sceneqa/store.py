"""Durable, resumable persistence for caption stores and append-only call logs.

Layout is one directory per video:

    <root>/<video_id>/store.json      phase markers + duration + schema version
    <root>/<video_id>/scenes.jsonl    one scene record per line, times one-decimal
    <root>/<video_id>/registry.json   character records + rename map
    <root>/<video_id>/frames/         representative character frames
    <root>/<video_id>/transcript.jsonl  gateway call log (shared record format)

Writers take a per-directory lock; readers may load any completed phase.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from filelock import FileLock

from .core import CharacterRecord, CharacterRegistry, FrameRef, Scene
from .errors import CorruptRecordError, SchemaMigrationError, StoreError

SCHEMA_VERSION = 1

PHASES = ("split", "describe", "reduce")


@dataclass(slots=True)
class CaptionStore:
    """The persisted 'article' of one video: scenes plus character registry."""

    video_id: str
    duration: float
    scenes: list[Scene] = field(default_factory=list)
    registry: CharacterRegistry = field(default_factory=CharacterRegistry)
    phases: dict[str, bool] = field(
        default_factory=lambda: {p: False for p in PHASES}
    )
    schema_version: int = SCHEMA_VERSION

    def next_phase(self) -> str | None:
        """First incomplete phase, or None when the store is fully built."""
        for p in PHASES:
            if not self.phases.get(p, False):
                return p
        return None

    def mark(self, phase: str) -> None:
        if phase not in PHASES:
            raise StoreError(f"unknown phase {phase!r}")
        self.phases[phase] = True


def video_dir(root: Path, video_id: str) -> Path:
    return Path(root) / video_id


def store_lock(root: Path, video_id: str) -> FileLock:
    d = video_dir(root, video_id)
    d.mkdir(parents=True, exist_ok=True)
    return FileLock(str(d / ".lock"))


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(data, encoding="utf-8")
    os.replace(tmp, path)


def _scene_record(scene: Scene) -> dict[str, Any]:
    d = scene.to_dict()
    d["t_start"] = round(d["t_start"], 1)
    d["t_end"] = round(d["t_end"], 1)
    return d


def save(store: CaptionStore, root: Path) -> Path:
    """Persist a checkpoint; frames carried as bytes are materialized to files."""
    d = video_dir(root, store.video_id)
    d.mkdir(parents=True, exist_ok=True)

    records = []
    for rec in store.registry.records:
        frame = rec.representative_frame
        if frame.data is not None:
            frames_dir = d / "frames"
            frames_dir.mkdir(exist_ok=True)
            rel = f"frames/{rec.name}.png"
            (d / rel).write_bytes(frame.data)
            frame = FrameRef(frame.video_id, frame.timestamp, path=rel)
            rec = CharacterRecord(rec.name, rec.description, frame)
        records.append(rec)
    registry = CharacterRegistry(tuple(records), dict(store.registry.rename_map))
    store.registry = registry

    lines = [
        json.dumps(_scene_record(s), ensure_ascii=False, sort_keys=True)
        for s in store.scenes
    ]
    _atomic_write(d / "scenes.jsonl", "".join(line + "\n" for line in lines))
    registry_doc = {
        "records": [
            {
                "name": rec.name,
                "description": rec.description,
                "frame_path": rec.representative_frame.path,
                "frame_time": round(rec.representative_frame.timestamp, 1),
            }
            for rec in registry.records
        ],
        "rename_map": dict(sorted(registry.rename_map.items())),
    }
    _atomic_write(
        d / "registry.json",
        json.dumps(registry_doc, ensure_ascii=False, sort_keys=True, indent=1),
    )
    _atomic_write(
        d / "store.json",
        json.dumps(
            {
                "video_id": store.video_id,
                "duration": store.duration,
                "schema_version": store.schema_version,
                "phases": {p: store.phases.get(p, False) for p in PHASES},
            },
            sort_keys=True,
            indent=1,
        ),
    )
    return d


def iter_scene_records(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (byte offset, record) per line; corrupt lines raise with their offset."""
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            stripped = raw.strip()
            if stripped:
                try:
                    yield offset, json.loads(stripped.decode("utf-8"))
                except (ValueError, UnicodeDecodeError) as exc:
                    raise CorruptRecordError(str(path), offset, str(exc)) from exc
            offset += len(raw)


def exists(video_id: str, root: Path) -> bool:
    return (video_dir(root, video_id) / "store.json").exists()


def load(video_id: str, root: Path) -> CaptionStore:
    d = video_dir(root, video_id)
    meta_path = d / "store.json"
    if not meta_path.exists():
        raise StoreError(f"no caption store for video {video_id!r} under {root}")
    meta = json.loads(meta_path.read_text("utf-8"))
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMigrationError(
            f"store schema {meta.get('schema_version')} needs migration to {SCHEMA_VERSION}"
        )
    scenes = []
    scenes_path = d / "scenes.jsonl"
    if scenes_path.exists():
        for _, record in iter_scene_records(scenes_path):
            scenes.append(Scene.from_dict(record))
    registry = CharacterRegistry()
    registry_path = d / "registry.json"
    if registry_path.exists():
        doc = json.loads(registry_path.read_text("utf-8"))
        registry = CharacterRegistry(
            records=tuple(
                CharacterRecord(
                    r["name"],
                    r["description"],
                    FrameRef(meta["video_id"], float(r["frame_time"]), path=r["frame_path"]),
                )
                for r in doc["records"]
            ),
            rename_map=dict(doc["rename_map"]),
        )
    return CaptionStore(
        video_id=meta["video_id"],
        duration=float(meta["duration"]),
        scenes=scenes,
        registry=registry,
        phases={p: bool(meta["phases"].get(p, False)) for p in PHASES},
        schema_version=meta["schema_version"],
    )


def append_trace(record: dict[str, Any], path: Path) -> None:
    """Append one structured record, write-then-sync so a crash never loses it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n"
    with open(path, "ab") as fh:
        fh.write(line.encode("utf-8"))
        fh.flush()
        os.fsync(fh.fileno())


def iter_trace(path: Path) -> Iterator[dict[str, Any]]:
    """Replay an append-only trace file in write order."""
    for _, record in iter_scene_records(path):
        yield record
