"""Single-document configuration: backends, sampling, dispatch, prices."""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .analysis import AnalysisOptions
from .errors import InvalidInputError
from .frames import FrameSource, make_frame_source
from .framing import SamplingConfig
from .gateway import BackendConfig, ModelGateway, PriceTable, RetryPolicy

DEFAULT_FRAME_COMMAND = (
    f"{sys.executable} -m sceneqa.extract_frames {{video}} {{out_dir}} {{timestamps}}"
)


@dataclass(frozen=True, slots=True)
class BaselineConfig:
    """Uniform-sampling baseline preset; the only path exempt from the frame cap."""

    frames_long: int = 256
    frames_short: int = 128
    short_video_s: float = 600.0


@dataclass(slots=True)
class PipelineConfig:
    store_root: Path = Path("stores")
    videos_root: Path = Path("videos")
    workers: int = 4
    question_workers: int = 4
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    analysis: AnalysisOptions = field(default_factory=AnalysisOptions)
    vision: BackendConfig | None = None
    text: BackendConfig | None = None
    scripted_transcripts: str | None = None
    prices: PriceTable = field(default_factory=PriceTable)
    frames_kind: str = "command"
    frames_command: str = DEFAULT_FRAME_COMMAND
    rewrite_mode: str = "deterministic"
    describe_window_units: int = 8
    transcript_logging: bool = True
    baseline: BaselineConfig = field(default_factory=BaselineConfig)


def _backend_from(d: dict[str, Any]) -> BackendConfig:
    retry = d.get("retry", {})
    return BackendConfig(
        kind=d["kind"],
        endpoint=d.get("endpoint", ""),
        model=d.get("model", ""),
        api_format=d.get("api_format", "openai"),
        credentials_env=d.get("credentials_env", ""),
        max_parallel=int(d.get("max_parallel", 4)),
        requests_per_minute=int(d.get("requests_per_minute", 0)),
        retry=RetryPolicy(
            max_attempts=int(retry.get("max_attempts", 3)),
            backoff_base=float(retry.get("backoff_base", 1.0)),
        ),
    )


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Load a YAML or JSON config document; missing keys keep their defaults."""
    doc: dict[str, Any] = {}
    if path is not None:
        raw = Path(path).read_text("utf-8")
        doc = (json.loads(raw) if str(path).endswith(".json") else yaml.safe_load(raw)) or {}
    if overrides:
        doc.update(overrides)

    cfg = PipelineConfig()
    if "store_root" in doc:
        cfg.store_root = Path(doc["store_root"])
    if "videos_root" in doc:
        cfg.videos_root = Path(doc["videos_root"])
    cfg.workers = int(doc.get("workers", cfg.workers))
    cfg.question_workers = int(doc.get("question_workers", cfg.question_workers))
    if "sampling" in doc:
        cfg.sampling = SamplingConfig(**doc["sampling"])
    analysis_doc = dict(doc.get("analysis", {}))
    analysis_doc.pop("workers", None)  # pipeline-wide workers wins
    cfg.analysis = AnalysisOptions(workers=cfg.workers, **analysis_doc)
    backends = doc.get("backends", {})
    if "vision" in backends:
        cfg.vision = _backend_from(backends["vision"])
    if "text" in backends:
        cfg.text = _backend_from(backends["text"])
    cfg.scripted_transcripts = doc.get("scripted_transcripts")
    prices = {
        model: (float(p["input_per_m"]), float(p["output_per_m"]))
        for model, p in doc.get("prices", {}).items()
    }
    cfg.prices = PriceTable(prices)
    frames = doc.get("frames", {})
    cfg.frames_kind = frames.get("kind", cfg.frames_kind)
    cfg.frames_command = frames.get("command", cfg.frames_command)
    cfg.rewrite_mode = doc.get("rewrite_mode", cfg.rewrite_mode)
    cfg.describe_window_units = int(doc.get("describe_window_units", cfg.describe_window_units))
    cfg.transcript_logging = bool(doc.get("transcript_logging", cfg.transcript_logging))
    if "baseline" in doc:
        b = doc["baseline"]
        cfg.baseline = BaselineConfig(
            frames_long=int(b.get("frames_long", 256)),
            frames_short=int(b.get("frames_short", 128)),
            short_video_s=float(b.get("short_video_s", 600.0)),
        )
    return cfg


def build_gateway(cfg: PipelineConfig, transcript_path: Path | None = None) -> ModelGateway:
    """Assemble the gateway; a scripted transcript path overrides live backends."""
    if cfg.scripted_transcripts:
        scripted = BackendConfig(
            kind="scripted",
            max_parallel=64,
            transcript_path=str(cfg.scripted_transcripts),
        )
        return ModelGateway(scripted=scripted, prices=cfg.prices, transcript_path=transcript_path)
    if cfg.vision is None or cfg.text is None:
        raise InvalidInputError(
            "config needs backends.vision and backends.text, or scripted_transcripts"
        )
    return ModelGateway(
        vision=cfg.vision, text=cfg.text, prices=cfg.prices, transcript_path=transcript_path
    )


def build_frame_source(cfg: PipelineConfig) -> FrameSource:
    return make_frame_source(cfg.frames_kind, cfg.frames_command)


def resolve_video_path(cfg: PipelineConfig, video_id: str) -> str:
    """Best-effort mapping from a video id to a file under videos_root."""
    direct = cfg.videos_root / video_id
    if direct.exists():
        return str(direct)
    for ext in (".mp4", ".mkv", ".webm", ".avi"):
        p = cfg.videos_root / f"{video_id}{ext}"
        if p.exists():
            return str(p)
    return str(direct)
