"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"


class CaptionRequest(BaseModel):
    video_id: str
    video_path: Optional[str] = None
    duration: Optional[float] = Field(
        default=None, description="Seconds; probed from the video file when omitted."
    )


class CaptionResponse(BaseModel):
    video_id: str
    duration: float
    num_scenes: int
    num_characters: int
    phases: dict[str, bool]
    store_dir: str


class AskRequest(BaseModel):
    video_id: str
    question: str
    options: list[str]
    question_id: Optional[str] = None


class AskResponse(BaseModel):
    question_id: str
    video_id: str
    letter: str
    reasoning: str
    relevant: list[list[float]]
    local_or_global: str
    local_question: str
    global_question: str


class EvalRequest(BaseModel):
    benchmark_path: str
    trace_dir: Optional[str] = None
    scripted_transcripts: Optional[str] = None


class BaselineRequest(BaseModel):
    benchmark_path: str
    scripted_transcripts: Optional[str] = None


class ReportResponse(BaseModel):
    answered: int
    correct: int
    skipped: int
    overall_accuracy: Optional[float]
    per_category: dict[str, dict[str, Any]]
    recall: dict[str, Any]
    usage: dict[str, Any]
    per_question: list[dict[str, Any]]
    errors: list[str]
    table: str


class SceneModel(BaseModel):
    scene_id: int
    t_start: float
    t_end: float
    brief: str
    detailed: str
    appeared: list[str]


class CharacterModel(BaseModel):
    name: str
    description: str
    frame_path: Optional[str]


class InspectResponse(BaseModel):
    video_id: str
    duration: float
    phases: dict[str, bool]
    scenes: list[SceneModel]
    characters: list[CharacterModel]
    rename_map: dict[str, str]


class UsageResponse(BaseModel):
    stages: dict[str, dict[str, int]]
    totals: dict[str, Any]
