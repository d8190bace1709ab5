"""FastAPI service wrapping the pipeline.

The service owns the state that must be shared across clients: the model
gateway (rate limiters, usage ledger, transcript log) and the store root.
The CLI is a thin client of these endpoints, either over the network or via
an in-process ASGI transport.
"""

from __future__ import annotations

import logging
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .analysis import answer_question
from .captioning import run_captioning
from .config import (
    PipelineConfig,
    build_frame_source,
    build_gateway,
    resolve_video_path,
)
from .core import Question
from .errors import InvalidInputError, SceneQAError, StoreError
from .frames import FrameExtractionError, probe_duration
from .gateway import BackendConfig, ModelGateway
from .harness import Report, evaluate, load_benchmark, run_baseline
from .schemas import (
    AskRequest,
    AskResponse,
    BaselineRequest,
    CaptionRequest,
    CaptionResponse,
    EvalRequest,
    HealthResponse,
    InspectResponse,
    ReportResponse,
    UsageResponse,
)
from .store import exists as store_exists
from .store import load as store_load
from .store import video_dir

log = logging.getLogger(__name__)


class AppState:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        transcript = None
        if cfg.transcript_logging and not cfg.scripted_transcripts:
            transcript = Path(cfg.store_root) / "calls.jsonl"
        self.gateway = build_gateway(cfg, transcript_path=transcript)
        self.frame_source = build_frame_source(cfg)

    def request_gateway(self, scripted_override: str | None) -> ModelGateway:
        """Gateway for one request; a scripted override gets its own replay gateway."""
        if not scripted_override:
            return self.gateway
        scripted = BackendConfig(
            kind="scripted", max_parallel=64, transcript_path=scripted_override
        )
        return ModelGateway(scripted=scripted, prices=self.cfg.prices)


def _report_response(report: Report) -> ReportResponse:
    return ReportResponse(**report.to_dict(), table=report.render_table())


def create_app(cfg: PipelineConfig | None = None) -> FastAPI:
    state = AppState(cfg or PipelineConfig())
    app = FastAPI(title="sceneqa", version="0.1.0")
    app.state.sceneqa = state

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse()

    @app.post("/caption", response_model=CaptionResponse)
    def caption(req: CaptionRequest) -> CaptionResponse:
        cfg = state.cfg
        video_path = req.video_path or resolve_video_path(cfg, req.video_id)
        duration = req.duration
        if duration is None:
            if store_exists(req.video_id, cfg.store_root):
                duration = store_load(req.video_id, cfg.store_root).duration
            else:
                try:
                    duration = probe_duration(video_path)
                except FrameExtractionError as exc:
                    raise HTTPException(status_code=422, detail=str(exc))
        try:
            store = run_captioning(
                req.video_id,
                video_path,
                duration,
                cfg.sampling,
                state.gateway,
                state.frame_source,
                cfg.store_root,
                workers=cfg.workers,
                rewrite_mode=cfg.rewrite_mode,
                describe_window_units=cfg.describe_window_units,
            )
        except SceneQAError as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        return CaptionResponse(
            video_id=store.video_id,
            duration=store.duration,
            num_scenes=len(store.scenes),
            num_characters=len(store.registry.records),
            phases=dict(store.phases),
            store_dir=str(video_dir(cfg.store_root, store.video_id)),
        )

    @app.post("/ask", response_model=AskResponse)
    def ask(req: AskRequest) -> AskResponse:
        cfg = state.cfg
        if not store_exists(req.video_id, cfg.store_root):
            raise HTTPException(
                status_code=404, detail=f"no caption store for video {req.video_id!r}"
            )
        try:
            question = Question(
                question_id=req.question_id or f"adhoc-{req.video_id}",
                video_id=req.video_id,
                text=req.question,
                options=tuple(req.options),
            )
        except InvalidInputError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        store = store_load(req.video_id, cfg.store_root)
        final, trace = answer_question(
            store,
            question,
            cfg.sampling,
            state.gateway,
            state.frame_source,
            cfg.analysis,
            resolve_video_path(cfg, req.video_id),
        )
        return AskResponse(
            question_id=question.question_id,
            video_id=req.video_id,
            letter=final.letter,
            reasoning=final.reasoning,
            relevant=[iv.to_pair() for iv in trace.global_analysis.relevant],
            local_or_global=trace.global_analysis.local_or_global,
            local_question=trace.goal_proposal.local_question,
            global_question=trace.goal_proposal.global_question,
        )

    @app.post("/eval", response_model=ReportResponse)
    def eval_benchmark(req: EvalRequest) -> ReportResponse:
        cfg = state.cfg
        try:
            questions, errors = load_benchmark(req.benchmark_path)
        except (OSError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"bad benchmark file: {exc}")
        gateway = state.request_gateway(req.scripted_transcripts)
        report = evaluate(
            questions,
            cfg,
            gateway,
            state.frame_source,
            trace_dir=Path(req.trace_dir) if req.trace_dir else None,
            errors=errors,
        )
        return _report_response(report)

    @app.post("/baseline", response_model=ReportResponse)
    def baseline(req: BaselineRequest) -> ReportResponse:
        cfg = state.cfg
        try:
            questions, errors = load_benchmark(req.benchmark_path)
        except (OSError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"bad benchmark file: {exc}")
        gateway = state.request_gateway(req.scripted_transcripts)
        report = run_baseline(questions, cfg, gateway, state.frame_source, errors=errors)
        return _report_response(report)

    @app.get("/videos/{video_id}", response_model=InspectResponse)
    def inspect(video_id: str) -> InspectResponse:
        cfg = state.cfg
        try:
            store = store_load(video_id, cfg.store_root)
        except StoreError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return InspectResponse(
            video_id=store.video_id,
            duration=store.duration,
            phases=dict(store.phases),
            scenes=[s.to_dict() for s in store.scenes],
            characters=[
                {
                    "name": r.name,
                    "description": r.description,
                    "frame_path": r.representative_frame.path,
                }
                for r in store.registry.records
            ],
            rename_map=dict(store.registry.rename_map),
        )

    @app.get("/usage", response_model=UsageResponse)
    def usage() -> UsageResponse:
        return UsageResponse(**state.gateway.usage_snapshot())

    return app
