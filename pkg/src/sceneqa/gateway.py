"""Backend-agnostic model access with the hard 32-image cap at one choke point.

The gateway owns everything that must be shared across concurrent pipeline
workers: the admission semaphores, the sliding-window rate limiters, the
usage ledger, and the transcript log. Requests with any image part route to
the vision backend, text-only requests to the text backend; a configured
scripted backend overrides both and replays transcripts by
(stage_tag, unit_id, attempt).
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import httpx

from .core import GenParams, ImagePart, ModelRequest, ModelResponse, TextPart, Usage
from .errors import (
    CapExceededError,
    InvalidInputError,
    ReplayMissError,
    TransportError,
)
from .store import append_trace, iter_trace

log = logging.getLogger(__name__)

FRAME_CAP = 32

# Pipeline stage tags; (stage, unit_id, attempt) is the replay key.
STAGES = (
    "scene_split",
    "scene_merge",
    "char_extract",
    "describe",
    "char_associate",
    "caption_rewrite",
    "intent_map",
    "intent_reduce",
    "goal_proposal",
    "perceive_local",
    "perceive_global",
    "answer_reduce",
    "baseline",
)

STAGE_ORDER = {name: i for i, name in enumerate(STAGES)}


@dataclass(frozen=True, slots=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 1.0


@dataclass(frozen=True, slots=True)
class BackendConfig:
    """How to reach one backend; credentials stay in the named env var."""

    kind: str  # "http-vlm" | "http-llm" | "scripted"
    endpoint: str = ""
    model: str = ""
    api_format: str = "openai"  # "openai" | "gemini"
    credentials_env: str = ""
    max_parallel: int = 4
    requests_per_minute: int = 0  # 0 disables rate limiting
    retry: RetryPolicy = RetryPolicy()
    transcript_path: str = ""  # scripted kind only: file or directory

    def __post_init__(self) -> None:
        if self.max_parallel < 1:
            raise InvalidInputError("max_parallel must be >= 1")


@dataclass(frozen=True, slots=True)
class PriceTable:
    """Dollars per 1M input/output units, per model name."""

    prices: dict[str, tuple[float, float]] = field(default_factory=dict)

    def cost_micros(self, model: str, input_units: int, output_units: int) -> int:
        entry = self.prices.get(model)
        if entry is None:
            return 0
        in_per_m, out_per_m = entry
        # dollars/1M units == micro-dollars/unit, so one rounding per call
        return round(input_units * in_per_m + output_units * out_per_m)


class Clock:
    """Real time source; tests substitute a simulated one."""

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class SlidingWindowLimiter:
    """Admits at most `limit` calls in any sliding `window` seconds."""

    def __init__(self, limit: int, clock: Clock, window: float = 60.0):
        self.limit = limit
        self.window = window
        self._clock = clock
        self._admitted: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.limit <= 0:
            return
        while True:
            with self._lock:
                now = self._clock.now()
                while self._admitted and self._admitted[0] <= now - self.window:
                    self._admitted.popleft()
                if len(self._admitted) < self.limit:
                    self._admitted.append(now)
                    return
                wait = self._admitted[0] + self.window - now
            self._clock.sleep(max(wait, 0.0))


class UsageLedger:
    """Per-stage call and unit counters; totals are exact integer sums."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._stages: dict[str, dict[str, int]] = {}

    def record(self, stage_tag: str, usage: Usage) -> None:
        with self._lock:
            entry = self._stages.setdefault(
                stage_tag,
                {"calls": 0, "input_units": 0, "output_units": 0, "cost_micros": 0},
            )
            entry["calls"] += 1
            entry["input_units"] += usage.input_units
            entry["output_units"] += usage.output_units
            entry["cost_micros"] += usage.cost_micros

    def totals(self) -> dict[str, int]:
        with self._lock:
            out = {"calls": 0, "input_units": 0, "output_units": 0, "cost_micros": 0}
            for entry in self._stages.values():
                for k in out:
                    out[k] += entry[k]
            return out

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            stages = {k: dict(v) for k, v in sorted(self._stages.items())}
        return {"stages": stages, "totals": self.totals()}

    def merged(self, other: "UsageLedger") -> "UsageLedger":
        out = UsageLedger()
        for src in (self, other):
            with src._lock:
                for stage, entry in src._stages.items():
                    tgt = out._stages.setdefault(
                        stage,
                        {"calls": 0, "input_units": 0, "output_units": 0, "cost_micros": 0},
                    )
                    for k in tgt:
                        tgt[k] += entry[k]
        return out


def record_usage(response: ModelResponse, ledger: UsageLedger, stage_tag: str) -> UsageLedger:
    """Fold one response's usage into the ledger (identity for zero usage counts)."""
    ledger.record(stage_tag, response.usage)
    return ledger


def request_digest(req: ModelRequest) -> str:
    h = hashlib.sha256()
    h.update(f"{req.stage_tag}|{req.unit_id}|{req.attempt}|".encode())
    for part in req.parts:
        if isinstance(part, TextPart):
            h.update(b"T")
            h.update(part.text.encode("utf-8"))
        else:
            h.update(b"I")
            if part.frame.data is not None:
                h.update(hashlib.sha256(part.frame.data).digest())
            else:
                h.update(f"{part.frame.path}@{part.frame.timestamp}".encode())
    return h.hexdigest()


def _frame_bytes(part: ImagePart) -> bytes:
    if part.frame.data is not None:
        return part.frame.data
    if part.frame.path:
        return Path(part.frame.path).read_bytes()
    raise InvalidInputError(
        f"image part for {part.frame.video_id}@{part.frame.timestamp} has no pixels"
    )


class ScriptedBackend:
    """Deterministic transcript replay keyed by (stage_tag, unit_id, attempt)."""

    def __init__(self, records: dict[tuple[str, str, int], dict[str, Any]]):
        self._records = records

    @classmethod
    def from_path(cls, path: str | Path) -> "ScriptedBackend":
        p = Path(path)
        files: Iterable[Path]
        if p.is_dir():
            files = sorted(p.rglob("*.jsonl"))
        else:
            files = [p]
        records: dict[tuple[str, str, int], dict[str, Any]] = {}
        for f in files:
            for rec in iter_trace(f):
                key = (rec["stage"], rec["unit"], int(rec.get("attempt", 0)))
                records[key] = rec
        return cls(records)

    def send(self, req: ModelRequest, prices: PriceTable) -> tuple[str, Usage, str]:
        key = (req.stage_tag, req.unit_id, req.attempt)
        rec = self._records.get(key)
        if rec is None:
            raise ReplayMissError(req.stage_tag, req.unit_id, req.attempt)
        usage = scripted_usage(rec, prices)
        return rec["response"], usage, rec.get("model", "scripted")


def scripted_usage(record: dict[str, Any], prices: PriceTable) -> Usage:
    """Usage for a transcript record; replay and live accounting share this rule."""
    raw = record.get("usage", {})
    input_units = int(raw.get("input_units", 0))
    output_units = int(raw.get("output_units", 0))
    if "cost_micros" in raw:
        cost = int(raw["cost_micros"])
    else:
        cost = prices.cost_micros(record.get("model", "scripted"), input_units, output_units)
    return Usage(input_units, output_units, cost)


def replay_totals(path: str | Path, prices: PriceTable) -> dict[str, int]:
    """Fold a transcript file back into ledger totals (the replay oracle)."""
    totals = {"calls": 0, "input_units": 0, "output_units": 0, "cost_micros": 0}
    p = Path(path)
    files = sorted(p.rglob("*.jsonl")) if p.is_dir() else [p]
    for f in files:
        for rec in iter_trace(f):
            usage = scripted_usage(rec, prices)
            totals["calls"] += 1
            totals["input_units"] += usage.input_units
            totals["output_units"] += usage.output_units
            totals["cost_micros"] += usage.cost_micros
    return totals


class HttpBackend:
    """Thin adapter over vendor chat-completion APIs with interleaved parts."""

    def __init__(self, cfg: BackendConfig, timeout: float = 120.0):
        self.cfg = cfg
        self._client = httpx.Client(timeout=timeout)

    def _api_key(self) -> str:
        if not self.cfg.credentials_env:
            return ""
        return os.environ.get(self.cfg.credentials_env, "")

    def _openai_body(self, req: ModelRequest) -> dict[str, Any]:
        content: list[dict[str, Any]] = []
        for part in req.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                b64 = base64.b64encode(_frame_bytes(part)).decode("ascii")
                content.append(
                    {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}
                )
        body: dict[str, Any] = {
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": content}],
        }
        if req.params.temperature is not None:
            body["temperature"] = req.params.temperature
        if req.params.max_tokens is not None:
            body["max_tokens"] = req.params.max_tokens
        return body

    def _gemini_body(self, req: ModelRequest) -> dict[str, Any]:
        parts: list[dict[str, Any]] = []
        for part in req.parts:
            if isinstance(part, TextPart):
                parts.append({"text": part.text})
            else:
                b64 = base64.b64encode(_frame_bytes(part)).decode("ascii")
                parts.append({"inline_data": {"mime_type": "image/png", "data": b64}})
        body: dict[str, Any] = {"contents": [{"role": "user", "parts": parts}]}
        gen: dict[str, Any] = {}
        if req.params.temperature is not None:
            gen["temperature"] = req.params.temperature
        if req.params.max_tokens is not None:
            gen["maxOutputTokens"] = req.params.max_tokens
        if gen:
            body["generationConfig"] = gen
        return body

    def send(self, req: ModelRequest, prices: PriceTable) -> tuple[str, Usage, str]:
        if self.cfg.api_format == "gemini":
            url = f"{self.cfg.endpoint.rstrip('/')}/models/{self.cfg.model}:generateContent"
            headers = {"x-goog-api-key": self._api_key()}
            body = self._gemini_body(req)
        else:
            url = self.cfg.endpoint
            headers = {"Authorization": f"Bearer {self._api_key()}"}
            body = self._openai_body(req)
        try:
            resp = self._client.post(url, json=body, headers=headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"transport failure: {exc}") from exc
        if resp.status_code != 200:
            permanent = 400 <= resp.status_code < 500 and resp.status_code != 429
            raise TransportError(
                f"backend returned {resp.status_code}: {resp.text[:500]}",
                status=resp.status_code,
                permanent=permanent,
            )
        payload = resp.json()
        if self.cfg.api_format == "gemini":
            parts = payload["candidates"][0]["content"].get("parts", [])
            text = "".join(p.get("text", "") for p in parts)
            meta = payload.get("usageMetadata", {})
            input_units = int(meta.get("promptTokenCount", 0))
            output_units = int(meta.get("candidatesTokenCount", 0))
        else:
            text = payload["choices"][0]["message"]["content"]
            meta = payload.get("usage", {})
            input_units = int(meta.get("prompt_tokens", 0))
            output_units = int(meta.get("completion_tokens", 0))
        cost = prices.cost_micros(self.cfg.model, input_units, output_units)
        return text, Usage(input_units, output_units, cost), self.cfg.model


class ModelGateway:
    """Shared-state front door for every model call the pipeline makes."""

    def __init__(
        self,
        vision: BackendConfig | None = None,
        text: BackendConfig | None = None,
        scripted: BackendConfig | None = None,
        prices: PriceTable | None = None,
        transcript_path: Path | None = None,
        clock: Clock | None = None,
        frame_cap: int = FRAME_CAP,
    ):
        self.prices = prices or PriceTable()
        self.ledger = UsageLedger()
        self.frame_cap = min(frame_cap, FRAME_CAP)
        self.transcript_path = transcript_path
        self._clock = clock or Clock()
        self._transcript_lock = threading.Lock()
        self._routes: dict[str, dict[str, Any]] = {}
        if scripted is not None:
            backend = ScriptedBackend.from_path(scripted.transcript_path)
            self._routes["scripted"] = self._route(scripted, backend)
        else:
            if vision is None or text is None:
                raise InvalidInputError(
                    "gateway needs both vision and text backends unless scripted"
                )
            self._routes["vision"] = self._route(vision, HttpBackend(vision))
            self._routes["text"] = self._route(text, HttpBackend(text))

    def _route(self, cfg: BackendConfig, backend: Any) -> dict[str, Any]:
        return {
            "cfg": cfg,
            "backend": backend,
            "semaphore": threading.BoundedSemaphore(cfg.max_parallel),
            "limiter": SlidingWindowLimiter(cfg.requests_per_minute, self._clock),
        }

    @property
    def scripted(self) -> bool:
        return "scripted" in self._routes

    def _select(self, req: ModelRequest) -> dict[str, Any]:
        if self.scripted:
            return self._routes["scripted"]
        return self._routes["vision" if req.image_parts() else "text"]

    def query(
        self,
        req: ModelRequest,
        on_call: Callable[[ModelRequest, ModelResponse], None] | None = None,
    ) -> ModelResponse:
        """Issue one request, enforcing the image cap before any backend work.

        A cap violation is a contract bug and is never retried; transient
        transport errors retry per the backend's policy with exponential
        backoff; permanent errors surface immediately.
        """
        if not req.stage_tag:
            raise InvalidInputError("request without stage_tag")
        n_images = len(req.image_parts())
        if n_images > self.frame_cap and not req.baseline_exempt:
            raise CapExceededError(
                f"{req.stage_tag}/{req.unit_id}: {n_images} images exceed cap {self.frame_cap}"
            )
        route = self._select(req)
        cfg: BackendConfig = route["cfg"]
        with route["semaphore"]:
            route["limiter"].acquire()
            last_error: Exception | None = None
            for attempt in range(max(1, cfg.retry.max_attempts)):
                try:
                    text, usage, model = route["backend"].send(req, self.prices)
                    break
                except ReplayMissError:
                    raise
                except TransportError as exc:
                    if exc.permanent:
                        raise
                    last_error = exc
                    if attempt + 1 < cfg.retry.max_attempts:
                        self._clock.sleep(cfg.retry.backoff_base * (2**attempt))
            else:
                raise TransportError(
                    f"{req.stage_tag}/{req.unit_id}: retries exhausted: {last_error}"
                )
        response = ModelResponse(text=text, usage=usage)
        record_usage(response, self.ledger, req.stage_tag)
        if self.transcript_path is not None:
            record = {
                "stage": req.stage_tag,
                "unit": req.unit_id,
                "attempt": req.attempt,
                "digest": request_digest(req),
                "model": model,
                "response": text,
                "usage": usage.to_dict(),
            }
            with self._transcript_lock:
                append_trace(record, self.transcript_path)
        if on_call is not None:
            on_call(req, response)
        return response

    def usage_snapshot(self) -> dict[str, Any]:
        snap = self.ledger.snapshot()
        snap["totals"]["cost_dollars"] = snap["totals"]["cost_micros"] / 1e6
        return snap


def build_text_request(
    stage_tag: str, unit_id: str, prompt: str, attempt: int = 0
) -> ModelRequest:
    return ModelRequest(
        stage_tag=stage_tag,
        unit_id=unit_id,
        parts=(TextPart(prompt),),
        params=GenParams(),
        attempt=attempt,
    )
