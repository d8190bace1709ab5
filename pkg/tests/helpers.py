"""Shared test plumbing: scripted gateways, stub frames, record factories."""

from pathlib import Path

from sceneqa.core import CharacterRecord, FrameRef
from sceneqa.errors import ReplayMissError
from sceneqa.gateway import BackendConfig, ModelGateway, PriceTable
from sceneqa.store import append_trace


def write_records(path: Path, records: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.touch()
    for rec in records:
        append_trace(rec, path)
    return path


def scripted_gateway(tmp_path: Path, records: list[dict], prices: PriceTable | None = None,
                     name: str = "transcript.jsonl") -> ModelGateway:
    transcript = write_records(tmp_path / name, records)
    cfg = BackendConfig(kind="scripted", max_parallel=16, transcript_path=str(transcript))
    return ModelGateway(scripted=cfg, prices=prices or PriceTable())


def record(stage: str, unit: str, response: str, attempt: int = 0,
           input_units: int = 100, output_units: int = 20, model: str = "fixture-vlm") -> dict:
    return {
        "stage": stage,
        "unit": unit,
        "attempt": attempt,
        "model": model,
        "response": response,
        "usage": {"input_units": input_units, "output_units": output_units},
    }


class StubFrameSource:
    """Constant-byte frames with no image encoding, for fast fuzzing."""

    def __init__(self, fail: bool = False):
        self.fail = fail
        self.calls = 0

    def frames(self, video_id, video_path, timestamps):
        from sceneqa.frames import FrameExtractionError

        self.calls += 1
        if self.fail:
            raise FrameExtractionError("stub failure")
        return [FrameRef(video_id, t, data=b"stub") for t in timestamps]


class EchoBackend:
    """Answers every request with a fixed or computed response; counts images."""

    def __init__(self, respond):
        self.respond = respond
        self.max_images = 0
        self.calls = 0

    def send(self, req, prices):
        from sceneqa.core import ImagePart, Usage

        self.calls += 1
        n = sum(1 for p in req.parts if isinstance(p, ImagePart))
        self.max_images = max(self.max_images, n)
        text = self.respond(req) if callable(self.respond) else self.respond
        if text is None:
            raise ReplayMissError(req.stage_tag, req.unit_id, req.attempt)
        return text, Usage(1, 1, 0), "stub"


def echo_gateway(respond) -> ModelGateway:
    """Gateway whose single route is an EchoBackend (cap still enforced)."""
    import threading

    from sceneqa.gateway import UsageLedger

    cfg = BackendConfig(kind="scripted", max_parallel=16, transcript_path="unused")
    gw = ModelGateway.__new__(ModelGateway)
    gw.prices = PriceTable()
    gw.ledger = UsageLedger()
    gw.frame_cap = 32
    gw.transcript_path = None
    gw._clock = __import__("sceneqa.gateway", fromlist=["Clock"]).Clock()
    gw._transcript_lock = threading.Lock()
    backend = EchoBackend(respond)
    gw._routes = {"scripted": gw._route(cfg, backend)}
    return gw


def char_record(name: str, unit: int = 0, desc: str = "desc", ts: float = 0.0) -> CharacterRecord:
    return CharacterRecord(f"{name}_u{unit}", desc, FrameRef("v", ts, data=b"img"))
