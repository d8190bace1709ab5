"""Command-line client for the pipeline service.

Every subcommand talks to the HTTP API: either a running server given with
--server, or an in-process instance of the app mounted over an ASGI
transport, so both paths exercise the same endpoints.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Any

import httpx

from .config import PipelineConfig, load_config
from .gateway import replay_totals


class ApiClient:
    def __init__(self, server: str | None, cfg: PipelineConfig | None = None):
        self.server = server.rstrip("/") if server else None
        self._app = None
        if self.server is None:
            from .service import create_app

            self._app = create_app(cfg or PipelineConfig())

    def request(self, method: str, path: str, body: dict | None = None) -> dict[str, Any]:
        if self.server is not None:
            with httpx.Client(base_url=self.server, timeout=None) as client:
                response = client.request(method, path, json=body)
        else:
            async def go():
                transport = httpx.ASGITransport(app=self._app)
                async with httpx.AsyncClient(
                    transport=transport, base_url="http://sceneqa.local", timeout=None
                ) as client:
                    return await client.request(method, path, json=body)

            response = asyncio.run(go())
        if response.status_code >= 400:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise SystemExit(f"error {response.status_code}: {detail}")
        return response.json()


def _client(args: argparse.Namespace) -> ApiClient:
    if args.server:
        return ApiClient(args.server)
    overrides: dict[str, Any] = {}
    if getattr(args, "scripted", None):
        overrides["scripted_transcripts"] = args.scripted
    if getattr(args, "store_root", None):
        overrides["store_root"] = args.store_root
    cfg = load_config(args.config, overrides)
    return ApiClient(None, cfg)


def _write_report(report: dict[str, Any], out: str | None) -> None:
    print(report.pop("table"))
    if out:
        Path(out).write_text(
            json.dumps(report, ensure_ascii=False, sort_keys=True, indent=1),
            encoding="utf-8",
        )
        print(f"report written to {out}")


def cmd_caption(args: argparse.Namespace) -> None:
    client = _client(args)
    video_path = args.video
    video_id = args.video_id or Path(video_path).stem
    body = {"video_id": video_id, "video_path": video_path, "duration": args.duration}
    result = client.request("POST", "/caption", body)
    print(
        f"{result['video_id']}: {result['num_scenes']} scenes, "
        f"{result['num_characters']} characters, phases {result['phases']}"
    )
    print(f"store: {result['store_dir']}")


def cmd_ask(args: argparse.Namespace) -> None:
    client = _client(args)
    body = {
        "video_id": args.video,
        "question": args.question,
        "options": args.options,
        "question_id": args.question_id,
    }
    result = client.request("POST", "/ask", body)
    print(f"answer: {result['letter']}")
    print(f"relevant: {result['relevant']} ({result['local_or_global']})")
    print(f"reasoning: {result['reasoning']}")


def cmd_eval(args: argparse.Namespace) -> None:
    client = _client(args)
    body = {
        "benchmark_path": args.benchmark,
        "trace_dir": args.traces,
        "scripted_transcripts": args.scripted if args.server else None,
    }
    result = client.request("POST", "/eval", body)
    _write_report(result, args.out)


def cmd_baseline(args: argparse.Namespace) -> None:
    client = _client(args)
    body = {
        "benchmark_path": args.benchmark,
        "scripted_transcripts": args.scripted if args.server else None,
    }
    result = client.request("POST", "/baseline", body)
    _write_report(result, args.out)


def cmd_inspect(args: argparse.Namespace) -> None:
    client = _client(args)
    result = client.request("GET", f"/videos/{args.video}")
    print(f"video {result['video_id']}  duration {result['duration']}s  phases {result['phases']}")
    print(f"characters ({len(result['characters'])}):")
    for rec in result["characters"]:
        print(f"  <{rec['name']}>  {rec['description']}")
    print(f"scenes ({len(result['scenes'])}):")
    for scene in result["scenes"]:
        appeared = ", ".join(scene["appeared"])
        print(
            f"  [{scene['scene_id']}] ({scene['t_start']:.1f}, {scene['t_end']:.1f}) "
            f"{scene['brief']}" + (f"  [{appeared}]" if appeared else "")
        )


def cmd_cost(args: argparse.Namespace) -> None:
    if args.transcript:
        cfg = load_config(args.config)
        totals = replay_totals(args.transcript, cfg.prices)
        print(
            f"calls={totals['calls']} input={totals['input_units']} "
            f"output={totals['output_units']} cost=${totals['cost_micros'] / 1e6:.4f}"
        )
        return
    client = _client(args)
    result = client.request("GET", "/usage")
    for stage, entry in result["stages"].items():
        print(
            f"{stage:>16}: calls={entry['calls']} in={entry['input_units']} "
            f"out={entry['output_units']} cost=${entry['cost_micros'] / 1e6:.4f}"
        )
    totals = result["totals"]
    print(
        f"{'total':>16}: calls={totals['calls']} in={totals['input_units']} "
        f"out={totals['output_units']} cost=${totals['cost_micros'] / 1e6:.4f}"
    )


def cmd_serve(args: argparse.Namespace) -> None:
    import uvicorn

    from .service import create_app

    cfg = load_config(args.config)
    uvicorn.run(create_app(cfg), host=args.host, port=args.port)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (YAML or JSON)")
    parser.add_argument("--server", help="base URL of a running sceneqa server")
    parser.add_argument("--scripted", help="transcript file/dir for the scripted backend")
    parser.add_argument("--store-root", dest="store_root", help="caption store root directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sceneqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("caption", help="build the caption store for a video")
    p.add_argument("video", help="video file path (or bare id with synthetic frames)")
    p.add_argument("--video-id", help="store id; defaults to the file stem")
    p.add_argument("--duration", type=float, help="seconds; probed when omitted")
    _add_common(p)
    p.set_defaults(fn=cmd_caption)

    p = sub.add_parser("ask", help="answer one question against a captioned video")
    p.add_argument("video", help="video id of an existing caption store")
    p.add_argument("question")
    p.add_argument("--options", nargs="+", required=True, help="2-5 option texts (A..E)")
    p.add_argument("--question-id")
    _add_common(p)
    p.set_defaults(fn=cmd_ask)

    p = sub.add_parser("eval", help="evaluate a benchmark file")
    p.add_argument("benchmark")
    p.add_argument("--traces", help="directory for per-question trace JSON")
    p.add_argument("--out", help="write the machine-readable report here")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("baseline", help="uniform-sampling single-call baseline")
    p.add_argument("benchmark")
    p.add_argument("--out", help="write the machine-readable report here")
    _add_common(p)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("inspect", help="print scenes and registry of a caption store")
    p.add_argument("video")
    _add_common(p)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("cost", help="print the usage ledger")
    p.add_argument("--transcript", help="replay a transcript file instead of asking the server")
    _add_common(p)
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
