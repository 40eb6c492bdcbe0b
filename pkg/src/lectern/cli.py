"""Operator command line: batch generation, stage-wise runs, review server.

Usage centers on a project root (default ./project) holding one
directory per run.  Configuration precedence is built-in defaults,
then the --config file, then individual flags.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 fixture miss.

Service selection: --replay <dir> runs entirely from recorded fixtures
(and proves it by wiring a transport that fails the process on any
would-be network call); --record <dir> records fixtures while running;
otherwise calls go to the HTTP services named by the LECTERN_* environment
variables, or to the built-in offline responder when they are unset.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .canonical import ParseError, SchemaError, canonical_loads, canonical_bytes, deserialize
from .gateway import (FixtureMiss, FixtureStore, Gateway, HttpTransport, Mode,
                      PoisonTransport, Service, ServiceRequest, request_hash)
from .model import LectureOutline, NarrationScript, PageBlueprint, PipelineConfig, SceneProgram
from .offline import TemplateTransport
from .codegen import emit, get_dialect
from .narrator import SynthesisResult
from .pipeline import Backends, default_backends, resume, run
from .store import (GlobalStage, LayoutRecord, PageStage, PageTrace,
                    ProjectStore, ResumeError, RunLock, RunLocked, run_id_for)

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_FIXTURE_MISS = 3


class CliError(RuntimeError):
    """Operator-facing runtime failure; message printed, exit 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits 2; we use 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# Loading and wiring
# ---------------------------------------------------------------------------

def _load_model(path: str, cls, what: str):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {what} file {path}: {exc.strerror}") from exc
    try:
        value = deserialize(data)
    except (ParseError, SchemaError) as exc:
        raise CliError(f"malformed {what} file {path}: {exc}") from exc
    if not isinstance(value, cls):
        raise CliError(f"{what} file {path} holds {type(value).__name__}, "
                       f"expected {cls.__name__}")
    return value


def _load_config(args) -> PipelineConfig:
    cfg = (_load_model(args.config, PipelineConfig, "config")
           if getattr(args, "config", None) else PipelineConfig())
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "parallelism", None) is not None:
        cfg = replace(cfg, parallelism=args.parallelism)
    if getattr(args, "review", False):
        cfg = replace(cfg, review_enabled=True)
    return cfg


def _build_gateway(args, cfg: PipelineConfig) -> Gateway:
    replay_dir = getattr(args, "replay", None)
    record_dir = getattr(args, "record", None)
    if replay_dir:
        return Gateway(PoisonTransport(), FixtureStore(replay_dir),
                       Mode.REPLAY, seed=cfg.seed)
    transport = (HttpTransport() if os.environ.get("LECTERN_LLM_ENDPOINT")
                 else TemplateTransport())
    if record_dir:
        return Gateway(transport, FixtureStore(record_dir), Mode.RECORD, seed=cfg.seed)
    return Gateway(transport, None, Mode.PASSTHROUGH, seed=cfg.seed)


def _backends(args, cfg: PipelineConfig) -> Backends:
    return default_backends(cfg, _build_gateway(args, cfg))


def _open_run(args) -> tuple[ProjectStore, PipelineConfig]:
    store = ProjectStore(args.project, args.run)
    if not store.has_state():
        raise CliError(f"no run state under {store.run_dir}")
    cfg = store.read(store.path("config"), PipelineConfig)
    return store, cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_generate(args) -> int:
    outline = _load_model(args.outline, LectureOutline, "outline")
    cfg = _load_config(args)
    run_id = run_id_for(outline, cfg)
    store = ProjectStore(args.project, run_id)
    already = (store.has_state()
               and store.load_state().global_at_least(GlobalStage.MERGED))
    output = run(outline, cfg, backends=_backends(args, cfg),
                 project_root=args.project)
    if output is None:
        print(f"run {run_id} parked awaiting review; "
              f"next: lectern serve --run {run_id} --project {args.project}")
    elif already:
        print(f"run {run_id} already complete, nothing to do")
    else:
        print(f"run {run_id} complete: {len(output.lecture_scripts)} pages, "
              f"{output.video_plan.total_duration_s:.1f} s total")
    return EXIT_OK


def _cmd_plan(args) -> int:
    outline = _load_model(args.outline, LectureOutline, "outline")
    cfg = _load_config(args)
    run_id = run_id_for(outline, cfg)
    store = ProjectStore(args.project, run_id)
    already = store.path("manuscript").is_file()
    run(outline, cfg, backends=_backends(args, cfg), project_root=args.project,
        until=GlobalStage.PLANNED)
    note = "already planned, nothing to do" if already else "manuscript written"
    print(f"run {run_id}: {note} ({store.path('manuscript')})")
    return EXIT_OK


def _cmd_paginate(args) -> int:
    store, cfg = _open_run(args)
    already = store.load_state().global_at_least(GlobalStage.PAGINATED)
    resume(args.run, backends=_backends(args, cfg), project_root=args.project,
           until=GlobalStage.PAGINATED)
    count = len(store.page_indices())
    note = "already paginated, nothing to do" if already else "blueprints written"
    print(f"run {args.run}: {note} ({count} pages)")
    return EXIT_OK


def _cmd_render_page(args) -> int:
    store, cfg = _open_run(args)
    with RunLock(store.run_dir):
        state = store.load_state()
        if state.stage_of(args.page) is None:
            raise CliError(f"run {args.run} has no page {args.page}")
        backends = _backends(args, cfg)
        ref = backends.final_renderer.ref_for(args.page)
        if state.page_at_least(args.page, PageStage.RENDERED):
            print(f"page {args.page} already rendered, nothing to do ({ref})")
            return EXIT_OK
        if not state.page_at_least(args.page, PageStage.FINAL):
            raise CliError(f"page {args.page} is not final yet "
                           f"(stage: {state.stage_of(args.page).value})")
        scene = store.read(store.page_path(args.page, "scene"), SceneProgram)
        ref = backends.final_renderer.render_full(
            emit(scene, get_dialect(cfg.dialect)), args.page)
        store.save_state(state.advance_page(args.page, PageStage.RENDERED))
    print(f"page {args.page} rendered -> {ref}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    store, _cfg = _open_run(args)
    i = args.page
    state = store.load_state()
    if i not in store.page_indices():
        raise CliError(f"run {args.run} has no page {i}")
    blueprint = store.try_read(store.page_path(i, "blueprint"), PageBlueprint)
    scene = store.try_read(store.page_path(i, "scene"), SceneProgram)
    script = store.try_read(store.page_path(i, "script"), NarrationScript)
    synth = store.try_read(store.page_path(i, "audio-meta"), SynthesisResult)
    record = store.try_read(store.page_path(i, "conflicts"), LayoutRecord)
    trace = store.try_read(store.page_path(i, "trace"), PageTrace)
    title = blueprint.title if blueprint else "?"
    stage = state.stage_of(i)
    print(f"page {i}: {title!r}")
    print(f"  stage: {stage.value if stage else 'pending'}"
          + (f" (scene: {scene.stage.value})" if scene else ""))
    if scene:
        print(f"  elements: {len(scene.elements)}, events: {len(scene.events)}")
    if script:
        print(f"  narration: {len(script.units)} units, {script.word_count} words")
    if synth:
        print(f"  audio: {synth.audio.duration_s:.6f} s "
              f"at {synth.audio.speaking_rate:.6f} w/s")
    if record:
        report = record.current
        if report.is_empty:
            print("  conflicts: none")
        else:
            print("  conflicts:")
            for overlap in report.overlaps:
                print(f"    overlap {overlap.a} {overlap.b} "
                      f"area={overlap.overlap_area_u2:.6f}")
            for overflow in report.overflows:
                edges = ",".join(overflow.violated_edges)
                print(f"    overflow {overflow.element_id} {edges} "
                      f"excess={overflow.excess_u:.6f}")
    if trace:
        for message in trace.sync_warnings:
            print(f"  sync-warning: {message}")
        if trace.drift:
            print(f"  drift: {trace.drift.drift_s:.6f} s")
        if trace.debug:
            print(f"  debug: {trace.debug.final_outcome.value} "
                  f"in {len(trace.debug.attempts)} attempt(s)")
    return EXIT_OK


def _cmd_serve(args) -> int:
    store, _cfg = _open_run(args)
    import uvicorn

    from .review_api import create_app
    app = create_app(args.project, lambda cfg: _backends(args, cfg))
    print(f"serving run {args.run} on http://{args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def _cmd_fixtures_record(args) -> int:
    if not args.record:
        raise CliError("fixtures record requires --record <dir>")
    code = _cmd_generate(args)
    count = sum(1 for p in Path(args.record).rglob("*") if p.is_file())
    print(f"recorded fixture store at {args.record}: {count} entries")
    return code


def _cmd_fixtures_verify(args) -> int:
    root = Path(args.fixtures)
    if not root.is_dir():
        raise CliError(f"no fixture directory {root}")
    checked, bad = 0, []
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        checked += 1
        try:
            envelope = canonical_loads(path.read_bytes())
            request = envelope["request"]
            req = ServiceRequest(service=Service(request["service"]),
                                 purpose=request["purpose"],
                                 payload=canonical_bytes(request["payload"]))
            expected = request_hash(req)
        except (ParseError, KeyError, ValueError) as exc:
            bad.append(f"{path}: unreadable envelope ({exc})")
            continue
        if path.name != expected:
            bad.append(f"{path}: content hashes to {expected}")
        elif path.parent.name != request["purpose"]:
            bad.append(f"{path}: stored under wrong purpose directory")
    for line in bad:
        print(line, file=sys.stderr)
    if bad:
        raise CliError(f"{len(bad)} of {checked} fixtures failed verification")
    print(f"{checked} fixtures verified")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument surface
# ---------------------------------------------------------------------------

def _add_project(p: argparse.ArgumentParser) -> None:
    p.add_argument("--project", default="project", help="project root directory")


def _add_gateway(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument("--replay", metavar="DIR",
                       help="replay recorded fixtures; no network")
    group.add_argument("--record", metavar="DIR",
                       help="record fixtures while running")


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (canonical format)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--parallelism", type=int, help="override worker limit")


def build_parser() -> _Parser:
    parser = _Parser(prog="lectern",
                     description="Compile lecture outlines into narrated video plans.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", help="full pipeline run")
    p.add_argument("--outline", required=True, help="outline file (canonical format)")
    _add_config(p)
    _add_project(p)
    _add_gateway(p)
    p.add_argument("--review", action="store_true",
                   help="park for human review before rendering")
    p.set_defaults(handler=_cmd_generate)

    p = sub.add_parser("plan", help="compose the manuscript only")
    p.add_argument("--outline", required=True)
    _add_config(p)
    _add_project(p)
    _add_gateway(p)
    p.set_defaults(handler=_cmd_plan, review=False)

    p = sub.add_parser("paginate", help="paginate an existing run")
    p.add_argument("--run", required=True, help="run id")
    _add_project(p)
    _add_gateway(p)
    p.set_defaults(handler=_cmd_paginate)

    p = sub.add_parser("render-page", help="render one final page")
    p.add_argument("--run", required=True)
    p.add_argument("--page", type=int, required=True)
    _add_project(p)
    _add_gateway(p)
    p.set_defaults(handler=_cmd_render_page)

    p = sub.add_parser("inspect", help="print one page's artifacts")
    p.add_argument("--run", required=True)
    p.add_argument("--page", type=int, required=True)
    _add_project(p)
    p.set_defaults(handler=_cmd_inspect)

    p = sub.add_parser("serve", help="start the review API")
    p.add_argument("--run", required=True)
    p.add_argument("--port", type=int, default=8077)
    p.add_argument("--host", default="127.0.0.1")
    _add_project(p)
    _add_gateway(p)
    p.set_defaults(handler=_cmd_serve)

    p = sub.add_parser("fixtures", help="manage gateway fixtures")
    fix = p.add_subparsers(dest="fixtures_command", required=True, metavar="action")

    f = fix.add_parser("record", help="run the pipeline and record fixtures")
    f.add_argument("--outline", required=True)
    _add_config(f)
    _add_project(f)
    f.add_argument("--record", required=True, metavar="DIR",
                   help="fixture directory to write")
    f.set_defaults(handler=_cmd_fixtures_record, review=False, replay=None)

    f = fix.add_parser("verify", help="check fixture hashes and envelopes")
    f.add_argument("--fixtures", required=True, metavar="DIR")
    f.set_defaults(handler=_cmd_fixtures_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except FixtureMiss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIXTURE_MISS
    except (CliError, ResumeError, RunLocked) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is still a runtime failure
        if os.environ.get("LECTERN_DEBUG"):
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
