"""Review HTTP API: preview pages, accept human edits, resume the run.

Serves one project root.  All JSON bodies (requests and responses) are
in the canonical format; errors are {code, message} objects.  Previews
are SVG documents produced straight from the scene IR by a built-in
renderer, so they exist before any video renderer has run and reflect
geometry exactly: every element becomes a <g id="el-..."> holding a
<rect> in scene units, which is also what the browser UI drags around.

Concurrency is optimistic: page reads return a revision token (hash of
the stored scene and edit set) and mutating POSTs must echo it via the
`revision` query parameter; a mismatch is a 409 so the client refetches.

Editing happens against the laid-out scene.  POST .../edits persists
the edit set and answers with a fresh what-if ConflictReport without
touching the scene, so the educator can iterate; POST .../approve
applies the stored (or empty) edit set for real and promotes the page
to final.  POST /runs/{id}/continue resumes the parked pipeline once
every page is final.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Callable
from xml.sax.saxutils import escape

from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware

from .canonical import (ParseError, SchemaError, canonical_dumps, deserialize,
                        format_float, serialize)
from .layout import EditError, apply_human_edits, detect_conflicts
from .model import (EditSet, ElementKind, FrameSpec, PageBlueprint,
                    PipelineConfig, SceneProgram, SceneStage)
from .store import (LayoutRecord, PageStage, ProjectStore, ResumeError,
                    RunLocked)

__all__ = ["create_app", "svg_preview"]

BackendsFactory = Callable[[PipelineConfig], "object"]


# ---------------------------------------------------------------------------
# SVG preview
# ---------------------------------------------------------------------------

_KIND_STYLE = {
    ElementKind.TEXT: ('none', '#666666'),
    ElementKind.FORMULA: ('#e8ecff', '#4455cc'),
    ElementKind.SHAPE: ('#e2f3e2', '#227722'),
    ElementKind.IMAGE_PLACEHOLDER: ('#eeeeee', '#999999'),
    ElementKind.GROUP: ('none', '#bbbbbb'),
}

_LABELED_KINDS = (ElementKind.TEXT, ElementKind.FORMULA, ElementKind.IMAGE_PLACEHOLDER)


def svg_preview(scene: SceneProgram, frame: FrameSpec) -> str:
    """Deterministic SVG for a scene: one <g> per element, scene units.

    The SVG y axis points down, the frame's points up, so boxes are
    emitted at (left, frame_top - top).  Numbers use the canonical
    six-digit form, making equal scenes byte-equal previews.
    """
    f = format_float
    width, height = frame.width, frame.height
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {f(width)} {f(height)}"'
        f' font-family="sans-serif">\n',
        f'  <rect class="frame" x="0.000000" y="0.000000" width="{f(width)}"'
        f' height="{f(height)}" fill="#ffffff" stroke="#000000" stroke-width="0.020000"/>\n',
    ]
    for element in scene.elements:
        box = element.bbox
        x = box.cx - box.w / 2.0 + width / 2.0
        y = height / 2.0 - (box.cy + box.h / 2.0)
        fill, stroke = _KIND_STYLE[element.kind]
        role = element.style.get("role", "")
        role_attr = f' data-role="{escape(role)}"' if role else ""
        dash = ' stroke-dasharray="0.100000 0.100000"' if element.kind is ElementKind.GROUP else ""
        parts.append(f'  <g class="element kind-{element.kind.value}" id="el-{element.id}"{role_attr}>\n')
        parts.append(f'    <rect x="{f(x)}" y="{f(y)}" width="{f(box.w)}" height="{f(box.h)}"'
                     f' fill="{fill}" stroke="{stroke}" stroke-width="0.030000"{dash}/>\n')
        if element.kind is ElementKind.IMAGE_PLACEHOLDER:
            parts.append(f'    <line x1="{f(x)}" y1="{f(y)}" x2="{f(x + box.w)}"'
                         f' y2="{f(y + box.h)}" stroke="{stroke}" stroke-width="0.020000"/>\n')
            parts.append(f'    <line x1="{f(x)}" y1="{f(y + box.h)}" x2="{f(x + box.w)}"'
                         f' y2="{f(y)}" stroke="{stroke}" stroke-width="0.020000"/>\n')
        if element.kind in _LABELED_KINDS and element.content:
            font = min(0.35, box.h * 0.5)
            parts.append(f'    <text x="{f(box.cx + width / 2.0)}" y="{f(height / 2.0 - box.cy)}"'
                         f' font-size="{f(font)}" text-anchor="middle"'
                         f' dominant-baseline="middle" fill="#111111">'
                         f'{escape(element.content)}</text>\n')
        parts.append('  </g>\n')
    parts.append('</svg>\n')
    return "".join(parts)


# ---------------------------------------------------------------------------
# Responses
# ---------------------------------------------------------------------------

def _json(value, status: int = 200, headers: dict | None = None) -> Response:
    return Response(content=canonical_dumps(value), status_code=status,
                    media_type="application/json", headers=headers)


def _model(model, status: int = 200, headers: dict | None = None) -> Response:
    return Response(content=serialize(model), status_code=status,
                    media_type="application/json", headers=headers)


def _error(status: int, code: str, message: str) -> Response:
    return _json({"code": code, "message": message}, status)


class _Reject(Exception):
    """Internal control flow carrying a ready error response."""

    def __init__(self, response: Response):
        self.response = response


# ---------------------------------------------------------------------------
# App
# ---------------------------------------------------------------------------

def create_app(project_root: str | Path,
               make_backends: BackendsFactory | None = None) -> FastAPI:
    """Build the API over `project_root`.

    `make_backends` turns the run's stored config into pipeline
    backends; it is required only for POST /runs/{id}/continue.
    """
    root = Path(project_root)
    app = FastAPI(title="lectern review", docs_url=None, redoc_url=None)
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"], expose_headers=["X-Revision"])

    # -- helpers ---------------------------------------------------------

    def open_store(run_id: str) -> ProjectStore:
        store = ProjectStore(root, run_id)
        if not store.has_state():
            raise _Reject(_error(404, "unknown-run", f"no run {run_id!r}"))
        return store

    def page_of(store: ProjectStore, page_index: int) -> None:
        if page_index not in store.page_indices():
            raise _Reject(_error(404, "unknown-page",
                                 f"run {store.run_id!r} has no page {page_index}"))

    def read_scene(store: ProjectStore, page_index: int) -> SceneProgram:
        path = store.page_path(page_index, "scene")
        if not path.is_file():
            raise _Reject(_error(409, "no-scene",
                                 f"page {page_index} has no scene yet"))
        return store.read(path, SceneProgram)

    def stored_edits(store: ProjectStore, page_index: int) -> EditSet | None:
        return store.try_read(store.page_path(page_index, "edits"), EditSet)

    def revision_of(store: ProjectStore, page_index: int) -> str:
        digest = hashlib.sha256()
        for name in ("scene", "edits"):
            path = store.page_path(page_index, name)
            digest.update(path.read_bytes() if path.is_file() else b"")
            digest.update(b"\x00")
        return digest.hexdigest()[:12]

    def check_revision(store: ProjectStore, page_index: int, given: str | None) -> None:
        current = revision_of(store, page_index)
        if given != current:
            raise _Reject(_error(409, "stale-revision",
                                 f"expected revision {current}"))

    def preview_scene(store: ProjectStore, page_index: int) -> SceneProgram:
        """Scene as the educator should see it: pending edits applied."""
        scene = read_scene(store, page_index)
        edits = stored_edits(store, page_index)
        if edits is not None and scene.stage is SceneStage.LAID_OUT:
            scene = apply_human_edits(scene, edits)
        return scene

    @app.exception_handler(_Reject)
    async def _on_reject(request: Request, exc: _Reject) -> Response:
        return exc.response

    @app.exception_handler(ResumeError)
    async def _on_store_error(request: Request, exc: ResumeError) -> Response:
        return _error(500, "store-error", str(exc))

    # -- read endpoints --------------------------------------------------

    @app.get("/runs")
    async def list_runs() -> Response:
        rows = []
        for run_id in ProjectStore.list_runs(root):
            store = ProjectStore(root, run_id)
            state = store.load_state()
            rows.append({
                "run_id": run_id,
                "global_stage": state.global_stage.value,
                "page_count": len(store.page_indices()),
            })
        return _json(rows)

    @app.get("/runs/{run_id}/config")
    async def get_config(run_id: str) -> Response:
        store = open_store(run_id)
        return _model(store.read(store.path("config"), PipelineConfig))

    @app.get("/runs/{run_id}/pages")
    async def list_pages(run_id: str) -> Response:
        store = open_store(run_id)
        state = store.load_state()
        rows = []
        for i in store.page_indices():
            blueprint = store.try_read(store.page_path(i, "blueprint"), PageBlueprint)
            scene = store.try_read(store.page_path(i, "scene"), SceneProgram)
            record = store.try_read(store.page_path(i, "conflicts"), LayoutRecord)
            stage = state.stage_of(i)
            rows.append({
                "approved": state.page_at_least(i, PageStage.FINAL),
                "conflict_count": record.current.conflict_count if record else 0,
                "page_index": i,
                "revision": revision_of(store, i),
                "scene_stage": scene.stage.value if scene else None,
                "stage": stage.value if stage else None,
                "title": blueprint.title if blueprint else "",
            })
        return _json(rows)

    @app.get("/runs/{run_id}/pages/{page_index}/preview")
    async def get_preview(run_id: str, page_index: int) -> Response:
        store = open_store(run_id)
        page_of(store, page_index)
        cfg = store.read(store.path("config"), PipelineConfig)
        scene = preview_scene(store, page_index)
        return Response(content=svg_preview(scene, cfg.frame),
                        media_type="image/svg+xml",
                        headers={"X-Revision": revision_of(store, page_index)})

    @app.get("/runs/{run_id}/pages/{page_index}/conflicts")
    async def get_conflicts(run_id: str, page_index: int) -> Response:
        store = open_store(run_id)
        page_of(store, page_index)
        record = store.try_read(store.page_path(page_index, "conflicts"), LayoutRecord)
        if record is None:
            raise _Reject(_error(409, "no-conflicts",
                                 f"page {page_index} has not been laid out yet"))
        return _model(record.current,
                      headers={"X-Revision": revision_of(store, page_index)})

    # -- mutating endpoints ----------------------------------------------

    @app.post("/runs/{run_id}/pages/{page_index}/edits")
    async def post_edits(run_id: str, page_index: int, request: Request,
                         revision: str | None = None) -> Response:
        store = open_store(run_id)
        page_of(store, page_index)
        state = store.load_state()
        if state.page_at_least(page_index, PageStage.FINAL):
            raise _Reject(_error(409, "page-final",
                                 f"page {page_index} is already approved"))
        if not state.page_at_least(page_index, PageStage.LAID_OUT):
            raise _Reject(_error(409, "page-not-ready",
                                 f"page {page_index} has not been laid out yet"))
        check_revision(store, page_index, revision)
        body = await request.body()
        try:
            edits = deserialize(body)
        except (ParseError, SchemaError) as exc:
            raise _Reject(_error(400, "bad-edit-set", str(exc)))
        if not isinstance(edits, EditSet):
            raise _Reject(_error(400, "bad-edit-set",
                                 f"expected an EditSet, got {type(edits).__name__}"))
        if edits.page_index != page_index:
            raise _Reject(_error(400, "wrong-page",
                                 f"edit set is for page {edits.page_index}"))
        scene = read_scene(store, page_index)
        cfg = store.read(store.path("config"), PipelineConfig)
        try:
            what_if = apply_human_edits(scene, edits)
        except EditError as exc:
            raise _Reject(_error(400, "bad-edit", str(exc)))
        report = detect_conflicts(what_if, cfg.frame, cfg.margin_u)
        record = store.read(store.page_path(page_index, "conflicts"), LayoutRecord)
        store.write(store.page_path(page_index, "edits"), edits)
        store.write(store.page_path(page_index, "conflicts"),
                    LayoutRecord(page_index=record.page_index, before=record.before,
                                 plan=record.plan, after=record.after,
                                 post_edit=report))
        return _model(report,
                      headers={"X-Revision": revision_of(store, page_index)})

    @app.post("/runs/{run_id}/pages/{page_index}/approve")
    async def post_approve(run_id: str, page_index: int,
                           revision: str | None = None) -> Response:
        store = open_store(run_id)
        page_of(store, page_index)
        state = store.load_state()
        if state.page_at_least(page_index, PageStage.FINAL):
            return _json({"page_index": page_index, "stage": PageStage.FINAL.value})
        if not state.page_at_least(page_index, PageStage.LAID_OUT):
            raise _Reject(_error(409, "page-not-ready",
                                 f"page {page_index} has not been laid out yet"))
        check_revision(store, page_index, revision)
        scene = read_scene(store, page_index)
        cfg = store.read(store.path("config"), PipelineConfig)
        edits = stored_edits(store, page_index)
        if edits is None:
            edits = EditSet(page_index=page_index, edits=(), editor="review",
                            timestamp="")
            store.write(store.page_path(page_index, "edits"), edits)
        final = apply_human_edits(scene, edits)
        report = detect_conflicts(final, cfg.frame, cfg.margin_u)
        record = store.read(store.page_path(page_index, "conflicts"), LayoutRecord)
        store.write(store.page_path(page_index, "conflicts"),
                    LayoutRecord(page_index=record.page_index, before=record.before,
                                 plan=record.plan, after=record.after,
                                 post_edit=report))
        store.write(store.page_path(page_index, "scene"), final)
        store.save_state(state.advance_page(page_index, PageStage.FINAL))
        return _json({"page_index": page_index, "stage": PageStage.FINAL.value})

    @app.post("/runs/{run_id}/continue")
    async def post_continue(run_id: str) -> Response:
        store = open_store(run_id)
        state = store.load_state()
        pending = [i for i in store.page_indices()
                   if not state.page_at_least(i, PageStage.FINAL)]
        if pending:
            raise _Reject(_error(409, "pages-pending",
                                 f"pages not yet approved: {pending}"))
        if make_backends is None:
            raise _Reject(_error(500, "no-backends",
                                 "server started without pipeline backends"))
        from . import pipeline
        cfg = store.read(store.path("config"), PipelineConfig)
        try:
            output = pipeline.resume(run_id, backends=make_backends(cfg),
                                     project_root=root)
        except RunLocked as exc:
            raise _Reject(_error(409, "run-locked", str(exc)))
        state = store.load_state()
        body = {"global_stage": state.global_stage.value, "run_id": run_id}
        if output is not None:
            body["total_duration_s"] = output.video_plan.total_duration_s
        return _json(body)

    return app
