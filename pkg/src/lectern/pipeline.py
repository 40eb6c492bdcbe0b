"""End-to-end orchestration: stage graph, fan-out, resume, render, merge.

run() drives composer -> paginator -> per page {codegen -> narrator ->
synchronizer -> debugger -> layout}; with review enabled it parks the
run at awaiting_review (returning None) until the review API has
promoted every page to final, after which resume() renders, muxes and
merges.  Without review, pages are promoted with an empty edit set and
the run completes in one call.

Narration is the sequential backbone: each page's prompt sees the tail
of the previous page's script, so scene generation fans out across a
worker pool while narration consumes the results in page order.  The
coordinating thread owns all state mutation and persists artifacts in
page order, which makes the run state and trace byte-deterministic for
equal inputs.

Fault hook for crash testing: when the environment variable
LECTERN_CRASH_AFTER is "<stage>:<page>" (or "<stage>" for a global
stage), the process exits hard with code 137 immediately after that
stage advance is persisted.  Resume then has to pick up exactly there.
"""

from __future__ import annotations

import os
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol

from .assets import prompt_template
from .codegen import emit, generate_scene, get_dialect
from .composer import expand, refine, skeletonize
from .debugger import DebugTrace, FinalOutcome, NullRenderer, Renderer, run_debug_loop
from .gateway import Gateway
from .layout import apply_human_edits, apply_layout, detect_conflicts, retrieve_positions
from .model import (AudioAsset, EditSet, LectureOutline, Manuscript,
                    NarrationScript, PageBlueprint, PipelineConfig,
                    PipelineOutput, SceneProgram, VideoArtifact,
                    VideoSegmentRef)
from .narrator import GatewayTts, SynthesisResult, TtsBackend, compose_narration, synthesize
from .paginator import aggregate, paginate_all, segment
from .store import (GlobalStage, LayoutRecord, PageStage, PageTrace,
                    ProjectStore, ResumeError, RunLock, RunState, run_id_for)
from .synchronizer import DriftReport, align, check_sync

__all__ = [
    "Backends",
    "CRASH_ENV",
    "ExternalFinalRenderer",
    "ExternalMuxer",
    "FinalRenderer",
    "MERGE_MANIFEST_NAME",
    "MergeError",
    "MockFinalRenderer",
    "default_backends",
    "merge",
    "resume",
    "run",
]

CRASH_ENV = "LECTERN_CRASH_AFTER"
MERGE_MANIFEST_NAME = "merge-manifest"


class MergeError(RuntimeError):
    def __init__(self, page_index: int, message: str):
        super().__init__(f"page {page_index}: {message}")
        self.page_index = page_index


def _maybe_crash(stage_value: str, page_index: int | None) -> None:
    want = os.environ.get(CRASH_ENV, "")
    if not want:
        return
    got = stage_value if page_index is None else f"{stage_value}:{page_index}"
    if want == got:
        os._exit(137)


# ---------------------------------------------------------------------------
# Render and mux backends
# ---------------------------------------------------------------------------

class FinalRenderer(Protocol):
    """Full-quality page render; `ref_for` must be deterministic so a
    resumed run can reconstruct refs without re-rendering."""

    def ref_for(self, page_index: int) -> str: ...

    def render_full(self, source: str, page_index: int) -> str: ...


class MockFinalRenderer:
    """Placeholder refs; used whenever no external renderer is configured."""

    def ref_for(self, page_index: int) -> str:
        return f"mock://video/page-{page_index}"

    def render_full(self, source: str, page_index: int) -> str:
        return self.ref_for(page_index)


class ExternalFinalRenderer:
    """Runs a command template per page: {source}, {page}, {out}."""

    def __init__(self, command: tuple[str, ...], workdir: str | Path):
        self.command = tuple(command)
        self.workdir = Path(workdir)

    def ref_for(self, page_index: int) -> str:
        return str(self.workdir / f"segment-{page_index}.mp4")

    def render_full(self, source: str, page_index: int) -> str:
        self.workdir.mkdir(parents=True, exist_ok=True)
        out = self.ref_for(page_index)
        with tempfile.NamedTemporaryFile("w", suffix=".py", dir=self.workdir,
                                         delete=False) as handle:
            handle.write(source)
            src_path = handle.name
        try:
            args = [a.format(source=src_path, page=page_index, out=out)
                    for a in self.command]
            proc = subprocess.run(args, capture_output=True, text=True)
            if proc.returncode != 0:
                raise RuntimeError(
                    f"renderer exited {proc.returncode} for page {page_index}: "
                    f"{proc.stderr.strip()}")
        finally:
            os.unlink(src_path)
        return out


class ExternalMuxer:
    """Mux/concat via command templates, mirroring the renderer contract.

    `mux_command` sees {video}, {audio}, {out}; `concat_command` sees
    {list} (a text file with one input path per line) and {out}.
    """

    def __init__(self, mux_command: tuple[str, ...],
                 concat_command: tuple[str, ...], workdir: str | Path):
        self.mux_command = tuple(mux_command)
        self.concat_command = tuple(concat_command)
        self.workdir = Path(workdir)

    def _run(self, args: list[str], what: str) -> None:
        proc = subprocess.run(args, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"{what} exited {proc.returncode}: {proc.stderr.strip()}")

    def mux(self, video_ref: str, audio_ref: str, page_index: int) -> str:
        self.workdir.mkdir(parents=True, exist_ok=True)
        out = str(self.workdir / f"page-{page_index}.mp4")
        self._run([a.format(video=video_ref, audio=audio_ref, out=out)
                   for a in self.mux_command], "muxer")
        return out

    def concat(self, refs: list[str]) -> str:
        self.workdir.mkdir(parents=True, exist_ok=True)
        listing = self.workdir / "concat.txt"
        listing.write_text("".join(f"{r}\n" for r in refs), encoding="utf-8")
        out = str(self.workdir / "merged.mp4")
        self._run([a.format(list=listing, out=out) for a in self.concat_command],
                  "concat")
        return out


@dataclass
class Backends:
    """Injected service implementations for one run."""

    gateway: Gateway
    tts: TtsBackend
    renderer: Renderer                      # check mode, feeds the debug loop
    final_renderer: FinalRenderer
    muxer: ExternalMuxer | None = None      # None: merge emits a manifest


def default_backends(cfg: PipelineConfig, gateway: Gateway, *,
                     tts: TtsBackend | None = None,
                     renderer: Renderer | None = None,
                     final_renderer: FinalRenderer | None = None,
                     muxer: ExternalMuxer | None = None) -> Backends:
    return Backends(
        gateway=gateway,
        tts=tts if tts is not None else GatewayTts(gateway, cfg.words_per_minute_default),
        renderer=renderer if renderer is not None else NullRenderer(),
        final_renderer=final_renderer if final_renderer is not None else MockFinalRenderer(),
        muxer=muxer,
    )


# ---------------------------------------------------------------------------
# Merge
# ---------------------------------------------------------------------------

def merge(rendered: Mapping[int, str], audio: Iterable[AudioAsset], *,
          merged_ref: str | None = None) -> VideoArtifact:
    """Pair rendered segments with audio, in page order, and sum durations.

    With mock backends there is no media to concatenate; merged_ref then
    names the manifest (or the lone segment, which needs no merging).
    """
    by_page: dict[int, AudioAsset] = {}
    for asset in audio:
        if asset.page_index in by_page:
            raise MergeError(asset.page_index, "duplicate audio asset")
        by_page[asset.page_index] = asset
    pages = sorted(set(rendered) | set(by_page))
    if not pages:
        raise MergeError(0, "nothing to merge")
    segments = []
    for i in pages:
        if i not in rendered:
            raise MergeError(i, "no rendered segment")
        if i not in by_page:
            raise MergeError(i, "no audio asset")
        asset = by_page[i]
        segments.append(VideoSegmentRef(
            page_index=i,
            video_ref=rendered[i],
            audio_ref=asset.media_ref or f"mock://audio/page-{i}",
            duration_s=asset.duration_s,
        ))
    if merged_ref is None:
        merged_ref = segments[0].video_ref if len(segments) == 1 else MERGE_MANIFEST_NAME
    return VideoArtifact.build(segments, merged_ref)


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

@dataclass
class _Tail:
    scene: SceneProgram
    warnings: tuple[str, ...]
    drift: DriftReport
    debug: DebugTrace
    record: LayoutRecord


class _Runner:
    def __init__(self, store: ProjectStore, state: RunState, outline: LectureOutline,
                 cfg: PipelineConfig, backends: Backends,
                 until: GlobalStage | None = None):
        self.store = store
        self.state = state
        self.outline = outline
        self.cfg = cfg
        self.backends = backends
        self.until = until

    # -- state plumbing --------------------------------------------------

    def _log(self, event: str, detail: str = "", page_index: int | None = None) -> None:
        # saved together with the next stage advance
        self.state = self.state.log(event, detail, page_index)

    def _advance_page(self, page_index: int, stage: PageStage) -> None:
        self.state = self.state.advance_page(page_index, stage)
        self.store.save_state(self.state)
        _maybe_crash(stage.value, page_index)

    def _advance_global(self, stage: GlobalStage) -> None:
        self.state = self.state.advance_global(stage)
        self.store.save_state(self.state)
        _maybe_crash(stage.value, None)

    def _done(self) -> bool:
        return (self.until is not None
                and self.state.global_at_least(self.until))

    # -- phases ----------------------------------------------------------

    def _plan(self) -> Manuscript:
        path = self.store.path("manuscript")
        if path.is_file():
            return self.store.read(path, Manuscript)
        gw = self.backends.gateway
        skeleton = skeletonize(self.outline, gateway=gw)
        manuscript = expand(skeleton, gateway=gw,
                            audience=self.outline.audience_level,
                            lang=self.outline.language,
                            parallelism=self.cfg.parallelism)
        outcome = refine(manuscript, self.cfg.target_duration_s,
                         self.cfg.words_per_minute_default, gateway=gw)
        self.store.write(path, outcome.manuscript)
        for name in ("skeletonize_v1", "expand_v1", "refine_v1"):
            self._log("prompt-asset", prompt_template("composer", name)[0])
        if not outcome.converged:
            self._log("refine-nonconverged", f"{len(outcome.actions)} actions")
        self.store.save_state(self.state)
        return outcome.manuscript

    def _paginate(self, manuscript: Manuscript) -> list[PageBlueprint]:
        if self.state.global_at_least(GlobalStage.PAGINATED):
            return [self.store.read(self.store.page_path(i, "blueprint"), PageBlueprint)
                    for i in self.store.page_indices()]
        segments = segment(manuscript, self.cfg.max_words_per_segment)
        per_segment = paginate_all(segments, self.cfg.page_density_max,
                                   gateway=self.backends.gateway,
                                   parallelism=self.cfg.parallelism)
        blueprints = aggregate(per_segment, section_count=len(manuscript.sections))
        for bp in blueprints:
            self.store.write(self.store.page_path(bp.page_index, "blueprint"), bp)
        self._log("prompt-asset", prompt_template("paginator", "paginate_v1")[0])
        self._advance_global(GlobalStage.PAGINATED)
        return blueprints

    def _generate(self, pool: ThreadPoolExecutor, blueprints: list[PageBlueprint],
                  scenes: dict[int, SceneProgram], scripts: dict[int, NarrationScript],
                  synths: dict[int, SynthesisResult]) -> None:
        gw = self.backends.gateway
        futures = {}
        for bp in blueprints:
            i = bp.page_index
            if self.state.page_at_least(i, PageStage.GENERATED):
                scenes[i] = self.store.read(self.store.page_path(i, "scene"), SceneProgram)
            else:
                futures[i] = pool.submit(generate_scene, bp, gw)
        prev: NarrationScript | None = None
        for bp in blueprints:
            i = bp.page_index
            if i in futures:
                scenes[i] = futures[i].result()
                self.store.write(self.store.page_path(i, "scene"), scenes[i])
                self._advance_page(i, PageStage.GENERATED)
            if self.state.page_at_least(i, PageStage.NARRATED):
                scripts[i] = self.store.read(self.store.page_path(i, "script"),
                                             NarrationScript)
                synths[i] = self.store.read(self.store.page_path(i, "audio-meta"),
                                            SynthesisResult)
            else:
                anchors = {e.anchor_id for e in scenes[i].events}
                script = compose_narration(bp, prev, gateway=gw, anchors=anchors,
                                           lang=self.outline.language)
                synth = synthesize(script, self.cfg.voice_id, self.backends.tts)
                self.store.write(self.store.page_path(i, "script"), script)
                self.store.write(self.store.page_path(i, "audio-meta"), synth)
                scripts[i], synths[i] = script, synth
                self._advance_page(i, PageStage.NARRATED)
            prev = scripts[i]
        if not self.state.global_at_least(GlobalStage.GENERATED):
            self._log("prompt-asset", prompt_template("codegen", "scene_v1")[0])
            self._log("prompt-asset", prompt_template("narrator", "narrate_v1")[0])
            self._advance_global(GlobalStage.GENERATED)

    def _validate(self, pool: ThreadPoolExecutor, blueprints: list[PageBlueprint],
                  scenes: dict[int, SceneProgram], scripts: dict[int, NarrationScript],
                  synths: dict[int, SynthesisResult]) -> None:
        gw = self.backends.gateway
        cfg = self.cfg
        dialect = get_dialect(cfg.dialect)

        def tail(i: int) -> _Tail:
            aligned = align(scenes[i], scripts[i], synths[i])
            drift = check_sync(aligned.scene, synths[i])
            debugged, debug_trace = run_debug_loop(
                aligned.scene, self.backends.renderer, cfg.retry_threshold,
                gateway=gw, dialect=dialect)
            before = detect_conflicts(debugged, cfg.frame, cfg.margin_u)
            plan = retrieve_positions(before, debugged, cfg.frame,
                                      cell_u=cfg.grid_cell_u, margin_u=cfg.margin_u)
            laid_out = apply_layout(debugged, plan)
            after = detect_conflicts(laid_out, cfg.frame, cfg.margin_u)
            return _Tail(scene=laid_out, warnings=aligned.warnings, drift=drift,
                         debug=debug_trace,
                         record=LayoutRecord(page_index=i, before=before,
                                             plan=plan, after=after))

        futures = {bp.page_index: pool.submit(tail, bp.page_index)
                   for bp in blueprints
                   if not self.state.page_at_least(bp.page_index, PageStage.LAID_OUT)}
        for bp in blueprints:
            i = bp.page_index
            if i not in futures:
                continue
            result = futures[i].result()
            scenes[i] = result.scene
            self.store.write(self.store.page_path(i, "scene"), result.scene)
            self.store.write(self.store.page_path(i, "conflicts"), result.record)
            self.store.write(self.store.page_path(i, "trace"),
                             PageTrace(page_index=i, sync_warnings=result.warnings,
                                       drift=result.drift, debug=result.debug))
            for message in result.warnings:
                self._log("sync-warning", message, page_index=i)
            if result.debug.final_outcome is FinalOutcome.FALLBACK:
                ids = ",".join(s.element_id for s in result.debug.fallback_substitutions)
                self._log("debug-fallback", ids, page_index=i)
            self._advance_page(i, PageStage.LAID_OUT)
        if not self.state.global_at_least(GlobalStage.VALIDATED):
            self._advance_global(GlobalStage.VALIDATED)

    def _finalize_batch(self, blueprints: list[PageBlueprint],
                        scenes: dict[int, SceneProgram]) -> None:
        """No review: promote each page to final with an empty edit set."""
        for bp in blueprints:
            i = bp.page_index
            if self.state.page_at_least(i, PageStage.FINAL):
                continue
            empty = EditSet(page_index=i, edits=(), editor="pipeline", timestamp="")
            final = apply_human_edits(scenes[i], empty)
            fresh = detect_conflicts(final, self.cfg.frame, self.cfg.margin_u)
            record = self.store.read(self.store.page_path(i, "conflicts"), LayoutRecord)
            self.store.write(self.store.page_path(i, "conflicts"),
                             replace(record, post_edit=fresh))
            self.store.write(self.store.page_path(i, "scene"), final)
            scenes[i] = final
            self._advance_page(i, PageStage.FINAL)

    def _render(self, pool: ThreadPoolExecutor, pages: list[int],
                scenes: dict[int, SceneProgram]) -> dict[int, str]:
        renderer = self.backends.final_renderer
        dialect = get_dialect(self.cfg.dialect)
        refs: dict[int, str] = {}
        futures = {}
        for i in pages:
            if self.state.page_at_least(i, PageStage.RENDERED):
                refs[i] = renderer.ref_for(i)
            else:
                futures[i] = pool.submit(renderer.render_full, emit(scenes[i], dialect), i)
        for i in pages:
            if i in futures:
                refs[i] = futures[i].result()
                self._advance_page(i, PageStage.RENDERED)
        if not self.state.global_at_least(GlobalStage.RENDERED):
            self._advance_global(GlobalStage.RENDERED)
        return refs

    def _merge_run(self, pages: list[int], scripts: dict[int, NarrationScript],
                   synths: dict[int, SynthesisResult], manuscript: Manuscript,
                   refs: dict[int, str]) -> PipelineOutput:
        audio = [synths[i].audio for i in pages]
        if self.backends.muxer is not None:
            for asset in audio:
                if asset.media_ref is None:
                    raise MergeError(asset.page_index, "no audio media to mux")
            muxed = [self.backends.muxer.mux(refs[i], audio[k].media_ref, i)
                     for k, i in enumerate(pages)]
            merged_ref = (muxed[0] if len(muxed) == 1
                          else self.backends.muxer.concat(muxed))
            artifact = merge(refs, audio, merged_ref=merged_ref)
        else:
            artifact = merge(refs, audio)
        self.store.write(self.store.path(MERGE_MANIFEST_NAME), artifact)
        output = PipelineOutput(video_plan=artifact,
                                lecture_scripts=tuple(scripts[i] for i in pages),
                                manuscript=manuscript)
        self.store.write(self.store.path("output"), output)
        self._advance_global(GlobalStage.MERGED)
        return output

    # -- top level -------------------------------------------------------

    def execute(self) -> PipelineOutput | None:
        if self.state.global_at_least(GlobalStage.MERGED):
            return self.store.read(self.store.path("output"), PipelineOutput)
        manuscript = self._plan()
        if self._done():
            return None
        blueprints = self._paginate(manuscript)
        if self._done():
            return None
        pages = [bp.page_index for bp in blueprints]
        scenes: dict[int, SceneProgram] = {}
        scripts: dict[int, NarrationScript] = {}
        synths: dict[int, SynthesisResult] = {}
        workers = max(1, min(len(pages), self.cfg.parallelism))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            self._generate(pool, blueprints, scenes, scripts, synths)
            if self._done():
                return None
            self._validate(pool, blueprints, scenes, scripts, synths)
            if self._done():
                return None
            review = self.cfg.review_enabled
            if review and not all(self.state.page_at_least(i, PageStage.FINAL)
                                  for i in pages):
                if self.state.global_stage is not GlobalStage.AWAITING_REVIEW:
                    self._advance_global(GlobalStage.AWAITING_REVIEW)
                return None
            if not review:
                self._finalize_batch(blueprints, scenes)
            refs = self._render(pool, pages, scenes)
        return self._merge_run(pages, scripts, synths, manuscript, refs)


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def run(outline: LectureOutline, cfg: PipelineConfig, *, backends: Backends,
        project_root: str | Path = "project",
        until: GlobalStage | None = None) -> PipelineOutput | None:
    """Run (or re-enter) the pipeline; None means parked for review.

    The run id is derived from outline + config, so calling run twice
    with the same inputs resumes rather than duplicates.  cfg.review_enabled
    selects the review gate; the effective config is persisted with the run.
    """
    run_id = run_id_for(outline, cfg)
    store = ProjectStore(project_root, run_id)
    with RunLock(store.run_dir):
        store.clean_temp()
        if store.has_state():
            state = store.load_state()
        else:
            store.write(store.path("outline"), outline)
            store.write(store.path("config"), cfg)
            state = RunState(run_id=run_id)
            store.save_state(state)
        runner = _Runner(store, state, outline, cfg, backends, until)
        return runner.execute()


def resume(run_id: str, *, backends: Backends,
           project_root: str | Path = "project",
           until: GlobalStage | None = None) -> PipelineOutput | None:
    """Continue a persisted run from its furthest completed stages."""
    store = ProjectStore(project_root, run_id)
    if not store.has_state():
        raise ResumeError(f"no run state under {store.run_dir}", store.state_path)
    outline = store.read(store.path("outline"), LectureOutline)
    cfg = store.read(store.path("config"), PipelineConfig)
    with RunLock(store.run_dir):
        store.clean_temp()
        state = store.load_state()
        runner = _Runner(store, state, outline, cfg, backends, until)
        return runner.execute()
