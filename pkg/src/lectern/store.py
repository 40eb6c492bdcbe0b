"""Run-directory persistence: project layout, run state, locking.

Everything a run produces lives under one directory, all files in the
canonical format:

    project/<run-id>/
      config            PipelineConfig the run was started with
      outline           LectureOutline the run was started from
      manuscript        composed Manuscript
      state             RunState (stage maps plus the append-only trace)
      merge-manifest    VideoArtifact written by the merge step
      output            PipelineOutput, once merged
      pages/<i>/
        blueprint       PageBlueprint
        scene           SceneProgram at its furthest completed stage
        script          NarrationScript
        audio-meta      SynthesisResult
        conflicts       LayoutRecord (conflict reports plus placement plan)
        trace           PageTrace (sync drift, debug attempts, warnings)
        edits           EditSet, when review supplies one

Writes go to a temp file in the target directory followed by an atomic
rename, so a crash at any point never exposes a partial artifact.  The
run state embeds the trace and is rewritten atomically on every event;
trace events carry no wall-clock timestamps, which keeps replayed runs
byte-for-byte stable.
"""

from __future__ import annotations

import hashlib
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import TypeVar

from .canonical import (CanonicalModel, ParseError, SchemaError, deserialize,
                        register, serialize)
from .debugger import DebugTrace
from .model import (ConflictReport, LectureOutline, PipelineConfig,
                    PlacementPlan)
from .synchronizer import DriftReport

__all__ = [
    "ARTIFACT_NAMES",
    "GlobalStage",
    "LayoutRecord",
    "PageStage",
    "PageTrace",
    "ProjectStore",
    "ResumeError",
    "RunLock",
    "RunLocked",
    "RunState",
    "TraceEvent",
    "run_id_for",
    "stage_event_counts",
]

ARTIFACT_NAMES = ("blueprint", "scene", "script", "audio-meta", "conflicts",
                  "trace", "edits")

_TMP_PREFIX = ".tmp-"


class ResumeError(RuntimeError):
    """A persisted artifact is missing or corrupt; names the file."""

    def __init__(self, message: str, path: Path | None = None):
        super().__init__(message)
        self.path = path


class RunLocked(RuntimeError):
    """Another live process owns this run directory."""


# ---------------------------------------------------------------------------
# Stage enums
# ---------------------------------------------------------------------------

class GlobalStage(str, Enum):
    """Whole-run progression; declaration order is stage order."""

    PLANNED = "planned"              # manuscript composed and persisted
    PAGINATED = "paginated"          # every page blueprint persisted
    GENERATED = "generated"          # every page has scene, script, audio
    VALIDATED = "validated"          # sync + debug + layout done everywhere
    AWAITING_REVIEW = "awaiting_review"
    RENDERED = "rendered"
    MERGED = "merged"


GLOBAL_ORDER: dict[GlobalStage, int] = {s: i for i, s in enumerate(GlobalStage)}


class PageStage(str, Enum):
    """Furthest completed per-page milestone; declaration order is order."""

    GENERATED = "generated"          # scene persisted
    NARRATED = "narrated"            # script + audio-meta persisted
    LAID_OUT = "laid_out"            # synced/debugged/laid-out scene persisted
    FINAL = "final"                  # human (or empty) edits applied
    RENDERED = "rendered"


PAGE_ORDER: dict[PageStage, int] = {s: i for i, s in enumerate(PageStage)}


# ---------------------------------------------------------------------------
# Run state and trace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceEvent(CanonicalModel):
    """One append-only trace entry.  Deliberately has no timestamp."""

    event: str
    detail: str = ""
    page_index: int | None = None


@register
@dataclass(frozen=True)
class RunState(CanonicalModel):
    run_id: str
    global_stage: GlobalStage = GlobalStage.PLANNED
    page_stages: dict[str, PageStage] = field(default_factory=dict)
    trace: tuple[TraceEvent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "trace", tuple(self.trace))

    # -- queries ---------------------------------------------------------

    def stage_of(self, page_index: int) -> PageStage | None:
        return self.page_stages.get(str(page_index))

    def page_at_least(self, page_index: int, stage: PageStage) -> bool:
        current = self.stage_of(page_index)
        return current is not None and PAGE_ORDER[current] >= PAGE_ORDER[stage]

    def global_at_least(self, stage: GlobalStage) -> bool:
        return GLOBAL_ORDER[self.global_stage] >= GLOBAL_ORDER[stage]

    # -- transitions (each returns a new value; stages never regress) ----

    def advance_page(self, page_index: int, stage: PageStage) -> "RunState":
        current = self.stage_of(page_index)
        if current is not None and PAGE_ORDER[stage] <= PAGE_ORDER[current]:
            raise ValueError(
                f"page {page_index} stage cannot move {current.value} -> {stage.value}")
        stages = dict(self.page_stages)
        stages[str(page_index)] = stage
        event = TraceEvent(event="page-stage", detail=stage.value, page_index=page_index)
        return replace(self, page_stages=stages, trace=self.trace + (event,))

    def advance_global(self, stage: GlobalStage) -> "RunState":
        if GLOBAL_ORDER[stage] <= GLOBAL_ORDER[self.global_stage]:
            raise ValueError(
                f"global stage cannot move {self.global_stage.value} -> {stage.value}")
        event = TraceEvent(event="global-stage", detail=stage.value)
        return replace(self, global_stage=stage, trace=self.trace + (event,))

    def log(self, event: str, detail: str = "",
            page_index: int | None = None) -> "RunState":
        entry = TraceEvent(event=event, detail=detail, page_index=page_index)
        return replace(self, trace=self.trace + (entry,))


def stage_event_counts(state: RunState) -> Counter:
    """How often each stage event occurred; resume must keep these at 1."""
    return Counter((e.event, e.page_index, e.detail)
                   for e in state.trace
                   if e.event in ("page-stage", "global-stage"))


# ---------------------------------------------------------------------------
# Per-page composite artifacts
# ---------------------------------------------------------------------------

@register
@dataclass(frozen=True)
class LayoutRecord(CanonicalModel):
    """What the layout pass saw and did; `pages/<i>/conflicts` on disk.

    `post_edit` is refreshed whenever human edits are applied or tried
    out, so the review surface always reads the current report here.
    """

    page_index: int
    before: ConflictReport
    plan: PlacementPlan
    after: ConflictReport
    post_edit: ConflictReport | None = None

    @property
    def current(self) -> ConflictReport:
        return self.post_edit if self.post_edit is not None else self.after


@register
@dataclass(frozen=True)
class PageTrace(CanonicalModel):
    """Per-page diagnostics; `pages/<i>/trace` on disk."""

    page_index: int
    sync_warnings: tuple[str, ...] = ()
    drift: DriftReport | None = None
    debug: DebugTrace | None = None

    def __post_init__(self):
        object.__setattr__(self, "sync_warnings", tuple(self.sync_warnings))


# ---------------------------------------------------------------------------
# Run identity
# ---------------------------------------------------------------------------

def run_id_for(outline: LectureOutline, config: PipelineConfig) -> str:
    """Deterministic run id from the two inputs that define a run."""
    digest = hashlib.sha256(serialize(outline) + serialize(config)).hexdigest()
    return f"run-{digest[:12]}"


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

M = TypeVar("M", bound=CanonicalModel)


class ProjectStore:
    """Path scheme plus atomic read/write for one run directory."""

    def __init__(self, project_root: str | Path, run_id: str):
        self.root = Path(project_root)
        self.run_id = run_id
        self.run_dir = self.root / run_id

    # -- paths -----------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def page_dir(self, page_index: int) -> Path:
        return self.run_dir / "pages" / str(page_index)

    def page_path(self, page_index: int, name: str) -> Path:
        if name not in ARTIFACT_NAMES:
            raise ValueError(f"unknown page artifact {name!r}")
        return self.page_dir(page_index) / name

    def page_indices(self) -> list[int]:
        pages = self.run_dir / "pages"
        if not pages.is_dir():
            return []
        return sorted(int(p.name) for p in pages.iterdir()
                      if p.is_dir() and p.name.isdigit())

    # -- I/O -------------------------------------------------------------

    def write(self, path: Path, model: CanonicalModel) -> None:
        """Serialize and atomically replace `path`."""
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / f"{_TMP_PREFIX}{path.name}"
        tmp.write_bytes(serialize(model))
        os.replace(tmp, path)

    def read(self, path: Path, cls: type[M]) -> M:
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise ResumeError(f"cannot read artifact {path}: {exc}", path) from exc
        try:
            value = deserialize(data)
        except (ParseError, SchemaError) as exc:
            raise ResumeError(f"corrupt artifact {path}: {exc}", path) from exc
        if not isinstance(value, cls):
            raise ResumeError(
                f"artifact {path} holds {type(value).__name__}, expected {cls.__name__}",
                path)
        return value

    def try_read(self, path: Path, cls: type[M]) -> M | None:
        return self.read(path, cls) if path.is_file() else None

    # -- state -----------------------------------------------------------

    @property
    def state_path(self) -> Path:
        return self.path("state")

    def has_state(self) -> bool:
        return self.state_path.is_file()

    def load_state(self) -> RunState:
        return self.read(self.state_path, RunState)

    def save_state(self, state: RunState) -> None:
        self.write(self.state_path, state)

    # -- housekeeping ----------------------------------------------------

    def clean_temp(self) -> None:
        """Drop temp files a crashed writer may have left behind."""
        if self.run_dir.is_dir():
            for stray in self.run_dir.rglob(f"{_TMP_PREFIX}*"):
                stray.unlink(missing_ok=True)

    @staticmethod
    def list_runs(project_root: str | Path) -> list[str]:
        root = Path(project_root)
        if not root.is_dir():
            return []
        return sorted(p.name for p in root.iterdir()
                      if p.is_dir() and (p / "state").is_file())


# ---------------------------------------------------------------------------
# Locking
# ---------------------------------------------------------------------------

def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class RunLock:
    """One pipeline execution per run directory, via a pid lock file.

    A lock whose owning pid is gone (crashed run) is treated as stale
    and taken over, which is what makes resume-after-kill work.
    """

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / ".lock"
        self.acquired = False

    def acquire(self) -> "RunLock":
        self.run_dir.mkdir(parents=True, exist_ok=True)
        for _ in range(3):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                try:
                    owner = int(self.path.read_text().strip() or "0")
                except (OSError, ValueError):
                    owner = 0
                if owner and owner != os.getpid() and _pid_alive(owner):
                    raise RunLocked(
                        f"run directory {self.run_dir} is locked by pid {owner}")
                self.path.unlink(missing_ok=True)
                continue
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            self.acquired = True
            return self
        raise RunLocked(f"could not acquire lock in {self.run_dir}")

    def release(self) -> None:
        if self.acquired:
            self.path.unlink(missing_ok=True)
            self.acquired = False

    def __enter__(self) -> "RunLock":
        return self.acquire()

    def __exit__(self, *exc) -> None:
        self.release()
