"""Lectern: deterministic lecture-to-video compilation.

An outline goes in; per-page animation programs, narration scripts with
speech timing, and a merged, timed video plan come out.  All external
services (LLM, TTS, renderer) sit behind a record/replay gateway so the
whole pipeline runs deterministically offline.
"""

from .canonical import ParseError, SchemaError, deserialize, quantize, serialize
from .gateway import FixtureMiss, FixtureStore, Gateway, Mode, ServiceError
from .model import (
    AnimationEvent,
    AudienceLevel,
    AudioAsset,
    BBox,
    ConflictReport,
    Edit,
    EditSet,
    ElementKind,
    EventVerb,
    FrameSpec,
    LectureOutline,
    Manuscript,
    NarrationScript,
    NarrationUnit,
    PageBlueprint,
    PipelineConfig,
    PipelineOutput,
    PlacementPlan,
    ScanOrder,
    SceneElement,
    SceneProgram,
    SceneStage,
    Section,
    Segment,
    Skeleton,
    Span,
    VideoArtifact,
    VisualIntent,
    VisualKind,
    validate_scene,
)
from .pipeline import Backends, default_backends, merge, resume, run
from .store import (
    GlobalStage,
    PageStage,
    ProjectStore,
    ResumeError,
    RunState,
    run_id_for,
)

__version__ = "0.1.0"
