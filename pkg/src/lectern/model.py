"""Shared domain types for the lecture-to-video pipeline.

Every type is a frozen dataclass: values are immutable after construction
and safe to share between worker threads; "mutation" is always a
`dataclasses.replace` producing a new value.  Constructors enforce local
invariants (raising ValueError); cross-reference checks over whole scenes
are data, not failures, and live in :func:`validate_scene`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum

from .canonical import CanonicalModel, register
from .words import count_words

_LANGUAGE_TAG = re.compile(r"^[A-Za-z]{2,8}(-[A-Za-z0-9]{1,8})*$")


def _freeze(obj, name: str) -> None:
    object.__setattr__(obj, name, tuple(getattr(obj, name)))


# ---------------------------------------------------------------------------
# Pipeline input
# ---------------------------------------------------------------------------

class AudienceLevel(str, Enum):
    INTRO = "intro"
    INTERMEDIATE = "intermediate"
    ADVANCED = "advanced"


@register
@dataclass(frozen=True)
class LectureOutline(CanonicalModel):
    """Keyword-level description of the lesson; the pipeline's input."""

    topic_keywords: tuple[str, ...]
    audience_level: AudienceLevel = AudienceLevel.INTRO
    language: str = "en"
    free_notes: str | None = None

    def __post_init__(self):
        _freeze(self, "topic_keywords")
        if not self.topic_keywords:
            raise ValueError("outline needs at least one topic keyword")
        if any(not kw.strip() for kw in self.topic_keywords):
            raise ValueError("topic keywords must be non-blank")
        if not _LANGUAGE_TAG.match(self.language):
            raise ValueError(f"malformed language tag {self.language!r}")


@register
@dataclass(frozen=True)
class FrameSpec(CanonicalModel):
    """The scene coordinate frame: origin at center, +x right, +y up."""

    width_u: float = 16.0
    height_u: float = 9.0

    def __post_init__(self):
        if self.width_u <= 0 or self.height_u <= 0:
            raise ValueError("frame dimensions must be positive")


@register
@dataclass(frozen=True)
class PipelineConfig(CanonicalModel):
    target_duration_s: float = 300.0
    # 2 words per second; durations derived from word counts then land
    # exactly on the six-digit canonical grid
    words_per_minute_default: float = 120.0
    frame: FrameSpec = field(default_factory=FrameSpec)
    page_density_max: int = 8
    retry_threshold: int = 3
    margin_u: float = 0.1
    seed: int = 0
    voice_id: str = "default"
    dialect: str = "manim-ce"
    max_words_per_segment: int = 1200
    grid_cell_u: float = 0.25
    parallelism: int = 4
    review_enabled: bool = False

    def __post_init__(self):
        if self.target_duration_s <= 0:
            raise ValueError("target_duration_s must be positive")
        if self.words_per_minute_default <= 0:
            raise ValueError("words_per_minute_default must be positive")
        if self.page_density_max < 1:
            raise ValueError("page_density_max must be at least 1")
        if self.retry_threshold < 1:
            raise ValueError("retry_threshold must be at least 1")
        if self.margin_u < 0:
            raise ValueError("margin_u must be non-negative")
        if self.max_words_per_segment < 1:
            raise ValueError("max_words_per_segment must be at least 1")
        if self.grid_cell_u <= 0:
            raise ValueError("grid_cell_u must be positive")
        if self.parallelism < 1:
            raise ValueError("parallelism must be at least 1")


# ---------------------------------------------------------------------------
# Content planning artifacts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Concept(CanonicalModel):
    id: str
    title: str
    one_line_gist: str
    depends_on: tuple[str, ...] = ()

    def __post_init__(self):
        _freeze(self, "depends_on")
        if not self.id:
            raise ValueError("concept id must be non-empty")


@register
@dataclass(frozen=True)
class Skeleton(CanonicalModel):
    """Ordered key concepts; dependencies may only point at earlier entries."""

    concepts: tuple[Concept, ...]

    def __post_init__(self):
        _freeze(self, "concepts")
        seen: set[str] = set()
        for concept in self.concepts:
            if concept.id in seen:
                raise ValueError(f"duplicate concept id {concept.id!r}")
            for dep in concept.depends_on:
                if dep not in seen:
                    raise ValueError(
                        f"concept {concept.id!r} depends on {dep!r} which is not an earlier concept"
                    )
            seen.add(concept.id)

    def concept_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.concepts)


@dataclass(frozen=True)
class Section(CanonicalModel):
    concept_id: str
    heading: str
    body: str
    formal_expressions: tuple[str, ...] = ()
    examples: tuple[str, ...] = ()

    def __post_init__(self):
        _freeze(self, "formal_expressions")
        _freeze(self, "examples")
        if not self.body.strip():
            raise ValueError(f"section {self.concept_id!r} has an empty body")

    @property
    def word_count(self) -> int:
        return count_words(self.body)


def section_text(section: Section) -> str:
    """The canonical textual form of one section inside the manuscript stream."""
    return f"{section.heading}\n\n{section.body}\n\n"


@register
@dataclass(frozen=True)
class Manuscript(CanonicalModel):
    sections: tuple[Section, ...]
    word_count: int

    def __post_init__(self):
        _freeze(self, "sections")
        recount = sum(s.word_count for s in self.sections)
        if self.word_count != recount:
            raise ValueError(f"stored word_count {self.word_count} != recomputed {recount}")

    @classmethod
    def build(cls, sections) -> "Manuscript":
        sections = tuple(sections)
        return cls(sections=sections, word_count=sum(s.word_count for s in sections))

    @property
    def text(self) -> str:
        return "".join(section_text(s) for s in self.sections)


@dataclass(frozen=True)
class Span(CanonicalModel):
    """Half-open index range [start, stop) over manuscript sections."""

    start: int
    stop: int

    def __post_init__(self):
        if self.start < 0 or self.stop <= self.start:
            raise ValueError(f"malformed span [{self.start}, {self.stop})")

    def __len__(self) -> int:
        return self.stop - self.start

    def indices(self) -> range:
        return range(self.start, self.stop)

    def covers(self, other: "Span") -> bool:
        return self.start <= other.start and other.stop <= self.stop


@register
@dataclass(frozen=True)
class Segment(CanonicalModel):
    """A contiguous run of whole manuscript sections handed to one local agent."""

    index: int
    span: Span
    text: str


class VisualKind(str, Enum):
    FORMULA = "formula"
    DIAGRAM = "diagram"
    IMAGE_PLACEHOLDER = "image_placeholder"
    TABLE = "table"
    PLAIN_TEXT = "plain_text"


@dataclass(frozen=True)
class VisualIntent(CanonicalModel):
    kind: VisualKind
    payload: str


@register
@dataclass(frozen=True)
class PageBlueprint(CanonicalModel):
    page_index: int
    title: str
    bullet_points: tuple[str, ...]
    visual_intents: tuple[VisualIntent, ...]
    source_span: Span
    est_density: int

    def __post_init__(self):
        _freeze(self, "bullet_points")
        _freeze(self, "visual_intents")
        if self.est_density < 1:
            raise ValueError("est_density must be at least 1")


# ---------------------------------------------------------------------------
# Scene IR
# ---------------------------------------------------------------------------

@register
@dataclass(frozen=True)
class BBox(CanonicalModel):
    """Axis-aligned box given by center and positive extents, in scene units."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"bbox extents must be positive, got w={self.w} h={self.h}")

    @property
    def left(self) -> float:
        return self.cx - self.w / 2

    @property
    def right(self) -> float:
        return self.cx + self.w / 2

    @property
    def top(self) -> float:
        return self.cy + self.h / 2

    @property
    def bottom(self) -> float:
        return self.cy - self.h / 2

    def inflate(self, pad: float) -> "BBox":
        """Grow by `pad` on every side (shrinks when negative)."""
        return BBox(self.cx, self.cy, self.w + 2 * pad, self.h + 2 * pad)

    def intersection_area(self, other: "BBox") -> float:
        """Positive overlap area, or 0.0 when the interiors are disjoint."""
        ow = min(self.right, other.right) - max(self.left, other.left)
        oh = min(self.top, other.top) - max(self.bottom, other.bottom)
        if ow > 0 and oh > 0:
            return ow * oh
        return 0.0

    def contains(self, other: "BBox", eps: float = 1e-9) -> bool:
        return (self.left <= other.left + eps and other.right <= self.right + eps
                and self.bottom <= other.bottom + eps and other.top <= self.top + eps)


class ElementKind(str, Enum):
    TEXT = "text"
    FORMULA = "formula"
    SHAPE = "shape"
    IMAGE_PLACEHOLDER = "image_placeholder"
    GROUP = "group"


@dataclass(frozen=True)
class SceneElement(CanonicalModel):
    id: str
    kind: ElementKind
    content: str
    bbox: BBox
    style: dict[str, str] = field(default_factory=dict)
    children: tuple[str, ...] = ()

    def __post_init__(self):
        _freeze(self, "children")
        if not self.id:
            raise ValueError("element id must be non-empty")
        if self.kind is not ElementKind.GROUP and self.children:
            raise ValueError(f"non-group element {self.id!r} cannot have children")


class EventVerb(str, Enum):
    APPEAR = "appear"
    TRANSFORM = "transform"
    HIGHLIGHT = "highlight"
    DISAPPEAR = "disappear"
    WAIT = "wait"


@dataclass(frozen=True)
class AnimationEvent(CanonicalModel):
    anchor_id: str
    verb: EventVerb
    target_ids: tuple[str, ...] = ()
    duration_s: float = 0.0
    start_s: float | None = None

    def __post_init__(self):
        _freeze(self, "target_ids")
        if not self.anchor_id:
            raise ValueError("event anchor_id must be non-empty")
        if self.duration_s < 0:
            raise ValueError("event duration_s must be non-negative")
        if self.start_s is not None and self.start_s < 0:
            raise ValueError("event start_s must be non-negative")


class SceneStage(str, Enum):
    GENERATED = "generated"
    SYNCED = "synced"
    DEBUGGED = "debugged"
    LAID_OUT = "laid_out"
    FINAL = "final"


STAGE_ORDER: dict[SceneStage, int] = {s: i for i, s in enumerate(SceneStage)}


@register
@dataclass(frozen=True)
class SceneProgram(CanonicalModel):
    """A page's typed scene IR plus its emitted source and pipeline stage tag."""

    page_index: int
    elements: tuple[SceneElement, ...] = ()
    events: tuple[AnimationEvent, ...] = ()
    source_text: str = ""
    stage: SceneStage = SceneStage.GENERATED

    def __post_init__(self):
        _freeze(self, "elements")
        _freeze(self, "events")

    def element_map(self) -> dict[str, SceneElement]:
        return {e.id: e for e in self.elements}

    def at_stage(self, stage: SceneStage) -> "SceneProgram":
        """Return a copy tagged with `stage`; stages only ever move forward."""
        if STAGE_ORDER[stage] < STAGE_ORDER[self.stage]:
            raise ValueError(f"stage cannot regress from {self.stage.value} to {stage.value}")
        return replace(self, stage=stage)


# ---------------------------------------------------------------------------
# Narration artifacts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NarrationUnit(CanonicalModel):
    unit_id: str
    text: str
    anchor_ref: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"narration unit {self.unit_id!r} has empty text")


@register
@dataclass(frozen=True)
class NarrationScript(CanonicalModel):
    page_index: int
    units: tuple[NarrationUnit, ...]
    word_count: int

    def __post_init__(self):
        _freeze(self, "units")
        recount = sum(count_words(u.text) for u in self.units)
        if self.word_count != recount:
            raise ValueError(f"stored word_count {self.word_count} != recomputed {recount}")

    @classmethod
    def build(cls, page_index: int, units) -> "NarrationScript":
        units = tuple(units)
        return cls(page_index=page_index, units=units,
                   word_count=sum(count_words(u.text) for u in units))


@register
@dataclass(frozen=True)
class AudioAsset(CanonicalModel):
    """Synthesized audio metadata; media_ref is None for the timing-only mock."""

    page_index: int
    media_ref: str | None
    duration_s: float
    speaking_rate: float

    def __post_init__(self):
        # zero duration only occurs for an empty narration script
        if self.duration_s < 0:
            raise ValueError("duration_s must be non-negative")
        if self.speaking_rate <= 0:
            raise ValueError("speaking_rate must be positive")


# ---------------------------------------------------------------------------
# Layout artifacts
# ---------------------------------------------------------------------------

_EDGES = ("left", "right", "top", "bottom")


@dataclass(frozen=True)
class Overlap(CanonicalModel):
    a: str
    b: str
    overlap_area_u2: float

    def __post_init__(self):
        if self.overlap_area_u2 <= 0:
            raise ValueError("overlap area must be positive")


@dataclass(frozen=True)
class Overflow(CanonicalModel):
    element_id: str
    violated_edges: tuple[str, ...]
    excess_u: float

    def __post_init__(self):
        _freeze(self, "violated_edges")
        if not self.violated_edges:
            raise ValueError("overflow must name at least one edge")
        if any(e not in _EDGES for e in self.violated_edges):
            raise ValueError(f"unknown edge in {self.violated_edges!r}")
        if self.excess_u <= 0:
            raise ValueError("overflow excess must be positive")


@register
@dataclass(frozen=True)
class ConflictReport(CanonicalModel):
    page_index: int
    overlaps: tuple[Overlap, ...] = ()
    overflows: tuple[Overflow, ...] = ()

    def __post_init__(self):
        _freeze(self, "overlaps")
        _freeze(self, "overflows")

    @property
    def is_empty(self) -> bool:
        return not self.overlaps and not self.overflows

    @property
    def conflict_count(self) -> int:
        return len(self.overlaps) + len(self.overflows)


class ScanOrder(str, Enum):
    HORIZONTAL_RIGHT_THEN_VERTICAL_DOWN = "horizontal_right_then_vertical_down"


@dataclass(frozen=True)
class Move(CanonicalModel):
    element_id: str
    new_bbox: BBox


@register
@dataclass(frozen=True)
class PlacementPlan(CanonicalModel):
    moves: tuple[Move, ...] = ()
    unresolved: tuple[str, ...] = ()

    def __post_init__(self):
        _freeze(self, "moves")
        _freeze(self, "unresolved")


# ---------------------------------------------------------------------------
# Human review artifacts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Edit(CanonicalModel):
    element_id: str
    new_bbox: BBox | None = None
    new_content: str | None = None
    delete: bool = False


@register
@dataclass(frozen=True)
class EditSet(CanonicalModel):
    page_index: int
    edits: tuple[Edit, ...]
    editor: str
    timestamp: str

    def __post_init__(self):
        _freeze(self, "edits")
        ids = [e.element_id for e in self.edits]
        if len(ids) != len(set(ids)):
            raise ValueError("at most one edit per element per set")


# ---------------------------------------------------------------------------
# Output artifacts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VideoSegmentRef(CanonicalModel):
    page_index: int
    video_ref: str
    audio_ref: str
    duration_s: float


@register
@dataclass(frozen=True)
class VideoArtifact(CanonicalModel):
    segments: tuple[VideoSegmentRef, ...]
    merged_ref: str | None
    total_duration_s: float

    def __post_init__(self):
        _freeze(self, "segments")
        pages = [s.page_index for s in self.segments]
        if pages != sorted(pages):
            raise ValueError("segments must be ordered by page_index")

    @classmethod
    def build(cls, segments, merged_ref: str | None) -> "VideoArtifact":
        segments = tuple(segments)
        return cls(segments=segments, merged_ref=merged_ref,
                   total_duration_s=sum(s.duration_s for s in segments))


@register
@dataclass(frozen=True)
class PipelineOutput(CanonicalModel):
    video_plan: VideoArtifact
    lecture_scripts: tuple[NarrationScript, ...]
    manuscript: Manuscript

    def __post_init__(self):
        _freeze(self, "lecture_scripts")


# ---------------------------------------------------------------------------
# Structural validation (violations are data, not failures)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    code: str
    detail: str

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}"


def validate_scene(scene: SceneProgram) -> list[Violation]:
    """Every invariant violation in the scene; an empty list means valid."""
    problems: list[Violation] = []
    by_id: dict[str, SceneElement] = {}
    for element in scene.elements:
        if element.id in by_id:
            problems.append(Violation("duplicate-element-id", element.id))
        by_id[element.id] = element

    for element in scene.elements:
        if element.kind is ElementKind.GROUP:
            missing = [c for c in element.children if c not in by_id]
            for child_id in missing:
                problems.append(Violation("missing-child", f"{element.id} -> {child_id}"))
            present = [by_id[c] for c in element.children if c in by_id]
            if present and not all(element.bbox.contains(c.bbox) for c in present):
                problems.append(Violation("group-bbox", element.id))

    anchors: set[str] = set()
    for event in scene.events:
        if event.anchor_id in anchors:
            problems.append(Violation("duplicate-anchor", event.anchor_id))
        anchors.add(event.anchor_id)
        for target in event.target_ids:
            if target not in by_id:
                problems.append(Violation("dangling-target", target))

    if STAGE_ORDER[scene.stage] >= STAGE_ORDER[SceneStage.SYNCED]:
        starts = [e.start_s for e in scene.events]
        if any(s is None for s in starts):
            problems.append(Violation("unset-start", "synced scene has unscheduled events"))
        else:
            if any(b < a for a, b in zip(starts, starts[1:])):
                problems.append(Violation("unsorted-events",
                                          "start_s sequence is not non-decreasing"))
    return problems
