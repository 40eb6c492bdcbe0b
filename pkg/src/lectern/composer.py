"""Content composition: skeletonize, expand, and duration-targeted refine.

The refinement loop treats duration as word count over speaking rate —
the same proxy the mock TTS uses, so planning and synthesis agree.  Each
iteration rewrites exactly one section (the longest when trimming, the
shortest when expanding, ties to the lower index) and re-estimates, up to
five iterations or until the estimate lands within 15% of target.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum

from .assets import llm_payload
from .canonical import (
    CanonicalModel,
    SchemaError,
    canonical_loads,
    from_value,
    register,
    to_value,
)
from .gateway import Gateway, Service, call_validated
from .model import AudienceLevel, Concept, LectureOutline, Manuscript, Section, Skeleton

DURATION_TOLERANCE = 0.15
MAX_REFINE_ITERATIONS = 5
MIN_SECTION_WORDS = 8  # roughly one sentence; trim never goes below this


class SkeletonError(RuntimeError):
    def __init__(self, message: str, raw_response: bytes = b""):
        super().__init__(message)
        self.raw_response = raw_response


class ExpandError(RuntimeError):
    def __init__(self, concept_id: str, message: str):
        super().__init__(f"concept {concept_id!r}: {message}")
        self.concept_id = concept_id


class RefineError(RuntimeError):
    pass


class ActionKind(str, Enum):
    TRIM_SECTION = "trim_section"
    EXPAND_SECTION = "expand_section"
    NO_OP = "no_op"


@register
@dataclass(frozen=True)
class RefinementAction(CanonicalModel):
    kind: ActionKind
    section_index: int
    delta_words_target: int


@dataclass(frozen=True)
class RefineOutcome:
    """Refine result plus what the trace needs: actions taken, convergence."""

    manuscript: Manuscript
    actions: tuple[RefinementAction, ...] = ()
    converged: bool = True


# ---------------------------------------------------------------------------


def _validate_skeleton(value) -> Skeleton:
    if not isinstance(value, dict) or "concepts" not in value:
        raise SchemaError("skeleton must be an object with a 'concepts' key")
    concepts: tuple[Concept, ...] = from_value(tuple[Concept, ...], value["concepts"])
    if not concepts:
        raise SchemaError("skeleton has no concepts")
    return Skeleton(concepts=concepts)


def skeletonize(outline: LectureOutline, *, gateway: Gateway) -> Skeleton:
    """One validated LLM call extracting the ordered concept DAG."""
    payload = llm_payload("composer", "skeletonize_v1", {"outline": to_value(outline)})
    try:
        return call_validated(
            gateway, Service.LLM, "composer.skeletonize", payload,
            lambda raw: _validate_skeleton(canonical_loads(raw)))
    except SchemaError as err:
        raise SkeletonError(str(err), getattr(err, "raw_response", b"")) from err


def _validate_section(concept: Concept, value) -> Section:
    if not isinstance(value, dict) or "section" not in value:
        raise SchemaError("expansion must be an object with a 'section' key")
    section: Section = from_value(Section, value["section"])
    if section.concept_id != concept.id:
        raise SchemaError(f"section answers concept {section.concept_id!r}, "
                          f"asked about {concept.id!r}")
    return section


def expand(skeleton: Skeleton, *, gateway: Gateway,
           audience: AudienceLevel = AudienceLevel.INTRO, lang: str = "en",
           parallelism: int = 4) -> Manuscript:
    """One LLM call per concept, concurrently; joined in skeleton order."""
    names = [c.title for c in skeleton.concepts]

    def expand_one(concept: Concept) -> Section:
        payload = llm_payload("composer", "expand_v1", {
            "audience": audience.value,
            "concept": to_value(concept),
            "concept_titles": names,
            "lang": lang,
        })
        try:
            return call_validated(
                gateway, Service.LLM, "composer.expand", payload,
                lambda raw: _validate_section(concept, canonical_loads(raw)))
        except SchemaError as err:
            raise ExpandError(concept.id, str(err)) from err

    workers = max(1, min(parallelism, len(skeleton.concepts)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        sections = list(pool.map(expand_one, skeleton.concepts))
    return Manuscript.build(sections)


def estimate_duration(manuscript: Manuscript, wpm: float) -> float:
    """Spoken-duration proxy in seconds: word_count / wpm × 60, exactly."""
    if wpm <= 0:
        raise ValueError("wpm must be positive")
    return manuscript.word_count / wpm * 60.0


def refine(manuscript: Manuscript, target_s: float, wpm: float, *,
           gateway: Gateway) -> RefineOutcome:
    """Iterative length control; never reorders, merges, or drops sections.

    Returns the best manuscript seen (closest estimate to target) with
    converged=False if five iterations were not enough — the caller
    records that flag in the run trace.
    """
    if target_s <= 0:
        raise ValueError("target_s must be positive")
    current = manuscript
    actions: list[RefinementAction] = []
    best = manuscript
    best_gap = abs(estimate_duration(manuscript, wpm) - target_s)
    for _ in range(MAX_REFINE_ITERATIONS):
        estimate = estimate_duration(current, wpm)
        gap = abs(estimate - target_s)
        if gap < best_gap:
            best, best_gap = current, gap
        if gap / target_s <= DURATION_TOLERANCE:
            return RefineOutcome(manuscript=current, actions=tuple(actions),
                                 converged=True)
        delta = round(target_s * wpm / 60.0) - current.word_count
        counts = [s.word_count for s in current.sections]
        if delta < 0:
            index = counts.index(max(counts))
            kind = ActionKind.TRIM_SECTION
        else:
            index = counts.index(min(counts))
            kind = ActionKind.EXPAND_SECTION
        action = RefinementAction(kind=kind, section_index=index,
                                  delta_words_target=delta)
        section = _rewrite(current.sections[index], action, gateway)
        sections = list(current.sections)
        sections[index] = section
        current = Manuscript.build(sections)
        actions.append(action)
    estimate = estimate_duration(current, wpm)
    gap = abs(estimate - target_s)
    if gap < best_gap:
        best, best_gap = current, gap
    if gap / target_s <= DURATION_TOLERANCE:
        return RefineOutcome(manuscript=current, actions=tuple(actions), converged=True)
    return RefineOutcome(manuscript=best, actions=tuple(actions), converged=False)


def _rewrite(section: Section, action: RefinementAction, gateway: Gateway) -> Section:
    payload = llm_payload("composer", "refine_v1", {
        "action": to_value(action),
        "min_words": MIN_SECTION_WORDS,
        "section": to_value(section),
    })

    def validate(raw: bytes) -> Section:
        value = canonical_loads(raw)
        if not isinstance(value, dict) or "section" not in value:
            raise SchemaError("rewrite must be an object with a 'section' key")
        rewritten: Section = from_value(Section, value["section"])
        if rewritten.concept_id != section.concept_id:
            raise SchemaError("rewrite changed the section's concept")
        return rewritten

    try:
        return call_validated(gateway, Service.LLM, "composer.refine", payload, validate)
    except SchemaError as err:
        raise RefineError(str(err)) from err
