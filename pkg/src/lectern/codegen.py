"""Scene generation and the dialect emitters/parsers.

Generation is two-layer: the LLM proposes structured scene IR, which is
schema-validated, and a deterministic emitter turns IR into script text.
The validation passes downstream (sync, layout, debug) need structured
access to geometry and events; editing LLM-emitted raw code would be
fragile, so code is always derived, never authored.

Two dialects are built in.  "ir-json" is the lossless canonical form and
is what `SceneProgram.source_text` always holds.  "manim-ce" is a
template-driven export whose parse is partial: it recovers the ordered
anchor list, wait durations, and scheduled starts — enough for sync
verification and for the debugger to localize errors.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from .assets import dialect_template, llm_payload
from .canonical import (
    ParseError,
    SchemaError,
    canonical_loads,
    deserialize,
    format_float,
    from_value,
    serialize,
    to_value,
)
from .gateway import Gateway, Service, call_validated
from .model import (
    AnimationEvent,
    ElementKind,
    EventVerb,
    PageBlueprint,
    SceneElement,
    SceneProgram,
    SceneStage,
    validate_scene,
)


class DialectError(ValueError):
    pass


class CodegenError(RuntimeError):
    """Scene proposal failed schema validation after retries."""


@dataclass(frozen=True)
class DialectSpec:
    name: str
    can_emit: bool = True
    can_parse: bool = True
    lossless: bool = False


_DIALECTS: dict[str, DialectSpec] = {}


def register_dialect(spec: DialectSpec) -> DialectSpec:
    if spec.name in _DIALECTS:
        raise DialectError(f"dialect {spec.name!r} registered twice")
    _DIALECTS[spec.name] = spec
    return spec


def get_dialect(name: str) -> DialectSpec:
    try:
        return _DIALECTS[name]
    except KeyError:
        raise DialectError(f"unknown dialect {name!r}") from None


IR_JSON = register_dialect(DialectSpec("ir-json", lossless=True))
MANIM_CE = register_dialect(DialectSpec("manim-ce"))


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

ANCHOR_RE = re.compile(r"@@anchor:([A-Za-z0-9_.\-]+)@@")
_MARKER_LINE_RE = re.compile(
    r"^\s*#\s*@@anchor:([A-Za-z0-9_.\-]+)@@(?:\s+@@start:(\d+\.\d{6})@@)?\s*$")
_WAIT_RE = re.compile(r"^\s*self\.wait\((\d+\.\d+)\)\s*$")
_PLAY_RE = re.compile(r"^\s*self\.play\((\w+)\((.*)\), run_time=(\d+\.\d+)\)\s*$")
_PAGE_RE = re.compile(r"^# page: (\d+)$")

_VERB_FUNC = {
    EventVerb.APPEAR: "FadeIn",
    EventVerb.TRANSFORM: "Transform",
    EventVerb.HIGHLIGHT: "Indicate",
    EventVerb.DISAPPEAR: "FadeOut",
}
_FUNC_VERB = {f: v for v, f in _VERB_FUNC.items()}


def _mangle(element_id: str) -> str:
    return "el_" + re.sub(r"[^A-Za-z0-9_]", "_", element_id)


def _marker(event: AnimationEvent) -> str:
    text = f"# @@anchor:{event.anchor_id}@@"
    if event.start_s is not None:
        text += f" @@start:{format_float(event.start_s)}@@"
    return text


def _emit_manim(scene: SceneProgram) -> str:
    parts = [dialect_template("manim-ce", "header").substitute(page_index=scene.page_index)]
    for element in scene.elements:
        tpl = dialect_template("manim-ce", f"element_{element.kind.value}")
        fields = {
            "var": _mangle(element.id),
            "content": repr(element.content),
            "cx": format_float(element.bbox.cx),
            "cy": format_float(element.bbox.cy),
            "w": format_float(element.bbox.w),
            "h": format_float(element.bbox.h),
            "children": ", ".join(_mangle(c) for c in element.children),
        }
        parts.append(tpl.substitute(fields))
    for event in scene.events:
        tpl = dialect_template("manim-ce", f"event_{event.verb.value}")
        parts.append(tpl.substitute(
            marker=_marker(event),
            targets=", ".join(_mangle(t) for t in event.target_ids),
            duration=format_float(event.duration_s),
        ))
    if not scene.elements and not scene.events:
        parts.append("        pass\n")
    return "".join(parts)


def emit(scene: SceneProgram, dialect: DialectSpec | str = IR_JSON) -> str:
    """Deterministic source text for a scene; pure function of the IR."""
    if isinstance(dialect, str):
        dialect = get_dialect(dialect)
    if not dialect.can_emit:
        raise DialectError(f"dialect {dialect.name!r} cannot emit")
    if dialect.name == IR_JSON.name:
        # source_text is excluded from its own emission (fixed point:
        # scenes in the pipeline carry source_text == emit(scene))
        return serialize(replace(scene, source_text="")).decode("utf-8")
    if dialect.name == MANIM_CE.name:
        return _emit_manim(scene)
    raise DialectError(f"dialect {dialect.name!r} has no emitter")


def extract_anchors(src: str) -> tuple[str, ...]:
    """Anchor ids in source order (multiset, duplicates preserved)."""
    return tuple(m.group(1) for m in ANCHOR_RE.finditer(src))


def _parse_manim(src: str) -> SceneProgram:
    page_index = 0
    events: list[AnimationEvent] = []
    pending: tuple[str, float | None] | None = None
    for lineno, line in enumerate(src.splitlines(), start=1):
        page = _PAGE_RE.match(line)
        if page:
            page_index = int(page.group(1))
            continue
        if "@@anchor:" in line:
            marker = _MARKER_LINE_RE.match(line)
            if not marker:
                raise ParseError("malformed anchor marker", line=lineno)
            start = float(marker.group(2)) if marker.group(2) else None
            pending = (marker.group(1), start)
            continue
        if pending is None:
            continue
        anchor_id, start = pending
        wait = _WAIT_RE.match(line)
        if wait:
            events.append(AnimationEvent(anchor_id=anchor_id, verb=EventVerb.WAIT,
                                         target_ids=(), duration_s=float(wait.group(1)),
                                         start_s=start))
            pending = None
            continue
        play = _PLAY_RE.match(line)
        if play:
            verb = _FUNC_VERB.get(play.group(1))
            if verb is None:
                raise ParseError(f"unknown animation {play.group(1)!r}", line=lineno)
            events.append(AnimationEvent(anchor_id=anchor_id, verb=verb, target_ids=(),
                                         duration_s=float(play.group(3)), start_s=start))
            pending = None
    if pending is not None:
        raise ParseError(f"anchor {pending[0]!r} has no statement")
    return SceneProgram(page_index=page_index, elements=(), events=tuple(events),
                        source_text=src, stage=SceneStage.GENERATED)


def parse_emitted(src: str, dialect: DialectSpec | str) -> SceneProgram:
    """Inverse of emit for "ir-json"; partial (anchors/timing) for "manim-ce"."""
    if isinstance(dialect, str):
        dialect = get_dialect(dialect)
    if not dialect.can_parse:
        raise DialectError(f"dialect {dialect.name!r} cannot parse")
    if dialect.name == IR_JSON.name:
        scene = deserialize(src)
        if not isinstance(scene, SceneProgram):
            raise ParseError("document is not a scene")
        return replace(scene, source_text=src)
    if dialect.name == MANIM_CE.name:
        return _parse_manim(src)
    raise DialectError(f"dialect {dialect.name!r} has no parser")


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _validate_proposal(blueprint: PageBlueprint, value) -> SceneProgram:
    if not isinstance(value, dict) or "scene" not in value:
        raise SchemaError("scene proposal must be an object with a 'scene' key")
    body = value["scene"]
    if not isinstance(body, dict):
        raise SchemaError("'scene' must be an object")
    elements: tuple[SceneElement, ...] = from_value(tuple[SceneElement, ...],
                                                    body.get("elements", []))
    events: tuple[AnimationEvent, ...] = from_value(tuple[AnimationEvent, ...],
                                                    body.get("events", []))
    scene = SceneProgram(page_index=blueprint.page_index, elements=elements,
                         events=events, stage=SceneStage.GENERATED)
    problems = validate_scene(scene)
    if problems:
        raise SchemaError("; ".join(f"{v.code}: {v.detail}" for v in problems))

    ids = {e.id for e in elements}
    appeared = {t for ev in events if ev.verb is EventVerb.APPEAR for t in ev.target_ids}
    bare = sorted(ids - appeared)
    if bare:
        raise SchemaError(f"elements never introduced by an appear event: {bare}")

    intent_elements = value.get("intent_elements")
    if not isinstance(intent_elements, list) or len(intent_elements) != len(blueprint.visual_intents):
        raise SchemaError("intent_elements must list element ids per visual intent")
    for i, group in enumerate(intent_elements):
        if not group:
            raise SchemaError(f"visual intent {i} is unmapped")
        missing = [x for x in group if x not in ids]
        if missing:
            raise SchemaError(f"visual intent {i} maps to unknown elements {missing}")
    return replace(scene, source_text=emit(scene, IR_JSON))


def generate_scene(p: PageBlueprint, gateway: Gateway) -> SceneProgram:
    """One validated LLM call turning a blueprint into stage=generated IR.

    Initial placement may overlap; the layout pass owns geometry.  Schema
    failure after retries raises CodegenError.
    """
    payload = llm_payload("codegen", "scene_v1", {"blueprint": to_value(p)})
    try:
        return call_validated(
            gateway, Service.LLM, "codegen.scene", payload,
            lambda raw: _validate_proposal(p, canonical_loads(raw)))
    except SchemaError as err:
        raise CodegenError(str(err)) from err
