"""Iterative render-and-repair loop with template fallback (F_debug).

The loop budget τ counts repair rounds, not renders: a page gets at most
τ LLM repairs, re-rendering after each; if the scene still fails, the
failing elements are replaced by standardized templates and the result is
rendered once more.  The ok path therefore makes at most τ+1 renderer
calls; the fallback path makes τ+2.  Renderer transport problems are not
code faults and abort the loop without consuming the budget.

Repairs are localized: the renderer's error trace names a line, the
nearest `@@anchor:` marker above it names an event, and only the elements
that event targets are handed to the LLM.  IR outside the fragment is
bitwise-untouched, which keeps repairs auditable.
"""

from __future__ import annotations

import re
import subprocess
import tempfile
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Protocol

from .assets import llm_payload
from .canonical import (
    CanonicalModel,
    SchemaError,
    canonical_loads,
    from_value,
    register,
    to_value,
)
from .codegen import IR_JSON, MANIM_CE, DialectSpec, emit
from .gateway import Gateway, Service, call_validated
from .model import ElementKind, SceneElement, SceneProgram, SceneStage

TEMPLATE_SUFFIX = "__tpl"

_TEMPLATE_NAMES = {
    ElementKind.TEXT: "plain_text_box",
    ElementKind.FORMULA: "plain_text_box",
    ElementKind.SHAPE: "labeled_rectangle",
    ElementKind.IMAGE_PLACEHOLDER: "gray_labeled_rectangle",
}


class DebugError(RuntimeError):
    """The loop cannot guarantee a renderable scene (non-compliant renderer)."""


class RendererUnavailable(RuntimeError):
    """Renderer infrastructure failure; retry budget is not consumed."""


class RenderOutcome(str, Enum):
    OK = "ok"
    ERROR = "error"


class FinalOutcome(str, Enum):
    OK = "ok"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class RenderResult:
    exit_status: int
    stderr: str = ""

    @property
    def ok(self) -> bool:
        return self.exit_status == 0


@register
@dataclass(frozen=True)
class RenderAttempt(CanonicalModel):
    attempt_index: int
    outcome: RenderOutcome
    error_trace: str | None = None
    repaired_element_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "repaired_element_ids", tuple(self.repaired_element_ids))
        if (self.error_trace is not None) != (self.outcome is RenderOutcome.ERROR):
            raise ValueError("error_trace present iff outcome is error")


@register
@dataclass(frozen=True)
class FallbackSubstitution(CanonicalModel):
    element_id: str
    template_name: str


@register
@dataclass(frozen=True)
class DebugTrace(CanonicalModel):
    attempts: tuple[RenderAttempt, ...]
    final_outcome: FinalOutcome
    fallback_substitutions: tuple[FallbackSubstitution, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "attempts", tuple(self.attempts))
        object.__setattr__(self, "fallback_substitutions",
                           tuple(self.fallback_substitutions))
        if bool(self.fallback_substitutions) != (self.final_outcome is FinalOutcome.FALLBACK):
            raise ValueError("fallback_substitutions non-empty iff outcome is fallback")


# ---------------------------------------------------------------------------
# Renderer contract and built-in backends
# ---------------------------------------------------------------------------

class Renderer(Protocol):
    def render_check(self, source: str, page_index: int) -> RenderResult:
        """Dry-run/compile-only check; raises RendererUnavailable for infra faults."""
        ...


class NullRenderer:
    """Always ok; the default offline backend."""

    def render_check(self, source: str, page_index: int) -> RenderResult:
        return RenderResult(exit_status=0)


class ScriptedRenderer:
    """Test fault injection: fail the first `fail_times` checks, then pass.

    Template-substituted sources (containing the `__tpl` marker) always
    pass, mirroring the guarantee the real template library provides by
    construction.  Error traces point at the requested line so repair
    localization is exercised.
    """

    def __init__(self, fail_times: int, error_line: int | None = None,
                 trace: str | None = None):
        self.fail_times = fail_times
        self.error_line = error_line
        self.trace = trace
        self.calls = 0

    def render_check(self, source: str, page_index: int) -> RenderResult:
        self.calls += 1
        if TEMPLATE_SUFFIX in source:
            return RenderResult(exit_status=0)
        if self.calls <= self.fail_times:
            if self.trace is not None:
                return RenderResult(exit_status=1, stderr=self.trace)
            line = self.error_line if self.error_line is not None \
                else max(len(source.splitlines()) - 1, 1)
            return RenderResult(exit_status=1,
                                stderr=f'File "scene.py", line {line}\nRuntimeError: boom')
        return RenderResult(exit_status=0)


class ExternalRenderer:
    """User-configured command; `{source}` in the template becomes the file path."""

    def __init__(self, command: tuple[str, ...], workdir: str | Path | None = None,
                 timeout_s: float = 120.0):
        self.command = tuple(command)
        self.workdir = Path(workdir) if workdir else None
        self.timeout_s = timeout_s

    def render_check(self, source: str, page_index: int) -> RenderResult:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / f"page_{page_index}_check.py"
            path.write_text(source, encoding="utf-8")
            argv = [a.replace("{source}", str(path)) for a in self.command]
            try:
                proc = subprocess.run(argv, cwd=self.workdir, capture_output=True,
                                      text=True, timeout=self.timeout_s)
            except FileNotFoundError as err:
                raise RendererUnavailable(str(err)) from err
            except subprocess.TimeoutExpired:
                return RenderResult(exit_status=124,
                                    stderr=f"timeout after {self.timeout_s}s")
        return RenderResult(exit_status=proc.returncode, stderr=proc.stderr)


# ---------------------------------------------------------------------------
# Repair
# ---------------------------------------------------------------------------

_LINE_RE = re.compile(r"line (\d+)", re.IGNORECASE)
_ANCHOR_LINE_RE = re.compile(r"@@anchor:([A-Za-z0-9_.\-]+)@@")


def localize(scene: SceneProgram, error_trace: str,
             dialect: DialectSpec = MANIM_CE) -> tuple[str | None, tuple[str, ...]]:
    """(anchor id, element ids) implicated by the trace; (None, ()) if unknown.

    Walks upward from the reported line to the nearest anchor marker in
    the emitted source, then follows that event's targets.
    """
    hit = _LINE_RE.search(error_trace)
    if not hit:
        return None, ()
    lineno = int(hit.group(1))
    lines = emit(scene, dialect).splitlines()
    for line in reversed(lines[:min(lineno, len(lines))]):
        marker = _ANCHOR_LINE_RE.search(line)
        if marker:
            anchor = marker.group(1)
            for event in scene.events:
                if event.anchor_id == anchor:
                    return anchor, tuple(event.target_ids)
            return anchor, ()
    return None, ()


def _validate_fragment(expected_ids: tuple[str, ...], value) -> tuple[SceneElement, ...]:
    if not isinstance(value, dict) or "elements" not in value:
        raise SchemaError("repair must be an object with an 'elements' key")
    elements: tuple[SceneElement, ...] = from_value(tuple[SceneElement, ...],
                                                    value["elements"])
    got = tuple(e.id for e in elements)
    if sorted(got) != sorted(expected_ids):
        raise SchemaError(f"repair changed the element id set: {got} != {expected_ids}")
    return elements


def repair(scene: SceneProgram, error_trace: str, *, gateway: Gateway) -> SceneProgram:
    """One localized LLM repair; IR outside the fragment is untouched.

    A repair whose response fails schema validation leaves the scene
    unchanged — the round is still consumed by the loop.
    """
    if not error_trace:
        raise ValueError("error_trace must be non-empty")
    anchor, ids = localize(scene, error_trace)
    if not ids:  # no marker or targetless event: whole-scene repair
        ids = tuple(e.id for e in scene.elements)
    by_id = scene.element_map()
    fragment = [to_value(by_id[i]) for i in ids if i in by_id]
    payload = llm_payload("debugger", "repair_v1", {
        "anchor": anchor,
        "error_trace": error_trace,
        "fragment": {"elements": fragment},
    })
    try:
        repaired = call_validated(
            gateway, Service.LLM, "debug.repair", payload,
            lambda raw: _validate_fragment(tuple(ids), canonical_loads(raw)))
    except SchemaError:
        return scene
    new_by_id = {e.id: e for e in repaired}
    elements = tuple(new_by_id.get(e.id, e) for e in scene.elements)
    out = replace(scene, elements=elements)
    return replace(out, source_text=emit(out, IR_JSON))


# ---------------------------------------------------------------------------
# Fallback
# ---------------------------------------------------------------------------

def fallback(scene: SceneProgram, failing_ids: list[str] | tuple[str, ...]) -> SceneProgram:
    """Replace failing elements by standard templates; content kept verbatim."""
    by_id = scene.element_map()
    missing = [i for i in failing_ids if i not in by_id]
    if missing:
        raise KeyError(f"failing ids do not resolve: {missing}")
    targets = [i for i in failing_ids if by_id[i].kind is not ElementKind.GROUP]
    renames: dict[str, str] = {}
    elements: list[SceneElement] = []
    for element in scene.elements:
        if element.id in targets:
            new_id = element.id + TEMPLATE_SUFFIX
            renames[element.id] = new_id
            kind = ElementKind.TEXT if element.kind is ElementKind.FORMULA \
                else ElementKind.SHAPE if element.kind is ElementKind.IMAGE_PLACEHOLDER \
                else element.kind
            style = {"template": _TEMPLATE_NAMES[element.kind]}
            if element.kind is ElementKind.IMAGE_PLACEHOLDER:
                style["fill"] = "gray"
            elements.append(replace(element, id=new_id, kind=kind, style=style))
        else:
            elements.append(element)
    if not renames:
        return scene
    elements = [replace(e, children=tuple(renames.get(c, c) for c in e.children))
                if e.kind is ElementKind.GROUP else e for e in elements]
    events = tuple(replace(ev, target_ids=tuple(renames.get(t, t) for t in ev.target_ids))
                   for ev in scene.events)
    out = replace(scene, elements=tuple(elements), events=events)
    return replace(out, source_text=emit(out, IR_JSON))


def substitutions_for(scene: SceneProgram, failing_ids) -> tuple[FallbackSubstitution, ...]:
    by_id = scene.element_map()
    return tuple(FallbackSubstitution(element_id=i, template_name=_TEMPLATE_NAMES[by_id[i].kind])
                 for i in failing_ids
                 if i in by_id and by_id[i].kind is not ElementKind.GROUP)


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

def run_debug_loop(scene: SceneProgram, renderer: Renderer, tau: int, *,
                   gateway: Gateway,
                   dialect: DialectSpec = MANIM_CE) -> tuple[SceneProgram, DebugTrace]:
    """Render-check/repair until clean; template fallback after τ failed rounds."""
    if tau < 1:
        raise ValueError("tau must be a positive integer")
    current = scene
    attempts: list[RenderAttempt] = []
    repaired_last: tuple[str, ...] = ()
    substitutions: tuple[FallbackSubstitution, ...] = ()
    repairs = 0
    while True:
        result = renderer.render_check(emit(current, dialect), current.page_index)
        index = len(attempts) + 1
        if result.ok:
            attempts.append(RenderAttempt(attempt_index=index, outcome=RenderOutcome.OK,
                                          repaired_element_ids=repaired_last))
            outcome = FinalOutcome.FALLBACK if substitutions else FinalOutcome.OK
            trace = DebugTrace(attempts=tuple(attempts), final_outcome=outcome,
                               fallback_substitutions=substitutions)
            return current.at_stage(SceneStage.DEBUGGED), trace
        attempts.append(RenderAttempt(attempt_index=index, outcome=RenderOutcome.ERROR,
                                      error_trace=result.stderr or "render failed",
                                      repaired_element_ids=repaired_last))
        if substitutions:
            raise DebugError(
                f"page {scene.page_index}: template-substituted scene failed its "
                f"render check: {result.stderr}")
        if repairs < tau:
            before = current.element_map()
            current = repair(current, result.stderr or "render failed", gateway=gateway)
            repairs += 1
            after = current.element_map()
            repaired_last = tuple(i for i in after
                                  if i not in before or after[i] != before[i])
        else:
            _, ids = localize(current, result.stderr or "", dialect)
            failing = [i for i in ids
                       if current.element_map().get(i) is not None
                       and current.element_map()[i].kind is not ElementKind.GROUP]
            if not failing:
                failing = [e.id for e in current.elements
                           if e.kind is not ElementKind.GROUP]
            if not failing:
                raise DebugError(f"page {scene.page_index}: nothing left to "
                                 f"substitute and the scene still fails to render")
            substitutions = substitutions_for(current, failing)
            current = fallback(current, failing)
            repaired_last = tuple(s.element_id for s in substitutions)
