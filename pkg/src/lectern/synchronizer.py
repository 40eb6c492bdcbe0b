"""Schedules animation events against narration timing (F_sync).

The alignment rule set:

* Unit start times accumulate from per-unit durations; an event whose
  anchor is referenced by a narration unit starts exactly when that unit
  does.
* Events with unreferenced anchors interpolate linearly between their
  nearest referenced neighbors in event order, with virtual boundaries at
  index -1 (time 0) and index n (audio end).  With no references at all
  this degenerates to a uniform spread, which is applied under a
  SyncWarning.
* Starts are clamped to [0, audio end]; durations are clamped so no event
  runs past the audio; both land on the canonical six-digit grid so
  emitted markers parse back to identical values.
* Explicit wait events (anchors "sync_wait_<k>") fill every idle gap:
  before the first event, between an event's end and the next start, and
  from the last end to the audio end.  Re-alignment strips previous
  auto-waits first, which makes align idempotent.

Scheduling assumes narration references anchors in event order (the
prompt asks for it, and the worked arithmetic depends on it).  Out-of-
order references are still scheduled, then stably sorted to keep starts
monotone; exact unit starts are preserved only in the in-order case.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, replace

from .canonical import CanonicalModel, quantize, register
from .codegen import IR_JSON, emit
from .model import (
    STAGE_ORDER,
    AnimationEvent,
    EventVerb,
    NarrationScript,
    SceneProgram,
    SceneStage,
)
from .narrator import SynthesisResult

WAIT_PREFIX = "sync_wait_"
DRIFT_TOLERANCE_S = 0.1


class SyncError(RuntimeError):
    """An anchor_ref in the narration does not resolve in the scene."""


class SyncWarning(UserWarning):
    """Narration references no anchors; events were spread uniformly."""


@register
@dataclass(frozen=True)
class DriftReport(CanonicalModel):
    page_index: int
    last_end_s: float
    audio_s: float
    drift_s: float
    overrun_anchors: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "overrun_anchors", tuple(self.overrun_anchors))

    @property
    def is_empty(self) -> bool:
        return self.drift_s <= DRIFT_TOLERANCE_S and not self.overrun_anchors


@dataclass(frozen=True)
class AlignResult:
    scene: SceneProgram
    warnings: tuple[str, ...] = ()


def unit_starts(synth: SynthesisResult) -> list[float]:
    starts, acc = [], 0.0
    for d in synth.per_unit_durations_s:
        starts.append(acc)
        acc += d
    return starts


def align(scene: SceneProgram, script: NarrationScript,
          synth: SynthesisResult) -> AlignResult:
    """Assign start times and inject waits; result is stage=synced."""
    events = [e for e in scene.events if not e.anchor_id.startswith(WAIT_PREFIX)]
    anchors = {e.anchor_id for e in events}
    refs: dict[str, int] = {}
    for i, unit in enumerate(script.units):
        if unit.anchor_ref is not None:
            if unit.anchor_ref not in anchors:
                raise SyncError(
                    f"page {scene.page_index}: narration unit {unit.unit_id!r} "
                    f"references unknown anchor {unit.anchor_ref!r}")
            refs.setdefault(unit.anchor_ref, i)

    starts = unit_starts(synth)
    total = synth.audio.duration_s
    warns: list[str] = []
    if not refs and events:
        message = (f"page {scene.page_index}: narration references no anchors; "
                   f"spreading {len(events)} event(s) uniformly")
        warns.append(message)
        _warnings.warn(message, SyncWarning, stacklevel=2)

    # step 1-3: exact starts for referenced anchors, interpolation elsewhere
    n = len(events)
    assigned: list[float | None] = [
        starts[refs[e.anchor_id]] if e.anchor_id in refs else None for e in events]
    referenced = [(i, s) for i, s in enumerate(assigned) if s is not None]
    boundaries = [(-1, 0.0)] + referenced + [(n, total)]
    for (i, si), (j, sj) in zip(boundaries, boundaries[1:]):
        for k in range(i + 1, j):
            assigned[k] = si + (sj - si) * (k - i) / (j - i)

    scheduled: list[AnimationEvent] = []
    for event, raw in zip(events, assigned):
        start = quantize(min(max(raw, 0.0), total))
        duration = event.duration_s
        if start + duration > total:
            duration = quantize(max(total - start, 0.0))
        scheduled.append(replace(event, start_s=start, duration_s=duration))
    scheduled.sort(key=lambda e: e.start_s)  # stable; no-op for in-order refs

    # step 4: explicit waits over every idle gap, trailing out to audio end
    timeline: list[AnimationEvent] = []
    cursor = 0.0
    waits = 0
    for event in scheduled:
        if event.start_s - cursor > 0:
            timeline.append(AnimationEvent(
                anchor_id=f"{WAIT_PREFIX}{waits}", verb=EventVerb.WAIT, target_ids=(),
                duration_s=quantize(event.start_s - cursor), start_s=quantize(cursor)))
            waits += 1
        timeline.append(event)
        cursor = max(cursor, event.start_s + event.duration_s)
    if scheduled and total - cursor > 0:
        timeline.append(AnimationEvent(
            anchor_id=f"{WAIT_PREFIX}{waits}", verb=EventVerb.WAIT, target_ids=(),
            duration_s=quantize(total - cursor), start_s=quantize(cursor)))

    stage = scene.stage if STAGE_ORDER[scene.stage] > STAGE_ORDER[SceneStage.SYNCED] \
        else SceneStage.SYNCED
    out = replace(scene, events=tuple(timeline), stage=stage)
    out = replace(out, source_text=emit(out, IR_JSON))
    return AlignResult(scene=out, warnings=tuple(warns))


def check_sync(scene: SceneProgram, synth: SynthesisResult) -> DriftReport:
    """Drift between the visual timeline and the audio; empty ⇔ aligned."""
    total = synth.audio.duration_s
    if not scene.events:
        return DriftReport(page_index=scene.page_index, last_end_s=0.0,
                           audio_s=total, drift_s=0.0)
    last = scene.events[-1]
    if last.start_s is None:
        raise SyncError(f"page {scene.page_index}: scene is not scheduled")
    last_end = last.start_s + last.duration_s
    overruns = tuple(e.anchor_id for e in scene.events
                     if e.start_s is not None and e.start_s > total)
    return DriftReport(page_index=scene.page_index, last_end_s=last_end,
                       audio_s=total, drift_s=abs(last_end - total),
                       overrun_anchors=overruns)
