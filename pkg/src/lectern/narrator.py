"""Narration composition with look-back, and the TTS timing contract.

Narration is the sequential backbone of a run: page i's script is
conditioned on the tail of page i-1's, so consecutive pages hand off
terminology smoothly.  The look-back window is fixed at the last two
units, which bounds prompt size deterministically.

Synthesis returns timing, not media: an AudioAsset plus per-unit
durations.  The built-in mock backend derives timing purely from word
counts at a configured words-per-minute, so the whole pipeline runs
offline; a gateway-backed backend speaks to a real TTS service through
record/replay.
"""

from __future__ import annotations

from dataclasses import dataclass
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
from .gateway import Gateway, Service, ServiceError, call_validated
from .model import AudioAsset, NarrationScript, NarrationUnit, PageBlueprint
from .words import count_words

LOOKBACK_UNITS = 2
RATE_TOLERANCE = 1e-6


class NarrateError(RuntimeError):
    """Narration proposal failed schema validation after retries."""


class TtsError(RuntimeError):
    """TTS backend failed or returned inconsistent timing."""


@register
@dataclass(frozen=True)
class SynthesisResult(CanonicalModel):
    audio: AudioAsset
    per_unit_durations_s: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_unit_durations_s",
                           tuple(self.per_unit_durations_s))
        if any(d < 0 for d in self.per_unit_durations_s):
            raise ValueError("per-unit durations must be non-negative")
        drift = abs(sum(self.per_unit_durations_s) - self.audio.duration_s)
        if drift > RATE_TOLERANCE:
            raise ValueError(f"per-unit durations disagree with total by {drift}")


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def _validate_script(page: PageBlueprint, anchors: frozenset[str] | set[str],
                     value) -> NarrationScript:
    if not isinstance(value, dict) or "units" not in value:
        raise SchemaError("narration must be an object with a 'units' key")
    units: tuple[NarrationUnit, ...] = from_value(tuple[NarrationUnit, ...], value["units"])
    if not units:
        raise SchemaError("narration has no units")
    seen: set[str] = set()
    for unit in units:
        if unit.unit_id in seen:
            raise SchemaError(f"duplicate unit_id {unit.unit_id!r}")
        seen.add(unit.unit_id)
        if unit.anchor_ref is not None and unit.anchor_ref not in anchors:
            raise SchemaError(f"unit {unit.unit_id!r} references unknown anchor "
                              f"{unit.anchor_ref!r}")
    return NarrationScript.build(page.page_index, units)


def compose_narration(p: PageBlueprint, prev: NarrationScript | None, *,
                      gateway: Gateway, anchors: frozenset[str] | set[str],
                      lang: str = "en") -> NarrationScript:
    """One validated LLM call producing page p's narration.

    `anchors` is the scene's anchor id set, used to validate anchor_refs.
    Only the last two units of `prev` enter the prompt.
    """
    tail = prev.units[-LOOKBACK_UNITS:] if prev is not None else ()
    payload = llm_payload("narrator", "narrate_v1", {
        "anchors": sorted(anchors),
        "lang": lang,
        "page": to_value(p),
        "prev_tail": [to_value(u) for u in tail],
    })
    try:
        return call_validated(
            gateway, Service.LLM, "narrator.narrate", payload,
            lambda raw: _validate_script(p, anchors, canonical_loads(raw)))
    except SchemaError as err:
        raise NarrateError(str(err)) from err


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

class TtsBackend(Protocol):
    def synthesize_script(self, script: NarrationScript, voice: str) -> SynthesisResult:
        ...


class MockTts:
    """Deterministic timing-only synthesis: duration = words ÷ (wpm/60)."""

    def __init__(self, wpm: float = 120.0):
        if wpm <= 0:
            raise ValueError("wpm must be positive")
        self.wpm = wpm

    def synthesize_script(self, script: NarrationScript, voice: str) -> SynthesisResult:
        rate = self.wpm / 60.0
        per_unit = tuple(count_words(u.text) / rate for u in script.units)
        audio = AudioAsset(page_index=script.page_index, media_ref=None,
                           duration_s=sum(per_unit), speaking_rate=rate)
        return SynthesisResult(audio=audio, per_unit_durations_s=per_unit)


class GatewayTts:
    """TTS through the service gateway, so calls record and replay."""

    def __init__(self, gateway: Gateway, wpm_default: float = 120.0):
        self.gateway = gateway
        self.wpm_default = wpm_default

    def synthesize_script(self, script: NarrationScript, voice: str) -> SynthesisResult:
        payload = {
            "script": to_value(script),
            "voice": voice,
            "wpm_default": self.wpm_default,
        }
        try:
            return call_validated(
                self.gateway, Service.TTS, "tts", payload,
                lambda raw: self._decode(script, canonical_loads(raw)))
        except SchemaError as err:
            raise TtsError(str(err)) from err
        except ServiceError as err:
            raise TtsError(str(err)) from err

    @staticmethod
    def _decode(script: NarrationScript, value) -> SynthesisResult:
        if not isinstance(value, dict):
            raise SchemaError("TTS response must be an object")
        try:
            per_unit = tuple(float(d) for d in value["per_unit_durations_s"])
            audio = AudioAsset(page_index=script.page_index,
                               media_ref=value.get("media_ref"),
                               duration_s=float(value["duration_s"]),
                               speaking_rate=float(value["speaking_rate"]))
        except (KeyError, TypeError, ValueError) as err:
            raise SchemaError(f"malformed TTS response: {err}") from err
        return SynthesisResult(audio=audio, per_unit_durations_s=per_unit)


def synthesize(t: NarrationScript, voice: str, backend: TtsBackend) -> SynthesisResult:
    """Run the backend and enforce the timing contract on its answer."""
    try:
        result = backend.synthesize_script(t, voice)
    except (SchemaError, ValueError) as err:
        raise TtsError(str(err)) from err
    if len(result.per_unit_durations_s) != len(t.units):
        raise TtsError(f"backend returned {len(result.per_unit_durations_s)} unit "
                       f"durations for {len(t.units)} units")
    audio = result.audio
    if abs(audio.speaking_rate * audio.duration_s - t.word_count) > RATE_TOLERANCE:
        raise TtsError("speaking_rate × duration_s disagrees with the word count")
    return result
