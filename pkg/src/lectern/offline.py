"""Deterministic offline responder for every LLM/TTS purpose.

TemplateTransport plugs into the gateway like any network transport but
synthesizes schema-valid responses from the structured `input` block of
the request payload.  Identical requests always get identical bytes, so
it backs three workflows: fully offline runs, recording the bundled
sample fixtures, and fault-free unit testing of the agent modules.

The content is template prose — structurally faithful, pedagogically
empty.  That is deliberate: the pipeline validates shape and arithmetic,
not teaching quality.
"""

from __future__ import annotations

import re

from .canonical import canonical_bytes, canonical_loads
from .gateway import ServiceError, ServiceRequest
from .words import count_words

_SENTENCE_SPLIT = re.compile(r"(?<=\.)\s+")


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def _exact_words(tokens: list[str], target: int, filler: list[str]) -> str:
    """A text with exactly `target` counted words, reusing `tokens` first."""
    counted = [t for t in tokens if count_words(t) == 1]
    while len(counted) < target:
        counted.append(filler[len(counted) % len(filler)])
    kept = counted[:target]
    if not kept[-1].endswith("."):
        kept[-1] += "."
    return " ".join(kept)


class TemplateTransport:
    """Offline `Transport`: answers from templates, never touches the network."""

    def send(self, req: ServiceRequest) -> bytes:
        payload = canonical_loads(req.payload)
        handler = getattr(self, "_" + req.purpose.replace(".", "_"), None)
        if handler is None:
            raise ServiceError(req.purpose, "no template responder for this purpose")
        # LLM payloads carry their structured request in "input"; service
        # payloads without one (TTS) are read whole.
        return canonical_bytes(handler(payload.get("input", payload)))

    # -- composer ----------------------------------------------------------

    def _composer_skeletonize(self, input_value: dict) -> dict:
        outline = input_value.get("outline", {})
        keywords = [str(k) for k in outline.get("topic_keywords", ["topic"])][:5]
        concepts = []
        for i, keyword in enumerate(keywords):
            concepts.append({
                "id": f"c{i + 1}",
                "title": keyword.strip().title(),
                "one_line_gist": f"What {keyword.strip()} means and why it matters.",
                "depends_on": [f"c{i}"] if i > 0 else [],
            })
        concepts.append({
            "id": f"c{len(keywords) + 1}",
            "title": "Putting It Together",
            "one_line_gist": "How the ideas combine into one workflow.",
            "depends_on": [c["id"] for c in concepts],
        })
        return {"concepts": concepts}

    def _composer_expand(self, input_value: dict) -> dict:
        concept = input_value.get("concept", {})
        title = concept.get("title", "This idea")
        gist = concept.get("one_line_gist", "the central idea of this part.")
        audience = input_value.get("audience", "intro")
        deps = concept.get("depends_on", [])
        lead_in = "the earlier ideas" if deps else "everyday intuition"
        body = " ".join([
            f"{title} sits at the heart of this part of the lesson.",
            f"In plain terms it answers one question: {gist.rstrip('.')}.",
            f"For an {audience} audience we build the idea up in small steps "
            f"rather than stating it all at once.",
            f"First we pin down what {title.lower()} actually refers to and fix "
            f"the notation we will keep using.",
            f"Next we connect it back to {lead_in} so the new and the old sit "
            f"side by side.",
            "Formally, output = input × gain, which we will read aloud and then "
            "unpack term by term.",
            "A short worked example makes the definition concrete before we "
            "generalize.",
            "Most confusion comes from skipping the assumptions, so we state "
            "them explicitly.",
            f"Keep one picture in mind as we go: {gist.rstrip('.')}.",
        ])
        return {"section": {
            "concept_id": concept.get("id", "c1"),
            "heading": title,
            "body": body,
            "formal_expressions": ["output = input × gain"],
            "examples": [f"A two-minute example applying {title.lower()} end to end."],
        }}

    def _composer_refine(self, input_value: dict) -> dict:
        section = input_value.get("section", {})
        action = input_value.get("action", {})
        floor = int(input_value.get("min_words", 8))
        body = str(section.get("body", ""))
        delta = int(action.get("delta_words_target", 0))
        target = max(floor, count_words(body) + delta)
        filler = ["The", "same", "principle", "repays", "careful", "study",
                  "when", "applied", "in", "practice."]
        return {"section": {
            "concept_id": section.get("concept_id", "c1"),
            "heading": section.get("heading", ""),
            "body": _exact_words(body.split(), target, filler),
            "formal_expressions": section.get("formal_expressions", []),
            "examples": section.get("examples", []),
        }}

    # -- paginator ---------------------------------------------------------

    def _paginator_paginate(self, input_value: dict) -> dict:
        seg = input_value.get("segment", {})
        span = seg.get("span", {})
        lo, hi = int(span.get("start", 0)), int(span.get("stop", 0))
        density_max = int(input_value.get("density_max", 8))
        blocks = [b for b in str(seg.get("text", "")).split("\n\n")]
        n = max(hi - lo, 1)
        pages = []
        for j in range(n):
            heading = blocks[2 * j] if len(blocks) > 2 * j else f"Part {lo + j + 1}"
            body = blocks[2 * j + 1] if len(blocks) > 2 * j + 1 else heading
            intents = []
            for sentence in _sentences(body):
                if "=" in sentence:
                    intents.append({"kind": "formula", "payload": sentence})
                    break
            intents.append({"kind": "plain_text", "payload": heading})
            room = max(1, density_max - len(intents))
            bullets = [s.rstrip(".") for s in _sentences(body)[:min(3, room)]]
            if not bullets:
                bullets = [heading]
            pages.append({
                "title": heading,
                "bullet_points": bullets,
                "visual_intents": intents,
                "section_range": [lo + j, lo + j + 1],
                "est_density": len(bullets) + len(intents),
            })
        return {"pages": pages}

    # -- codegen -----------------------------------------------------------

    _INTENT_KIND = {
        "formula": "formula",
        "diagram": "shape",
        "image_placeholder": "image_placeholder",
        "table": "shape",
        "plain_text": "text",
    }

    def _codegen_scene(self, input_value: dict) -> dict:
        blueprint = input_value.get("blueprint", {})
        page = int(blueprint.get("page_index", 0))
        bullets = list(blueprint.get("bullet_points", []))
        intents = list(blueprint.get("visual_intents", []))
        dense = int(blueprint.get("est_density", 1)) >= 4
        elements = [{
            "id": f"title_p{page}",
            "kind": "text",
            "content": str(blueprint.get("title", "")) or "Untitled",
            "bbox": {"cx": 0.0, "cy": 3.75, "w": 12.0, "h": 0.75},
            "children": [],
            "style": {"role": "title"},
        }]
        for j, bullet in enumerate(bullets):
            elements.append({
                "id": f"b{j + 1:02d}",
                "kind": "text",
                "content": str(bullet),
                "bbox": {"cx": -3.0, "cy": 2.5 - j * 1.0, "w": 9.0, "h": 0.75},
                "children": [],
                "style": {},
            })
        intent_elements = []
        for k, intent in enumerate(intents):
            kind = self._INTENT_KIND.get(str(intent.get("kind", "plain_text")), "text")
            element_id = f"v{k + 1:02d}_{kind}"
            # dense pages start with bullets and visuals overlapping; the
            # layout pass is expected to pull them apart
            elements.append({
                "id": element_id,
                "kind": kind,
                "content": str(intent.get("payload", "")) or "visual",
                "bbox": {"cx": 4.0 if dense else 5.0, "cy": 2.0 - k * 2.0,
                         "w": 8.0 if dense else 5.0, "h": 1.5},
                "children": [],
                "style": {},
            })
            intent_elements.append([element_id])
        events = [{
            "anchor_id": f"a{i + 1:02d}",
            "verb": "appear",
            "target_ids": [element["id"]],
            "duration_s": 0.5,
            "start_s": None,
        } for i, element in enumerate(elements)]
        return {"scene": {"elements": elements, "events": events},
                "intent_elements": intent_elements}

    # -- narrator ----------------------------------------------------------

    def _narrator_narrate(self, input_value: dict) -> dict:
        page = input_value.get("page", {})
        anchors = sorted(str(a) for a in input_value.get("anchors", []))
        lang = str(input_value.get("lang", "en"))
        prefix = "" if lang == "en" else f"[{lang}] "
        title = str(page.get("title", "this page"))
        bullets = [str(b) for b in page.get("bullet_points", [])]
        intents = page.get("visual_intents", [])
        opening = "Picking up from where we left off, " \
            if input_value.get("prev_tail") else "To begin, "
        units = [{
            "unit_id": "u01",
            "text": f"{prefix}{opening}let us look closely at {title}.",
            "anchor_ref": anchors[0] if anchors else None,
        }]
        for j, bullet in enumerate(bullets):
            # every other bullet goes unreferenced so interpolation has work
            ref = anchors[1 + j] if (1 + j) < len(anchors) and j % 2 == 0 else None
            units.append({
                "unit_id": f"u{j + 2:02d}",
                "text": f"{prefix}{bullet}, and that is the step to hold on to.",
                "anchor_ref": ref,
            })
        base = 2 + len(bullets)
        for k in range(len(intents)):
            index = 1 + len(bullets) + k
            units.append({
                "unit_id": f"u{base + k:02d}",
                "text": f"{prefix}The visual on screen makes this concrete, so "
                        f"take a moment to read it through.",
                "anchor_ref": anchors[index] if index < len(anchors) else None,
            })
        units.append({
            "unit_id": f"u{base + len(intents):02d}",
            "text": f"{prefix}With {title} in place, we are ready to move on.",
            "anchor_ref": None,
        })
        return {"units": units}

    # -- debugger ----------------------------------------------------------

    def _debug_repair(self, input_value: dict) -> dict:
        fragment = input_value.get("fragment", {})
        elements = []
        for element in fragment.get("elements", []):
            style = dict(element.get("style", {}))
            style["repaired"] = "1"
            elements.append({**element, "style": style})
        return {"elements": elements}

    # -- tts ---------------------------------------------------------------

    def _tts(self, input_value: dict) -> dict:
        script = input_value.get("script", {})
        wpm = float(input_value.get("wpm_default", 120.0))
        rate = wpm / 60.0
        per_unit = [count_words(str(u.get("text", ""))) / rate
                    for u in script.get("units", [])]
        return {
            "duration_s": sum(per_unit),
            "media_ref": None,
            "per_unit_durations_s": per_unit,
            "speaking_rate": rate,
        }
