"""Manuscript segmentation, per-segment pagination agents, aggregation.

Segmentation packs whole sections greedily — a section is never split,
so concatenating segment texts reproduces the manuscript byte-for-byte
and coverage checks stay exact.  Each segment goes to an independent
local agent (one LLM call); aggregation concatenates the per-segment
blueprints, renumbers pages 1..n, patches duplicate titles across
segment boundaries, and verifies every section is covered.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

from .assets import llm_payload
from .canonical import SchemaError, canonical_loads, from_value, to_value
from .gateway import Gateway, Service, call_validated
from .model import Manuscript, PageBlueprint, Segment, Span, VisualIntent, section_text

CONT_SUFFIX = " (cont.)"


class SegmentError(ValueError):
    def __init__(self, section_index: int, words: int, budget: int):
        super().__init__(f"section {section_index} has {words} words, exceeding "
                         f"the {budget}-word segment budget")
        self.section_index = section_index


class PaginateError(RuntimeError):
    def __init__(self, segment_index: int, message: str):
        super().__init__(f"segment {segment_index}: {message}")
        self.segment_index = segment_index


class AggregateError(ValueError):
    def __init__(self, uncovered: tuple[int, ...]):
        super().__init__(f"no page covers manuscript sections {list(uncovered)}")
        self.uncovered = uncovered


def segment(manuscript: Manuscript, max_words_per_segment: int) -> list[Segment]:
    """Greedy packing: maximal prefix of remaining sections within budget."""
    if max_words_per_segment < 1:
        raise ValueError("max_words_per_segment must be positive")
    for i, sec in enumerate(manuscript.sections):
        if sec.word_count > max_words_per_segment:
            raise SegmentError(i, sec.word_count, max_words_per_segment)
    segments: list[Segment] = []
    start = 0
    while start < len(manuscript.sections):
        end = start
        words = 0
        while end < len(manuscript.sections) \
                and words + manuscript.sections[end].word_count <= max_words_per_segment:
            words += manuscript.sections[end].word_count
            end += 1
        text = "".join(section_text(s) for s in manuscript.sections[start:end])
        segments.append(Segment(index=len(segments), span=Span(start=start, stop=end),
                                text=text))
        start = end
    return segments


def _validate_pages(seg: Segment, density_max: int, value) -> list[PageBlueprint]:
    if not isinstance(value, dict) or "pages" not in value:
        raise SchemaError("pagination must be an object with a 'pages' key")
    if not isinstance(value["pages"], list) or not value["pages"]:
        raise SchemaError("pagination produced no pages")
    pages: list[PageBlueprint] = []
    last_start = seg.span.start
    for i, item in enumerate(value["pages"]):
        if not isinstance(item, dict):
            raise SchemaError(f"page {i} is not an object")
        rng = item.get("section_range")
        if (not isinstance(rng, list) or len(rng) != 2
                or not all(isinstance(x, int) for x in rng)):
            raise SchemaError(f"page {i} lacks a [lo, hi] section_range")
        try:
            span = Span(start=rng[0], stop=rng[1])
        except ValueError as exc:
            raise SchemaError(f"page {i}: {exc}") from exc
        if not seg.span.covers(span):
            raise SchemaError(f"page {i} span {rng} escapes segment span "
                              f"[{seg.span.start}, {seg.span.stop})")
        if span.start < last_start:
            raise SchemaError(f"page {i} span starts before its predecessor")
        last_start = span.start
        intents: tuple[VisualIntent, ...] = from_value(tuple[VisualIntent, ...],
                                                       item.get("visual_intents", []))
        bullets = from_value(tuple[str, ...], item.get("bullet_points", []))
        if not bullets and not intents:
            raise SchemaError(f"page {i} has neither bullets nor visuals")
        density = item.get("est_density")
        if not isinstance(density, int) or density < 1:
            raise SchemaError(f"page {i} has invalid est_density {density!r}")
        if density > density_max:
            raise SchemaError(f"page {i} density {density} exceeds the "
                              f"configured maximum {density_max}")
        title = item.get("title")
        if not isinstance(title, str) or not title.strip():
            raise SchemaError(f"page {i} lacks a title")
        pages.append(PageBlueprint(page_index=0, title=title, bullet_points=bullets,
                                   visual_intents=intents, source_span=span,
                                   est_density=density))
    return pages


def paginate_segment(seg: Segment, density_max: int, *,
                     gateway: Gateway) -> list[PageBlueprint]:
    """One local-agent LLM call; blueprints are schema-validated here."""
    payload = llm_payload("paginator", "paginate_v1", {
        "density_max": density_max,
        "segment": to_value(seg),
    })
    try:
        return call_validated(
            gateway, Service.LLM, "paginator.paginate", payload,
            lambda raw: _validate_pages(seg, density_max, canonical_loads(raw)))
    except SchemaError as err:
        raise PaginateError(seg.index, str(err)) from err


def paginate_all(segments: list[Segment], density_max: int, *, gateway: Gateway,
                 parallelism: int = 4) -> list[list[PageBlueprint]]:
    """Local agents run concurrently; results keep segment order."""
    if not segments:
        return []
    workers = max(1, min(parallelism, len(segments)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: paginate_segment(s, density_max, gateway=gateway),
                             segments))


def aggregate(per_segment: list[list[PageBlueprint]], *,
              section_count: int) -> list[PageBlueprint]:
    """Concatenate in segment order, renumber 1..n, and check coverage."""
    pages: list[PageBlueprint] = []
    for seg_index, group in enumerate(per_segment):
        for pos, page in enumerate(group):
            if seg_index > 0 and pos == 0 and pages and pages[-1].title == page.title:
                page = replace(page, title=page.title + CONT_SUFFIX)
            pages.append(page)
    covered: set[int] = set()
    for page in pages:
        covered.update(page.source_span.indices())
    uncovered = tuple(i for i in range(section_count) if i not in covered)
    if uncovered:
        raise AggregateError(uncovered)
    return [replace(page, page_index=i) for i, page in enumerate(pages, start=1)]
