"""Layout inspection: conflict detection, scan-order repositioning, edits.

Geometry is axis-aligned and operates on leaf elements only; group boxes
are derived (recomputed as the exact union of their children after any
move).  The conflict predicate inflates each box by half the margin per
side, so two elements conflict exactly when their edge gap drops below
the margin in both axes, and the recorded overlap area is the area of the
inflated intersection.

Repositioning discretizes the frame into a cell grid and walks candidate
top-left cells in one fixed order: rightward within a row, then rows
downward, wrapping to the frame's top-left after the last cell.  The scan
starts at the element's current cell so resolved elements stay near their
authored position.  Elements whose id starts with "title" are immovable
and treated as occupied.
"""

from __future__ import annotations

import math
from dataclasses import replace

from .codegen import IR_JSON, emit
from .model import (
    BBox,
    ConflictReport,
    Edit,
    EditSet,
    ElementKind,
    FrameSpec,
    Move,
    Overflow,
    Overlap,
    PlacementPlan,
    ScanOrder,
    SceneElement,
    SceneProgram,
    SceneStage,
)

TITLE_PREFIX = "title"
DEFAULT_CELL_U = 0.25


class ApplyError(ValueError):
    """A placement move targets an element that no longer exists."""


class EditError(ValueError):
    """A human edit targets an element that does not exist."""


def _leaf_elements(scene: SceneProgram) -> list[SceneElement]:
    return [e for e in scene.elements if e.kind is not ElementKind.GROUP]


def _is_immovable(element: SceneElement) -> bool:
    return element.id.startswith(TITLE_PREFIX)


def _overflow_of(bbox: BBox, frame: FrameSpec) -> Overflow | None:
    half_w = frame.width_u / 2
    half_h = frame.height_u / 2
    edges: list[str] = []
    excess = 0.0
    if bbox.left < -half_w:
        edges.append("left")
        excess = max(excess, -half_w - bbox.left)
    if bbox.right > half_w:
        edges.append("right")
        excess = max(excess, bbox.right - half_w)
    if bbox.top > half_h:
        edges.append("top")
        excess = max(excess, bbox.top - half_h)
    if bbox.bottom < -half_h:
        edges.append("bottom")
        excess = max(excess, -half_h - bbox.bottom)
    if not edges:
        return None
    return Overflow(element_id="", violated_edges=tuple(edges), excess_u=excess)


def detect_conflicts(scene: SceneProgram, frame: FrameSpec, margin_u: float) -> ConflictReport:
    """All pairwise overlaps (margin-inflated) and frame overflows on the page.

    Overlap pairs are listed in lexicographic id order; overflows in id
    order.  An empty report means the page is conflict-free.
    """
    leaves = sorted(_leaf_elements(scene), key=lambda e: e.id)
    pad = margin_u / 2
    overlaps: list[Overlap] = []
    for i, a in enumerate(leaves):
        box_a = a.bbox.inflate(pad)
        for b in leaves[i + 1:]:
            area = box_a.intersection_area(b.bbox.inflate(pad))
            if area > 0:
                overlaps.append(Overlap(a=a.id, b=b.id, overlap_area_u2=area))
    overflows: list[Overflow] = []
    for element in leaves:
        hit = _overflow_of(element.bbox, frame)
        if hit is not None:
            overflows.append(replace(hit, element_id=element.id))
    return ConflictReport(page_index=scene.page_index,
                          overlaps=tuple(overlaps), overflows=tuple(overflows))


# ---------------------------------------------------------------------------
# Occupancy grid and the scan heuristic
# ---------------------------------------------------------------------------

class OccupancyGrid:
    """Discretized frame: cell (0, 0) is the top-left, rows grow downward."""

    def __init__(self, frame: FrameSpec, cell_u: float):
        if cell_u <= 0:
            raise ValueError("cell_u must be positive")
        self.frame = frame
        self.cell_u = cell_u
        self.cols = math.ceil(frame.width_u / cell_u)
        self.rows = math.ceil(frame.height_u / cell_u)
        self.occupied: set[tuple[int, int]] = set()

    def cell_left(self, col: int) -> float:
        return -self.frame.width_u / 2 + col * self.cell_u

    def cell_top(self, row: int) -> float:
        return self.frame.height_u / 2 - row * self.cell_u

    def cell_of_point(self, x: float, y: float) -> tuple[int, int]:
        """Cell containing a point, clamped onto the grid."""
        col = math.floor((x + self.frame.width_u / 2) / self.cell_u)
        row = math.floor((self.frame.height_u / 2 - y) / self.cell_u)
        return (min(max(col, 0), self.cols - 1), min(max(row, 0), self.rows - 1))

    def cells_touching(self, bbox: BBox) -> list[tuple[int, int]]:
        """Grid cells whose intersection with `bbox` has positive area."""
        cells: list[tuple[int, int]] = []
        col_lo = max(0, math.floor((bbox.left + self.frame.width_u / 2) / self.cell_u))
        row_lo = max(0, math.floor((self.frame.height_u / 2 - bbox.top) / self.cell_u))
        for col in range(col_lo, self.cols):
            if self.cell_left(col) >= bbox.right:
                break
            if self.cell_left(col) + self.cell_u <= bbox.left:
                continue
            for row in range(row_lo, self.rows):
                if self.cell_top(row) <= bbox.bottom:
                    break
                if self.cell_top(row) - self.cell_u >= bbox.top:
                    continue
                cells.append((col, row))
        return cells

    def mark(self, bbox: BBox) -> None:
        self.occupied.update(self.cells_touching(bbox))

    def is_free(self, bbox: BBox) -> bool:
        return not any(cell in self.occupied for cell in self.cells_touching(bbox))

    def fits_in_frame(self, bbox: BBox) -> bool:
        half_w = self.frame.width_u / 2
        half_h = self.frame.height_u / 2
        return (bbox.left >= -half_w and bbox.right <= half_w
                and bbox.bottom >= -half_h and bbox.top <= half_h)

    def scan_sequence(self, start: tuple[int, int]):
        """Every cell once: rightward, then rows downward, wrapping to (0, 0)."""
        total = self.cols * self.rows
        first = start[1] * self.cols + start[0]
        for offset in range(total):
            position = (first + offset) % total
            yield (position % self.cols, position // self.cols)


def _conflict_severity(report: ConflictReport) -> dict[str, float]:
    severity: dict[str, float] = {}
    for overlap in report.overlaps:
        severity[overlap.a] = severity.get(overlap.a, 0.0) + overlap.overlap_area_u2
        severity[overlap.b] = severity.get(overlap.b, 0.0) + overlap.overlap_area_u2
    for overflow in report.overflows:
        severity[overflow.element_id] = severity.get(overflow.element_id, 0.0) + overflow.excess_u
    return severity


def retrieve_positions(report: ConflictReport, scene: SceneProgram, frame: FrameSpec,
                       order: ScanOrder = ScanOrder.HORIZONTAL_RIGHT_THEN_VERTICAL_DOWN,
                       cell_u: float = DEFAULT_CELL_U,
                       margin_u: float = 0.0) -> PlacementPlan:
    """Target positions for conflicted elements, first-feasible in scan order.

    Conflict-free elements (and immovable titles) seed the occupancy grid;
    conflicted elements are processed in descending severity (summed
    overlap area plus overflow excess, ties by id).  Each one lands on the
    first candidate cell whose margin-inflated box lies fully in-frame and
    touches no occupied cell; its cells then become occupied.  Candidates
    also avoid the current cells of conflicted elements not yet placed, so
    a move can never collide with an element that ends up unresolved.
    Elements with no feasible cell are listed as unresolved and keep their
    position.
    """
    if order is not ScanOrder.HORIZONTAL_RIGHT_THEN_VERTICAL_DOWN:
        raise ValueError(f"unsupported scan order {order!r}")
    severity = _conflict_severity(report)
    grid = OccupancyGrid(frame, cell_u)
    pad = margin_u / 2

    movable: list[SceneElement] = []
    for element in _leaf_elements(scene):
        if element.id not in severity or _is_immovable(element):
            grid.mark(element.bbox.inflate(pad))
        else:
            movable.append(element)
    movable.sort(key=lambda e: (-severity[e.id], e.id))
    pending = {e.id: set(grid.cells_touching(e.bbox.inflate(pad))) for e in movable}

    moves: list[Move] = []
    unresolved: list[str] = []
    for element in movable:
        del pending[element.id]
        blocked = set().union(*pending.values()) if pending else set()
        start = grid.cell_of_point(element.bbox.left, element.bbox.top)
        placed = False
        for col, row in grid.scan_sequence(start):
            candidate = BBox(cx=grid.cell_left(col) + element.bbox.w / 2,
                             cy=grid.cell_top(row) - element.bbox.h / 2,
                             w=element.bbox.w, h=element.bbox.h)
            inflated = candidate.inflate(pad)
            if not grid.fits_in_frame(inflated):
                continue
            cells = grid.cells_touching(inflated)
            if any(c in grid.occupied or c in blocked for c in cells):
                continue
            moves.append(Move(element_id=element.id, new_bbox=candidate))
            grid.occupied.update(cells)
            placed = True
            break
        if not placed:
            unresolved.append(element.id)
            grid.mark(element.bbox.inflate(pad))
    return PlacementPlan(moves=tuple(moves), unresolved=tuple(unresolved))


# ---------------------------------------------------------------------------
# Applying plans and human edits
# ---------------------------------------------------------------------------

def _recompute_group_bboxes(elements: list[SceneElement]) -> list[SceneElement]:
    by_id = {e.id: e for e in elements}
    out: list[SceneElement] = []
    for element in elements:
        if element.kind is ElementKind.GROUP:
            children = [by_id[c] for c in element.children if c in by_id]
            if children:
                left = min(c.bbox.left for c in children)
                right = max(c.bbox.right for c in children)
                bottom = min(c.bbox.bottom for c in children)
                top = max(c.bbox.top for c in children)
                element = replace(element, bbox=BBox(cx=(left + right) / 2, cy=(bottom + top) / 2,
                                                     w=right - left, h=top - bottom))
        out.append(element)
    return out


def apply_layout(scene: SceneProgram, plan: PlacementPlan) -> SceneProgram:
    """Apply a placement plan; geometry changes only, then re-emit the source."""
    by_id = scene.element_map()
    missing = [m.element_id for m in plan.moves if m.element_id not in by_id]
    if missing:
        raise ApplyError(f"moves target missing elements: {missing}")
    new_boxes = {m.element_id: m.new_bbox for m in plan.moves}
    elements = [replace(e, bbox=new_boxes[e.id]) if e.id in new_boxes else e
                for e in scene.elements]
    elements = _recompute_group_bboxes(elements)
    out = replace(scene, elements=tuple(elements)).at_stage(SceneStage.LAID_OUT)
    return replace(out, source_text=emit(out, IR_JSON))


def apply_human_edits(scene: SceneProgram, edits: EditSet) -> SceneProgram:
    """Apply educator edits verbatim.

    Human edits always win: nothing is re-run through the scan heuristic,
    and untouched elements never move.  Deleting an element removes every
    event that targeted only deleted elements and prunes it from group
    children.  Callers run detect_conflicts on the result and attach the
    fresh report to the trace for the review UI to display.
    """
    by_id = scene.element_map()
    for edit in edits.edits:
        if edit.element_id not in by_id:
            raise EditError(f"edit targets missing element {edit.element_id!r}")

    deleted = {e.element_id for e in edits.edits if e.delete}
    changed: dict[str, Edit] = {e.element_id: e for e in edits.edits if not e.delete}

    elements: list[SceneElement] = []
    for element in scene.elements:
        if element.id in deleted:
            continue
        edit = changed.get(element.id)
        if edit is not None:
            if edit.new_bbox is not None:
                element = replace(element, bbox=edit.new_bbox)
            if edit.new_content is not None:
                element = replace(element, content=edit.new_content)
        if element.kind is ElementKind.GROUP and deleted:
            element = replace(element,
                              children=tuple(c for c in element.children if c not in deleted))
        elements.append(element)
    if deleted:
        elements = _recompute_group_bboxes(elements)

    events = []
    for event in scene.events:
        if event.target_ids and all(t in deleted for t in event.target_ids):
            continue
        if deleted:
            event = replace(event, target_ids=tuple(t for t in event.target_ids
                                                    if t not in deleted))
        events.append(event)

    out = replace(scene, elements=tuple(elements), events=tuple(events))
    out = out.at_stage(SceneStage.FINAL)
    return replace(out, source_text=emit(out, IR_JSON))
