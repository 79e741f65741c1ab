"""Geometric relation classifiers and relation graphs.

The 24 rule-based classifiers work on axis-aligned boxes. Front-view (x-z)
relations also accept sketch boxes, which are lifted to full workspace depth
because a sketch carries no depth. Relation graphs are typed hypergraphs
over block ids holding geometric edges and, once matched, stability-pattern
instances.
"""

import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any

import networkx as nx

from sketchstack import utils
from sketchstack.config import ConfigError
from sketchstack.core import DEFAULT_BOUNDS, TABLE_ID, Box3, Scene, ValidationError, table_box

if TYPE_CHECKING:
    from sketchstack.patterns import PatternInstance
    from sketchstack.sketchio import Sketch, SketchBox

logger = logging.getLogger(__name__)

AREA_TOL = 1e-9


class ArityError(ValidationError):
    """Raised when a relation receives the wrong number of operands."""

    pass


class MappingError(ValidationError):
    """Raised when a graph refers to blocks that do not exist."""

    pass


class Plane(str, Enum):
    XZ = "xz"
    XY = "xy"


@dataclass(frozen=True)
class RelationInfo:
    plane: Plane
    arity: int | None  # None means variadic
    min_operands: int = 2
    symmetric: bool = False
    table_relative: bool = False


class RelationType(str, Enum):
    LEFT_OF = "left-of"
    LEFT_IN = "left-in"
    RIGHT_IN = "right-in"
    CENTER_IN = "center-in"
    SUPPORTED_BY_PARTIALLY = "supported-by-partially"
    SUPPORTED_BY_FULLY = "supported-by-fully"
    HORIZONTAL_ALIGNED = "horizontal-aligned"
    VERTICAL_ALIGNED_CENTROID = "vertical-aligned-centroid"
    VERTICAL_ALIGNED_LEFT = "vertical-aligned-left"
    VERTICAL_ALIGNED_RIGHT = "vertical-aligned-right"
    HORIZONTAL_ALIGNED_IN_A_LINE = "horizontal-aligned-in-a-line"
    TOUCHING_ALONG_X = "touching-along-x"
    NEAR_ALONG_X = "near-along-x"
    FRONT_OF = "front-of"
    FRONT_IN = "front-in"
    BACK_IN = "back-in"
    TOUCHING_ALONG_Y = "touching-along-y"
    NEAR_ALONG_Y = "near-along-y"
    DEPTH_ALIGNED = "depth-aligned"
    DEPTH_ALIGNED_IN_A_LINE = "depth-aligned-in-a-line"
    REGULAR_GRID_SPARSE = "regular-grid-sparse"
    REGULAR_GRID_COMPACT = "regular-grid-compact"
    RANDOM_SPLIT_GRID_SPARSE = "random-split-grid-sparse"
    RANDOM_SPLIT_GRID_COMPACT = "random-split-grid-compact"

    @property
    def info(self) -> RelationInfo:
        return RELATION_INFO[self]

    @property
    def plane(self) -> Plane:
        return self.info.plane

    @property
    def arity(self) -> int | None:
        return self.info.arity

    @property
    def variadic(self) -> bool:
        return self.info.arity is None


R = RelationType

RELATION_INFO: dict[RelationType, RelationInfo] = {
    R.LEFT_OF: RelationInfo(Plane.XZ, 2),
    R.LEFT_IN: RelationInfo(Plane.XZ, 2, table_relative=True),
    R.RIGHT_IN: RelationInfo(Plane.XZ, 2, table_relative=True),
    R.CENTER_IN: RelationInfo(Plane.XZ, 2, table_relative=True),
    R.SUPPORTED_BY_PARTIALLY: RelationInfo(Plane.XZ, 2),
    R.SUPPORTED_BY_FULLY: RelationInfo(Plane.XZ, 2),
    R.HORIZONTAL_ALIGNED: RelationInfo(Plane.XZ, 2, symmetric=True),
    R.VERTICAL_ALIGNED_CENTROID: RelationInfo(Plane.XZ, 2),
    R.VERTICAL_ALIGNED_LEFT: RelationInfo(Plane.XZ, 2),
    R.VERTICAL_ALIGNED_RIGHT: RelationInfo(Plane.XZ, 2),
    R.HORIZONTAL_ALIGNED_IN_A_LINE: RelationInfo(Plane.XZ, None, min_operands=3),
    R.TOUCHING_ALONG_X: RelationInfo(Plane.XZ, 2),
    R.NEAR_ALONG_X: RelationInfo(Plane.XZ, 2),
    R.FRONT_OF: RelationInfo(Plane.XY, 2),
    R.FRONT_IN: RelationInfo(Plane.XY, 2, table_relative=True),
    R.BACK_IN: RelationInfo(Plane.XY, 2, table_relative=True),
    R.TOUCHING_ALONG_Y: RelationInfo(Plane.XY, 2),
    R.NEAR_ALONG_Y: RelationInfo(Plane.XY, 2),
    R.DEPTH_ALIGNED: RelationInfo(Plane.XY, 2, symmetric=True),
    R.DEPTH_ALIGNED_IN_A_LINE: RelationInfo(Plane.XY, None, min_operands=3),
    R.REGULAR_GRID_SPARSE: RelationInfo(Plane.XY, None),
    R.REGULAR_GRID_COMPACT: RelationInfo(Plane.XY, None),
    R.RANDOM_SPLIT_GRID_SPARSE: RelationInfo(Plane.XY, None),
    R.RANDOM_SPLIT_GRID_COMPACT: RelationInfo(Plane.XY, None),
}

GRID_RELATIONS = (
    R.REGULAR_GRID_SPARSE,
    R.REGULAR_GRID_COMPACT,
    R.RANDOM_SPLIT_GRID_SPARSE,
    R.RANDOM_SPLIT_GRID_COMPACT,
)
SUPPORT_RELATIONS = (R.SUPPORTED_BY_FULLY, R.SUPPORTED_BY_PARTIALLY)
TOUCHING_RELATIONS = (R.TOUCHING_ALONG_X, R.TOUCHING_ALONG_Y)


@dataclass(frozen=True)
class ClassifierConfig:
    """Classifier thresholds in scene units."""

    eps: float = 0.02
    touch_eps: float = 0.02
    gap: float = 0.30
    d_near: float = 0.25
    alpha: float = 0.5
    beta: float = 0.5
    grid_reg_tol: float = 0.1
    fill_sparse: float = 0.90
    fill_compact: float = 0.95

    def __post_init__(self):
        for name in ("eps", "touch_eps", "gap", "d_near", "alpha", "beta", "grid_reg_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"Classifier threshold '{name}' must be positive")
        if not self.eps <= self.touch_eps <= self.d_near:
            raise ConfigError("Classifier thresholds must satisfy eps <= touch_eps <= d_near")

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "ClassifierConfig":
        known = {k: float(v) for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# Box predicates


def _overlap(a_lo: float, a_hi: float, b_lo: float, b_hi: float) -> float:
    return max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))


def _x_overlap(a: Box3, b: Box3) -> float:
    return _overlap(a.left, a.right, b.left, b.right)


def _y_overlap(a: Box3, b: Box3) -> float:
    return _overlap(a.front, a.back, b.front, b.back)


def _z_overlap(a: Box3, b: Box3) -> float:
    return _overlap(a.bottom, a.top, b.bottom, b.top)


def _width(b: Box3) -> float:
    return b.right - b.left


def _depth(b: Box3) -> float:
    return b.back - b.front


def _same_level(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return abs(a.bottom - b.bottom) < cfg.eps


def _rests_on(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return abs(a.bottom - b.top) <= cfg.eps


def _footprint_within(inner: Box3, outer: Box3, tol: float) -> bool:
    return (
        inner.left >= outer.left - tol
        and inner.right <= outer.right + tol
        and inner.front >= outer.front - tol
        and inner.back <= outer.back + tol
    )


def _y_share(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return _y_overlap(a, b) > cfg.alpha * min(_depth(a), _depth(b))


def _x_share(a: Box3, b: Box3, frac: float) -> bool:
    return _x_overlap(a, b) > frac * min(_width(a), _width(b))


def _regular(values: list[float], tol: float) -> bool:
    """True if consecutive spacings are positive and within `tol` of their mean."""
    spacings = [b - a for a, b in zip(values, values[1:], strict=False)]
    if not spacings:
        return True
    if any(s <= 0 for s in spacings):
        return False
    mean = sum(spacings) / len(spacings)
    return max(abs(s - mean) for s in spacings) / mean < tol


def _cluster(values: list[float], tol: float) -> list[float]:
    """Group sorted values closer than `tol`; returns the group means."""
    groups: list[list[float]] = []
    for v in sorted(values):
        if groups and v - groups[-1][-1] < tol:
            groups[-1].append(v)
        else:
            groups.append([v])
    return [sum(g) / len(g) for g in groups]


def _fill_fraction(boxes: Sequence[Box3]) -> float:
    area = sum(_width(b) * _depth(b) for b in boxes)
    hull = (max(b.right for b in boxes) - min(b.left for b in boxes)) * (
        max(b.back for b in boxes) - min(b.front for b in boxes)
    )
    return area / hull if hull > 0 else 0.0


def _level_ok(boxes: Sequence[Box3], cfg: ClassifierConfig) -> bool:
    bottoms = [b.bottom for b in boxes]
    return max(bottoms) - min(bottoms) < cfg.eps


def _footprints_disjoint(boxes: Sequence[Box3]) -> bool:
    for i, a in enumerate(boxes):
        for b in boxes[i + 1 :]:
            if _x_overlap(a, b) * _y_overlap(a, b) > AREA_TOL:
                return False
    return True


def _grid_gaps(boxes: Sequence[Box3], cfg: ClassifierConfig) -> list[float] | None:
    """Gaps between grid neighbours if the boxes form a regular grid, else None."""
    if len(boxes) < 2 or not _level_ok(boxes, cfg):
        return None
    widths = [_width(b) for b in boxes]
    depths = [_depth(b) for b in boxes]
    if max(widths) / min(widths) > 1 + cfg.grid_reg_tol:
        return None
    if max(depths) / min(depths) > 1 + cfg.grid_reg_tol:
        return None

    cols = _cluster([b.center[0] for b in boxes], cfg.eps)
    rows = _cluster([b.center[1] for b in boxes], cfg.eps)
    if len(cols) * len(rows) != len(boxes):
        return None

    cells: dict[tuple[int, int], Box3] = {}
    for b in boxes:
        cx, cy, _ = b.center
        c = min(range(len(cols)), key=lambda i: abs(cols[i] - cx))
        r = min(range(len(rows)), key=lambda i: abs(rows[i] - cy))
        if (r, c) in cells:
            return None
        cells[(r, c)] = b

    if not (_regular(cols, cfg.grid_reg_tol) and _regular(rows, cfg.grid_reg_tol)):
        return None

    gaps = []
    for r in range(len(rows)):
        for c in range(len(cols) - 1):
            gaps.append(cells[(r, c + 1)].left - cells[(r, c)].right)
    for c in range(len(cols)):
        for r in range(len(rows) - 1):
            gaps.append(cells[(r + 1, c)].front - cells[(r, c)].back)
    return gaps


def _line(boxes: Sequence[Box3], cfg: ClassifierConfig, axis: int) -> bool:
    """Equally spaced run along `axis` (0 = x, 1 = y) with aligned cross-axis centers."""
    if len(boxes) < 3 or not _level_ok(boxes, cfg):
        return False
    cross = [b.center[1 - axis] for b in boxes]
    if max(cross) - min(cross) >= cfg.eps:
        return False
    ordered = sorted(boxes, key=lambda b: b.center[axis])
    for a, b in zip(ordered, ordered[1:], strict=False):
        if b.lo[axis] < a.hi[axis] - cfg.eps:
            return False
    return _regular([b.center[axis] for b in ordered], cfg.grid_reg_tol)


def _left_of(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return (
        a.right <= b.left + cfg.eps
        and abs(b.left - a.right) < cfg.gap
        and _y_share(a, b, cfg)
        and _same_level(a, b, cfg)
    )


def _supported_fully(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return _rests_on(a, b, cfg) and (
        _footprint_within(a, b, cfg.eps) or _footprint_within(b, a, cfg.eps)
    )


def _supported_partially(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return (
        _rests_on(a, b, cfg)
        and _x_overlap(a, b) * _y_overlap(a, b) > AREA_TOL
        and not _supported_fully(a, b, cfg)
    )


def _horizontal_aligned(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return _same_level(a, b, cfg) and (
        abs(a.center[1] - b.center[1]) < cfg.eps
        or abs(a.front - b.front) < cfg.eps
        or abs(a.back - b.back) < cfg.eps
    )


def _vertical_aligned_centroid(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    return _rests_on(a, b, cfg) and math.hypot(dx, dy) < cfg.eps


def _vertical_aligned_left(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return _rests_on(a, b, cfg) and abs(a.left - b.left) < cfg.eps and _y_share(a, b, cfg)


def _vertical_aligned_right(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return _rests_on(a, b, cfg) and abs(a.right - b.right) < cfg.eps and _y_share(a, b, cfg)


def _touching_x(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return abs(a.right - b.left) < cfg.eps and _y_share(a, b, cfg) and _z_overlap(a, b) > 0


def _near_x(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    gap = b.left - a.right
    return cfg.eps <= gap < cfg.d_near and _y_share(a, b, cfg) and _same_level(a, b, cfg)


def _front_of(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return (
        a.back <= b.front + cfg.eps
        and abs(b.front - a.back) < cfg.gap
        and _x_share(a, b, cfg.beta)
        and _same_level(a, b, cfg)
    )


def _touching_y(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return abs(a.back - b.front) < cfg.eps and _x_share(a, b, cfg.alpha) and _z_overlap(a, b) > 0


def _near_y(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    gap = b.front - a.back
    return cfg.eps <= gap < cfg.d_near and _x_share(a, b, cfg.alpha) and _same_level(a, b, cfg)


def _depth_aligned(a: Box3, b: Box3, cfg: ClassifierConfig) -> bool:
    return _same_level(a, b, cfg) and (
        abs(a.center[0] - b.center[0]) < cfg.eps
        or abs(a.left - b.left) < cfg.eps
        or abs(a.right - b.right) < cfg.eps
    )


def _regular_grid_sparse(boxes: Sequence[Box3], cfg: ClassifierConfig) -> bool:
    gaps = _grid_gaps(boxes, cfg)
    return gaps is not None and all(g > cfg.touch_eps for g in gaps)


def _regular_grid_compact(boxes: Sequence[Box3], cfg: ClassifierConfig) -> bool:
    gaps = _grid_gaps(boxes, cfg)
    return (
        gaps is not None
        and all(abs(g) <= cfg.touch_eps for g in gaps)
        and _fill_fraction(boxes) >= cfg.fill_compact
    )


def _random_split(boxes: Sequence[Box3], cfg: ClassifierConfig) -> float | None:
    """Fill fraction of an irregular same-level split, or None if not one."""
    if len(boxes) < 2 or not _level_ok(boxes, cfg) or not _footprints_disjoint(boxes):
        return None
    if _grid_gaps(boxes, cfg) is not None:
        return None
    return _fill_fraction(boxes)


def _random_split_sparse(boxes: Sequence[Box3], cfg: ClassifierConfig) -> bool:
    fill = _random_split(boxes, cfg)
    return fill is not None and cfg.fill_sparse <= fill < cfg.fill_compact


def _random_split_compact(boxes: Sequence[Box3], cfg: ClassifierConfig) -> bool:
    fill = _random_split(boxes, cfg)
    return fill is not None and fill >= cfg.fill_compact


_BINARY = {
    R.LEFT_OF: _left_of,
    R.LEFT_IN: lambda a, t, cfg: a.right < t.center[0],
    R.RIGHT_IN: lambda a, t, cfg: a.left > t.center[0],
    R.CENTER_IN: lambda a, t, cfg: (
        abs(a.center[0] - t.center[0]) < cfg.eps and abs(a.center[1] - t.center[1]) < cfg.eps
    ),
    R.SUPPORTED_BY_PARTIALLY: _supported_partially,
    R.SUPPORTED_BY_FULLY: _supported_fully,
    R.HORIZONTAL_ALIGNED: _horizontal_aligned,
    R.VERTICAL_ALIGNED_CENTROID: _vertical_aligned_centroid,
    R.VERTICAL_ALIGNED_LEFT: _vertical_aligned_left,
    R.VERTICAL_ALIGNED_RIGHT: _vertical_aligned_right,
    R.TOUCHING_ALONG_X: _touching_x,
    R.NEAR_ALONG_X: _near_x,
    R.FRONT_OF: _front_of,
    R.FRONT_IN: lambda a, t, cfg: a.back < t.center[1],
    R.BACK_IN: lambda a, t, cfg: a.front > t.center[1],
    R.TOUCHING_ALONG_Y: _touching_y,
    R.NEAR_ALONG_Y: _near_y,
    R.DEPTH_ALIGNED: _depth_aligned,
}

_VARIADIC = {
    R.HORIZONTAL_ALIGNED_IN_A_LINE: lambda boxes, cfg: _line(boxes, cfg, axis=0),
    R.DEPTH_ALIGNED_IN_A_LINE: lambda boxes, cfg: _line(boxes, cfg, axis=1),
    R.REGULAR_GRID_SPARSE: _regular_grid_sparse,
    R.REGULAR_GRID_COMPACT: _regular_grid_compact,
    R.RANDOM_SPLIT_GRID_SPARSE: _random_split_sparse,
    R.RANDOM_SPLIT_GRID_COMPACT: _random_split_compact,
}


def check_arity(rel: RelationType, count: int) -> None:
    """Raise ArityError unless `count` operands fit the relation."""
    info = rel.info
    if info.arity is not None and count != info.arity:
        raise ArityError(f"{rel.value} takes {info.arity} operands, got {count}")
    if info.arity is None and count < info.min_operands:
        raise ArityError(f"{rel.value} takes at least {info.min_operands} operands, got {count}")


def eval_geom(rel: RelationType, operands: Sequence[Box3], cfg: ClassifierConfig) -> bool:
    """Evaluate one geometric relation on operand boxes.

    Table-relative relations take the table box as their second operand.

    Args:
        rel: Relation to evaluate
        operands: Operand boxes in relation order
        cfg: Classifier thresholds

    Returns:
        True if the relation holds

    Raises:
        ArityError: If the operand count does not match the relation
    """
    check_arity(rel, len(operands))
    if rel in _BINARY:
        return bool(_BINARY[rel](operands[0], operands[1], cfg))
    return bool(_VARIADIC[rel](list(operands), cfg))


def sketch_box3(box: "SketchBox", bounds: Box3) -> Box3:
    """Lift a front-view sketch box to a full-depth 3D box."""
    return Box3((box.left, bounds.front, box.bottom), (box.right, bounds.back, box.top))


def front_view_box(box: Box3, bounds: Box3) -> Box3:
    """Project a 3D box onto the front view by stretching it to full depth."""
    return Box3((box.left, bounds.front, box.bottom), (box.right, bounds.back, box.top))


# Graphs


@dataclass(frozen=True)
class RelationEdge:
    """A relation over an ordered operand list."""

    rel: RelationType
    operands: tuple[int, ...]

    def __post_init__(self):
        rel = RelationType(self.rel)
        operands = tuple(int(o) for o in self.operands)
        check_arity(rel, len(operands))
        if len(set(operands)) != len(operands):
            raise ArityError(f"{rel.value} operands must be distinct, got {operands}")
        if rel.info.symmetric:
            operands = tuple(sorted(operands))
        object.__setattr__(self, "rel", rel)
        object.__setattr__(self, "operands", operands)

    @property
    def key(self) -> tuple[str, tuple[int, ...]]:
        """Identity of the edge; variadic edges ignore operand order."""
        if self.rel.variadic:
            return (self.rel.value, tuple(sorted(self.operands)))
        return (self.rel.value, self.operands)

    @property
    def sort_key(self) -> tuple[str, tuple[int, ...]]:
        return (self.rel.value, self.operands)

    def __str__(self) -> str:
        return f"{self.rel.value}({', '.join(str(o) for o in self.operands)})"


@dataclass(frozen=True)
class GraphNode:
    id: int
    type_id: int
    hidden: bool = False


@dataclass(frozen=True)
class RelationGraph:
    """Typed hypergraph: geometric edges plus stability-pattern instances."""

    nodes: tuple[GraphNode, ...] = ()
    geom_edges: tuple[RelationEdge, ...] = ()
    stab_edges: tuple["PatternInstance", ...] = ()
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = tuple(sorted(self.nodes, key=lambda n: n.id))
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            raise MappingError(f"Duplicate node ids in graph: {ids}")
        known = set(ids)

        unique: dict[tuple, RelationEdge] = {}
        for edge in self.geom_edges:
            missing = [o for o in edge.operands if o not in known]
            if missing:
                raise MappingError(f"Edge {edge} refers to unknown nodes {missing}")
            unique.setdefault(edge.key, edge)
        edges = tuple(sorted(unique.values(), key=lambda e: e.sort_key))

        stab: dict[tuple, Any] = {}
        for inst in self.stab_edges:
            stab.setdefault(inst.key, inst)

        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "geom_edges", edges)
        object.__setattr__(self, "stab_edges", tuple(sorted(stab.values(), key=lambda i: i.key)))
        object.__setattr__(self, "_index", dict(unique))

    @property
    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    @property
    def block_ids(self) -> list[int]:
        """Node ids excluding the table."""
        return [n.id for n in self.nodes if n.id != TABLE_ID]

    def node(self, node_id: int) -> GraphNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise MappingError(f"Unknown node id {node_id}")

    def has(self, rel: RelationType, operands: Iterable[int]) -> bool:
        try:
            return RelationEdge(rel, tuple(operands)).key in self._index
        except ArityError:
            return False

    def edges_of(self, rel: RelationType) -> list[RelationEdge]:
        return [e for e in self.geom_edges if e.rel == rel]

    def with_nodes(self, nodes: Iterable[GraphNode]) -> "RelationGraph":
        return replace(self, nodes=self.nodes + tuple(nodes))

    def with_edges(self, edges: Iterable[RelationEdge]) -> "RelationGraph":
        return replace(self, geom_edges=self.geom_edges + tuple(edges))

    def without_edges(self, edges: Iterable[RelationEdge]) -> "RelationGraph":
        drop = {e.key for e in edges}
        return replace(self, geom_edges=tuple(e for e in self.geom_edges if e.key not in drop))

    def with_patterns(self, instances: Iterable["PatternInstance"]) -> "RelationGraph":
        return replace(self, stab_edges=tuple(instances))

    def restricted(self, node_ids: Iterable[int]) -> "RelationGraph":
        """Induced subgraph on `node_ids` (the table is kept when referenced)."""
        keep = set(node_ids)
        edges = [e for e in self.geom_edges if all(o in keep or o == TABLE_ID for o in e.operands)]
        if any(TABLE_ID in e.operands for e in edges):
            keep.add(TABLE_ID)
        return RelationGraph(
            tuple(n for n in self.nodes if n.id in keep),
            tuple(edges),
            tuple(i for i in self.stab_edges if set(i.block_ids) <= keep),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "nodes": [{"id": n.id, "type_id": n.type_id, "hidden": n.hidden} for n in self.nodes],
            "geom_edges": [
                {"rel": e.rel.value, "operands": list(e.operands)} for e in self.geom_edges
            ],
            "stab_edges": [i.to_dict() for i in self.stab_edges],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RelationGraph":
        from sketchstack.patterns import PatternInstance

        try:
            nodes = tuple(
                GraphNode(int(n["id"]), int(n["type_id"]), bool(n.get("hidden", False)))
                for n in data["nodes"]
            )
            edges = tuple(
                RelationEdge(RelationType(e["rel"]), tuple(e["operands"]))
                for e in data["geom_edges"]
            )
            stab = tuple(PatternInstance.from_dict(i) for i in data.get("stab_edges", []))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ValidationError):
                raise
            raise MappingError(f"Malformed relation graph data: {e}") from e
        return cls(nodes, edges, stab)


def save_graph(graph: RelationGraph, path: Path) -> None:
    utils.atomic_write_text(Path(path), json.dumps(graph.to_dict(), indent=2) + "\n")


def load_graph(path: Path) -> RelationGraph:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Graph file not found: {path}")
    return RelationGraph.from_dict(json.loads(path.read_text()))


# Extraction


def _pairwise_edges(
    boxes: dict[int, Box3], relations: Iterable[RelationType], cfg: ClassifierConfig
) -> list[RelationEdge]:
    edges = []
    ids = sorted(boxes)
    for rel in relations:
        fn = _BINARY[rel]
        for a in ids:
            for b in ids:
                if a == b or (rel.info.symmetric and b < a):
                    continue
                if fn(boxes[a], boxes[b], cfg):
                    edges.append(RelationEdge(rel, (a, b)))
    return edges


def _table_edges(
    boxes: dict[int, Box3], table: Box3, relations: Iterable[RelationType], cfg: ClassifierConfig
) -> list[RelationEdge]:
    edges = []
    for rel in relations:
        fn = _BINARY[rel]
        for a in sorted(boxes):
            if fn(boxes[a], table, cfg):
                edges.append(RelationEdge(rel, (a, TABLE_ID)))
    return edges


def _maximal(edges: list[RelationEdge]) -> list[RelationEdge]:
    """Drop variadic edges strictly contained in another edge of the same relation."""
    kept = []
    for e in edges:
        s = set(e.operands)
        if not any(
            o.rel == e.rel and s < set(o.operands) for o in edges if o is not e
        ):
            kept.append(e)
    return kept


def _line_runs(
    boxes: dict[int, Box3], rel: RelationType, cfg: ClassifierConfig
) -> list[RelationEdge]:
    """Maximal equally spaced runs among same-level, cross-axis-aligned blocks."""
    axis = 0 if rel == R.HORIZONTAL_ALIGNED_IN_A_LINE else 1
    g = nx.Graph()
    g.add_nodes_from(boxes)
    ids = sorted(boxes)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            ba, bb = boxes[a], boxes[b]
            off_axis = abs(ba.center[1 - axis] - bb.center[1 - axis])
            if _same_level(ba, bb, cfg) and off_axis < cfg.eps:
                g.add_edge(a, b)

    edges = []
    for component in nx.connected_components(g):
        ordered = sorted(component, key=lambda k: (boxes[k].center[axis], k))
        for start in range(len(ordered)):
            best = None
            for stop in range(start + 3, len(ordered) + 1):
                run = ordered[start:stop]
                if _line([boxes[k] for k in run], cfg, axis):
                    best = run
            if best:
                edges.append(RelationEdge(rel, tuple(best)))
    return _maximal(edges)


def support_components(edges: Iterable[RelationEdge]) -> list[tuple[list[int], list[int]]]:
    """Connected bipartite components of supported-by edges.

    Each support edge (top, base) links a block in its top role to a block in
    its base role, so a block can belong to one component as a top and to
    another as a base. Table supports are ignored.

    Returns:
        (base_ids, top_ids) per component, sorted, in deterministic order
    """
    g = nx.Graph()
    for e in edges:
        if e.rel in SUPPORT_RELATIONS and TABLE_ID not in e.operands:
            top, base = e.operands
            g.add_edge(("top", top), ("base", base))

    components = []
    for component in nx.connected_components(g):
        bases = sorted(k for role, k in component if role == "base")
        tops = sorted(k for role, k in component if role == "top")
        components.append((bases, tops))
    components.sort(key=lambda c: (c[0], c[1]))
    return components


def _grid_candidates(
    boxes: dict[int, Box3], support_edges: list[RelationEdge], cfg: ClassifierConfig
) -> list[tuple[int, ...]]:
    """Block groups on which grid relations are evaluated.

    Candidates are the tiers of every support component and every group of
    same-level blocks linked by side adjacency within GAP.
    """
    groups: set[tuple[int, ...]] = set()
    for bases, tops in support_components(support_edges):
        for tier in (bases, tops):
            if len(tier) >= 2:
                groups.add(tuple(sorted(tier)))

    g = nx.Graph()
    g.add_nodes_from(boxes)
    ids = sorted(boxes)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            ba, bb = boxes[a], boxes[b]
            if not _same_level(ba, bb, cfg):
                continue
            gap_x = max(bb.left - ba.right, ba.left - bb.right)
            gap_y = max(bb.front - ba.back, ba.front - bb.back)
            if max(gap_x, gap_y) < cfg.gap:
                g.add_edge(a, b)
    for component in nx.connected_components(g):
        if len(component) >= 2:
            groups.add(tuple(sorted(component)))
    return sorted(groups)


def _grid_edges(
    boxes: dict[int, Box3], support_edges: list[RelationEdge], cfg: ClassifierConfig
) -> list[RelationEdge]:
    edges = []
    for group in _grid_candidates(boxes, support_edges, cfg):
        members = [boxes[k] for k in group]
        ordered = tuple(sorted(group, key=lambda k: (boxes[k].center[1], boxes[k].center[0], k)))
        for rel in GRID_RELATIONS:
            if _VARIADIC[rel](members, cfg):
                edges.append(RelationEdge(rel, ordered))
    return _maximal(edges)


_XZ_PAIRWISE = [r for r in R if r.plane == Plane.XZ and r in _BINARY and not r.info.table_relative]
_XY_PAIRWISE = [r for r in R if r.plane == Plane.XY and r in _BINARY and not r.info.table_relative]
_XZ_TABLE = [r for r in R if r.plane == Plane.XZ and r.info.table_relative]
_XY_TABLE = [r for r in R if r.plane == Plane.XY and r.info.table_relative]


def _graph(nodes: list[GraphNode], edges: list[RelationEdge], table_type: int) -> RelationGraph:
    if any(TABLE_ID in e.operands for e in edges):
        nodes = nodes + [GraphNode(TABLE_ID, table_type)]
    return RelationGraph(tuple(nodes), tuple(edges))


def extract_frontview_graph(
    sketch: "Sketch", cfg: ClassifierConfig, bounds: Box3 | None = None
) -> RelationGraph:
    """Build the front-view relation graph of a normalized sketch.

    Every box is treated as full workspace depth. All x-z relations are
    evaluated on all ordered pairs, table relations against the table, and
    horizontal lines as maximal runs.

    Args:
        sketch: Normalized sketch
        cfg: Classifier thresholds
        bounds: Workspace box (defaults to the standard workspace)

    Returns:
        Graph whose node ids are the sketch box ids
    """
    bounds = bounds or DEFAULT_BOUNDS
    if not sketch.boxes:
        return RelationGraph()

    boxes = {b.id: sketch_box3(b, bounds) for b in sketch.boxes}
    nodes = [GraphNode(b.id, b.type_id) for b in sketch.boxes]

    edges = _pairwise_edges(boxes, _XZ_PAIRWISE, cfg)
    edges += _table_edges(boxes, table_box(sketch.library), _XZ_TABLE, cfg)
    edges += _line_runs(boxes, R.HORIZONTAL_ALIGNED_IN_A_LINE, cfg)

    graph = _graph(nodes, edges, sketch.library.table.id)
    logger.debug("front-view graph: %d nodes, %d edges", len(graph.nodes), len(graph.geom_edges))
    return graph


def extract_scene_graph(scene: Scene, cfg: ClassifierConfig) -> RelationGraph:
    """Build the full relation graph of a 3D scene (all 24 relations)."""
    boxes = {b.id: scene.box(b.id) for b in scene.blocks}
    nodes = [GraphNode(b.id, b.type_id, b.hidden) for b in scene.blocks]
    if not boxes:
        return RelationGraph()

    edges = _pairwise_edges(boxes, _XZ_PAIRWISE + _XY_PAIRWISE, cfg)
    edges += _table_edges(boxes, table_box(scene.library), _XZ_TABLE + _XY_TABLE, cfg)
    edges += _line_runs(boxes, R.HORIZONTAL_ALIGNED_IN_A_LINE, cfg)
    edges += _line_runs(boxes, R.DEPTH_ALIGNED_IN_A_LINE, cfg)
    support = [e for e in edges if e.rel in SUPPORT_RELATIONS]
    edges += _grid_edges(boxes, support, cfg)

    return _graph(nodes, edges, scene.library.table.id)


def resemblance(sketch_graph: RelationGraph, scene: Scene, cfg: ClassifierConfig) -> float:
    """Fraction of the sketch's front-view edges satisfied by the scene's front view.

    Args:
        sketch_graph: Graph extracted from the sketch (node ids = scene block ids)
        scene: Grounded scene
        cfg: Classifier thresholds

    Returns:
        satisfied / total, 1.0 when the graph has no front-view edges

    Raises:
        MappingError: If an edge refers to a block missing from the scene
    """
    edges = [e for e in sketch_graph.geom_edges if e.rel.plane == Plane.XZ]
    if not edges:
        return 1.0

    present = set(scene.ids)
    satisfied = 0
    for edge in edges:
        missing = [o for o in edge.operands if o != TABLE_ID and o not in present]
        if missing:
            raise MappingError(f"Sketch node(s) {missing} have no block in the scene")
        operands = [
            scene.box(o) if o == TABLE_ID else front_view_box(scene.box(o), scene.bounds)
            for o in edge.operands
        ]
        satisfied += eval_geom(edge.rel, operands, cfg)
    return satisfied / len(edges)
