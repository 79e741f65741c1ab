"""Stability patterns: two-tier support templates and their matching.

A pattern is described by four descriptors: admissible tier counts, the
supported-by edges required between the tiers, and a layout template for
each tier. Matching walks every connected supported-by component of a
relation graph and tags it with the most specific pattern it satisfies.
"""

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any

import networkx as nx

from sketchstack.core import TABLE_ID, Scene, ValidationError
from sketchstack.relations import (
    GRID_RELATIONS,
    TOUCHING_RELATIONS,
    MappingError,
    RelationGraph,
    RelationType,
    support_components,
)

logger = logging.getLogger(__name__)

R = RelationType


class PatternType(str, Enum):
    SINGLE_BLOCK_STACK = "single-block-stack"
    CANTILEVER = "cantilever-with-counterbalance"
    TWO_PILLAR_BRIDGE = "two-pillar-single-top-bridge"
    N_PILLAR_BRIDGE = "n-pillar-single-top-bridge"
    SINGLE_BASE_N_PILLAR = "single-base-n-pillar-bridge"
    TWO_BASE_SINGLE = "two-base-single-overhead-pyramid"
    N_BASE_SINGLE = "n-base-single-overhead-pyramid"
    SINGLE_BASE_N_OVERHEAD = "single-base-n-overhead-pyramid"
    N_BASE_M_OVERHEAD = "n-base-m-overhead-pyramid"
    BASIC_ARC = "basic-arc"

    @property
    def descriptor(self) -> "PatternDescriptor":
        return PATTERNS[self]


class Support(str, Enum):
    """Required supported-by edges between the tiers."""

    ALL_FULLY = "all-fully"
    ALL_PARTIALLY = "all-partially"
    ANY = "any"


class Layout(str, Enum):
    """Required geometric layout within one tier."""

    NONE = "none"
    SEPARATED = "separated"
    SPARSE = "sparse"
    COMPACT = "compact"


@dataclass(frozen=True)
class PatternDescriptor:
    """Admissible counts plus the support and per-tier layout templates.

    Counts are inclusive (min, max) ranges; max None means unbounded.
    """

    n_base: tuple[int, int | None]
    n_top: tuple[int, int | None]
    support: Support
    base_layout: Layout = Layout.NONE
    top_layout: Layout = Layout.NONE
    com_inside_base: bool = False

    def admits(self, n_base: int, n_top: int) -> bool:
        return _in_range(n_base, self.n_base) and _in_range(n_top, self.n_top)


def _in_range(n: int, bounds: tuple[int, int | None]) -> bool:
    lo, hi = bounds
    return n >= lo and (hi is None or n <= hi)


P = PatternType

PATTERNS: dict[PatternType, PatternDescriptor] = {
    P.SINGLE_BLOCK_STACK: PatternDescriptor((1, 1), (1, 1), Support.ALL_FULLY),
    P.CANTILEVER: PatternDescriptor(
        (1, 1), (1, 1), Support.ALL_PARTIALLY, com_inside_base=True
    ),
    P.TWO_PILLAR_BRIDGE: PatternDescriptor((2, 2), (1, 1), Support.ALL_FULLY, Layout.SPARSE),
    P.N_PILLAR_BRIDGE: PatternDescriptor((3, None), (1, 1), Support.ALL_FULLY, Layout.SPARSE),
    P.SINGLE_BASE_N_PILLAR: PatternDescriptor(
        (1, 1), (2, None), Support.ALL_FULLY, top_layout=Layout.SPARSE
    ),
    P.TWO_BASE_SINGLE: PatternDescriptor((2, 2), (1, 1), Support.ALL_FULLY, Layout.COMPACT),
    P.N_BASE_SINGLE: PatternDescriptor((3, None), (1, 1), Support.ALL_FULLY, Layout.COMPACT),
    P.SINGLE_BASE_N_OVERHEAD: PatternDescriptor(
        (1, 1), (2, None), Support.ALL_FULLY, top_layout=Layout.COMPACT
    ),
    P.N_BASE_M_OVERHEAD: PatternDescriptor(
        (2, None), (2, None), Support.ANY, Layout.COMPACT, Layout.COMPACT
    ),
    P.BASIC_ARC: PatternDescriptor((2, 2), (1, 1), Support.ALL_PARTIALLY, Layout.SEPARATED),
}

# Most constrained first; the first match wins.
SPECIFICITY: tuple[PatternType, ...] = (
    P.N_BASE_M_OVERHEAD,
    P.N_BASE_SINGLE,
    P.SINGLE_BASE_N_OVERHEAD,
    P.SINGLE_BASE_N_PILLAR,
    P.TWO_BASE_SINGLE,
    P.N_PILLAR_BRIDGE,
    P.TWO_PILLAR_BRIDGE,
    P.BASIC_ARC,
    P.CANTILEVER,
    P.SINGLE_BLOCK_STACK,
)


@dataclass(frozen=True)
class PatternInstance:
    """A pattern bound to concrete base and top blocks.

    `pattern` is None for a support component that matched no pattern.
    """

    pattern: PatternType | None
    base_ids: tuple[int, ...]
    top_ids: tuple[int, ...]

    def __post_init__(self):
        pattern = PatternType(self.pattern) if self.pattern is not None else None
        base = tuple(sorted(int(i) for i in self.base_ids))
        top = tuple(sorted(int(i) for i in self.top_ids))
        if not base or not top:
            raise ValidationError("Pattern instance needs at least one base and one top block")
        if set(base) & set(top):
            raise ValidationError(f"Pattern tiers overlap: base {base}, top {top}")
        if pattern is not None and not pattern.descriptor.admits(len(base), len(top)):
            raise ValidationError(
                f"{pattern.value} does not admit {len(base)} base and {len(top)} top blocks"
            )
        object.__setattr__(self, "pattern", pattern)
        object.__setattr__(self, "base_ids", base)
        object.__setattr__(self, "top_ids", top)

    @property
    def matched(self) -> bool:
        return self.pattern is not None

    @property
    def name(self) -> str:
        return self.pattern.value if self.pattern is not None else "unmatched"

    @property
    def block_ids(self) -> tuple[int, ...]:
        return self.base_ids + self.top_ids

    @property
    def key(self) -> tuple[str, tuple[int, ...], tuple[int, ...]]:
        return (self.name, self.base_ids, self.top_ids)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pattern": self.name,
            "base_ids": list(self.base_ids),
            "top_ids": list(self.top_ids),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PatternInstance":
        name = data["pattern"]
        pattern = None if name == "unmatched" else PatternType(name)
        return cls(pattern, tuple(data["base_ids"]), tuple(data["top_ids"]))

    def __str__(self) -> str:
        return f"{self.name}(base={list(self.base_ids)}, top={list(self.top_ids)})"


# Tier templates


def _touching(graph: RelationGraph, a: int, b: int) -> bool:
    return any(graph.has(rel, (a, b)) or graph.has(rel, (b, a)) for rel in TOUCHING_RELATIONS)


def _aligned(graph: RelationGraph, a: int, b: int) -> bool:
    return graph.has(R.HORIZONTAL_ALIGNED, (a, b)) or graph.has(R.DEPTH_ALIGNED, (a, b))


def _covered_by(graph: RelationGraph, rels: Iterable[RelationType], ids: Sequence[int]) -> bool:
    """True if some edge of `rels` spans every block in `ids`."""
    wanted = set(ids)
    return any(wanted <= set(e.operands) for rel in rels for e in graph.edges_of(rel))


def _pairs(ids: Sequence[int]) -> list[tuple[int, int]]:
    return [(a, b) for i, a in enumerate(ids) for b in ids[i + 1 :]]


def _separated(graph: RelationGraph, ids: Sequence[int]) -> bool:
    return not any(_touching(graph, a, b) for a, b in _pairs(ids))


def _sparse(graph: RelationGraph, ids: Sequence[int]) -> bool:
    """Separated and regularly arranged.

    A front view never reveals a grid, so an aligned line or pairwise
    alignment stands in for regular-grid-sparse.
    """
    if not _separated(graph, ids):
        return False
    if _covered_by(graph, (R.REGULAR_GRID_SPARSE,), ids):
        return True
    if len(ids) >= 3 and _covered_by(
        graph, (R.HORIZONTAL_ALIGNED_IN_A_LINE, R.DEPTH_ALIGNED_IN_A_LINE), ids
    ):
        return True
    return all(_aligned(graph, a, b) for a, b in _pairs(ids))


def _compact(graph: RelationGraph, ids: Sequence[int]) -> bool:
    """Regular-grid-compact, or connected through touching edges."""
    if _covered_by(graph, (R.REGULAR_GRID_COMPACT, R.RANDOM_SPLIT_GRID_COMPACT), ids):
        return True
    g = nx.Graph()
    g.add_nodes_from(ids)
    g.add_edges_from((a, b) for a, b in _pairs(ids) if _touching(graph, a, b))
    return nx.is_connected(g)


_LAYOUTS = {
    Layout.NONE: lambda graph, ids: True,
    Layout.SEPARATED: _separated,
    Layout.SPARSE: _sparse,
    Layout.COMPACT: _compact,
}


def layout_holds(layout: Layout, graph: RelationGraph, ids: Sequence[int]) -> bool:
    """Check one tier template against the graph's edges among `ids`."""
    return _LAYOUTS[Layout(layout)](graph, sorted(ids))


def _support_ok(
    graph: RelationGraph, support: Support, base_ids: Sequence[int], top_ids: Sequence[int]
) -> bool:
    fully = {(t, b) for t in top_ids for b in base_ids if graph.has(R.SUPPORTED_BY_FULLY, (t, b))}
    partially = {
        (t, b) for t in top_ids for b in base_ids if graph.has(R.SUPPORTED_BY_PARTIALLY, (t, b))
    }
    every = {(t, b) for t in top_ids for b in base_ids}
    if support == Support.ALL_FULLY:
        return fully == every
    if support == Support.ALL_PARTIALLY:
        return partially == every
    linked = fully | partially
    return all(any((t, b) in linked for b in base_ids) for t in top_ids) and all(
        any((t, b) in linked for t in top_ids) for b in base_ids
    )


def _com_inside(scene: Scene, base_ids: Sequence[int], top_ids: Sequence[int]) -> bool:
    base = scene.box(base_ids[0])
    for t in top_ids:
        x, y, _ = scene.block(t).centroid
        if not (base.left < x < base.right and base.front < y < base.back):
            return False
    return True


def eval_pattern(
    pattern: PatternType,
    base_ids: Sequence[int],
    top_ids: Sequence[int],
    geom_graph: RelationGraph,
    scene: Scene | None = None,
) -> bool:
    """Check whether two tiers form an instance of `pattern`.

    Args:
        pattern: Pattern to test
        base_ids: Base-tier block ids (order irrelevant)
        top_ids: Top-tier block ids (order irrelevant)
        geom_graph: Graph holding the geometric edges among the blocks
        scene: Poses, needed only for the cantilever center-of-mass check

    Returns:
        True if counts, supported-by edges and both tier layouts match

    Raises:
        MappingError: If an id is not a node of the graph
    """
    known = set(geom_graph.node_ids)
    missing = [i for i in (*base_ids, *top_ids) if i not in known]
    if missing:
        raise MappingError(f"Pattern operands {missing} are not graph nodes")

    base = sorted(base_ids)
    top = sorted(top_ids)
    if TABLE_ID in base or TABLE_ID in top or set(base) & set(top):
        return False

    desc = PATTERNS[PatternType(pattern)]
    if not desc.admits(len(base), len(top)):
        return False
    if not _support_ok(geom_graph, desc.support, base, top):
        return False
    if not (
        _LAYOUTS[desc.base_layout](geom_graph, base)
        and _LAYOUTS[desc.top_layout](geom_graph, top)
    ):
        return False
    if desc.com_inside_base and scene is not None:
        return _com_inside(scene, base, top)
    return True


def match_patterns(graph: RelationGraph, scene: Scene | None = None) -> list[PatternInstance]:
    """Tag every supported-by component with its most specific pattern.

    Components that match nothing come back as unmatched instances, so
    callers can still check them. A block may appear in several instances
    when it is the top of one tier boundary and the base of the next.
    """
    instances = []
    for bases, tops in support_components(graph.geom_edges):
        found = next(
            (p for p in SPECIFICITY if eval_pattern(p, bases, tops, graph, scene)), None
        )
        instances.append(PatternInstance(found, tuple(bases), tuple(tops)))
        if found is None:
            logger.debug("unmatched support component: base=%s top=%s", bases, tops)
    return sorted(instances, key=lambda i: (i.base_ids, i.top_ids))


def attach_patterns(graph: RelationGraph, scene: Scene | None = None) -> RelationGraph:
    """Return `graph` with its stability edges set to the matched patterns."""
    return graph.with_patterns(i for i in match_patterns(graph, scene) if i.matched)


def support_closure(graph: RelationGraph, block_ids: Iterable[int]) -> set[int]:
    """`block_ids` plus every block transitively beneath them."""
    below = nx.DiGraph()
    for rel in (R.SUPPORTED_BY_FULLY, R.SUPPORTED_BY_PARTIALLY):
        for e in graph.edges_of(rel):
            top, base = e.operands
            if base != TABLE_ID:
                below.add_edge(top, base)

    closure = set(block_ids)
    for b in list(closure):
        if b in below:
            closure |= nx.descendants(below, b)
    return closure


def decompose(graph: RelationGraph, scene: Scene) -> list[tuple[PatternInstance, Scene]]:
    """Split a grounded graph into pattern instances with supports-closed sub-scenes.

    Each sub-scene holds the instance's blocks plus everything beneath its
    base tier, so its stability can be checked on its own.

    Raises:
        MappingError: If a graph block has no pose in the scene
    """
    present = set(scene.ids)
    missing = [i for i in graph.block_ids if i not in present]
    if missing:
        raise MappingError(f"Graph blocks {missing} have no pose in the scene")

    parts = []
    for inst in match_patterns(graph, scene):
        ids = support_closure(graph, inst.block_ids)
        parts.append((inst, scene.subset(ids)))
    return parts
