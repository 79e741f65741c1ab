"""Iterative grounding with hidden-support repair.

Each iteration samples poses for the current relation graph, splits the
result into pattern instances and checks every instance and the whole
scene for equilibrium. Unstable instances are repaired by editing their
pattern: a supported-by-fully edge may be relaxed to supported-by-partially,
or hidden blocks of the base type are inserted behind visible bases so the
instance becomes a larger pattern. The loop stops at the first stable
scene or when the iteration budget runs out, returning the best iterate.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any

from sketchstack import config as config_mod
from sketchstack.core import (
    DEFAULT_BOUNDS,
    PEN_TOL,
    BlockLibrary,
    Box3,
    Scene,
    ValidationError,
    Vec3,
    overlap_volume,
)
from sketchstack.diffusion import DenoiserModel
from sketchstack.patterns import (
    Layout,
    PatternInstance,
    PatternType,
    Support,
    attach_patterns,
    decompose,
    eval_pattern,
)
from sketchstack.relations import (
    SUPPORT_RELATIONS,
    ClassifierConfig,
    GraphNode,
    RelationEdge,
    RelationGraph,
    RelationType,
    resemblance,
)
from sketchstack.sampler import SamplerConfig, sample_composed
from sketchstack.stability import StabilityConfig, StabilityReport, check_equilibrium, settle

logger = logging.getLogger(__name__)

R = RelationType
P = PatternType


class RepairExhausted(RuntimeError):
    """Raised when no repair rule applies to an unstable instance."""

    def __init__(self, instance: PatternInstance):
        super().__init__(f"No repair rule applies to {instance}")
        self.instance = instance


class RepairAction(str, Enum):
    RELAX = "relax-relation"
    PROMOTE = "promote-pattern"
    EXTEND = "extend-pattern"


@dataclass(frozen=True)
class RepairRule:
    """Turn an unstable `source` instance into a `target` instance.

    RELAX swaps supported-by-fully for supported-by-partially. PROMOTE and
    EXTEND add one hidden block of the base's type behind `hidden_per`
    visible bases ("one" or "all").
    """

    source: PatternType
    action: RepairAction
    target: PatternType
    hidden_per: str = "one"

    def __str__(self) -> str:
        return f"{self.source.value} -> {self.target.value} ({self.action.value})"


# Minimal change first: relax, then promote, then extend.
RULES: tuple[RepairRule, ...] = (
    RepairRule(P.SINGLE_BLOCK_STACK, RepairAction.RELAX, P.CANTILEVER),
    RepairRule(P.SINGLE_BLOCK_STACK, RepairAction.PROMOTE, P.TWO_PILLAR_BRIDGE),
    RepairRule(P.CANTILEVER, RepairAction.PROMOTE, P.BASIC_ARC),
    RepairRule(P.TWO_PILLAR_BRIDGE, RepairAction.RELAX, P.BASIC_ARC),
    RepairRule(P.TWO_PILLAR_BRIDGE, RepairAction.PROMOTE, P.N_PILLAR_BRIDGE, "all"),
    RepairRule(P.N_PILLAR_BRIDGE, RepairAction.EXTEND, P.N_PILLAR_BRIDGE, "all"),
    RepairRule(P.TWO_BASE_SINGLE, RepairAction.PROMOTE, P.N_BASE_SINGLE, "all"),
    RepairRule(P.N_BASE_SINGLE, RepairAction.EXTEND, P.N_BASE_SINGLE, "all"),
)


@dataclass(frozen=True)
class GroundingConfig:
    max_iters: int = 5
    repair_budget: int = 3
    settle_tol: float = 0.05
    pen_tol: float = PEN_TOL
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    bounds: Box3 = DEFAULT_BOUNDS

    def __post_init__(self):
        if self.max_iters < 0:
            raise config_mod.ConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.repair_budget < 1:
            raise config_mod.ConfigError(f"repair_budget must be >= 1, got {self.repair_budget}")

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "GroundingConfig":
        grounding = config_mod.section(config, "grounding")
        stability = config_mod.section(config, "stability")
        return cls(
            max_iters=int(grounding.get("max_iters", 5)),
            repair_budget=int(grounding.get("repair_budget", 3)),
            settle_tol=float(grounding.get("settle_tol", 0.05)),
            pen_tol=float(stability.get("pen_tol", PEN_TOL)),
            classifier=ClassifierConfig.from_mapping(config_mod.section(config, "classifier")),
            stability=StabilityConfig.from_mapping(stability),
            bounds=config_mod.workspace_bounds(config),
        )


@dataclass(frozen=True)
class GraphDelta:
    """Edits one repair makes to the graph, with starting poses for new blocks."""

    rule: RepairRule
    instance: PatternInstance
    nodes: tuple[GraphNode, ...] = ()
    added: tuple[RelationEdge, ...] = ()
    removed: tuple[RelationEdge, ...] = ()
    placements: dict[int, Vec3] = field(default_factory=dict)

    @property
    def hidden_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule": str(self.rule),
            "instance": str(self.instance),
            "hidden_ids": self.hidden_ids,
            "added": [str(e) for e in self.added],
            "removed": [str(e) for e in self.removed],
        }


def apply_delta(graph: RelationGraph, delta: GraphDelta) -> RelationGraph:
    return graph.without_edges(delta.removed).with_nodes(delta.nodes).with_edges(delta.added)


# Repair rules


def _support_rel(pattern: PatternType) -> RelationType:
    if pattern.descriptor.support == Support.ALL_PARTIALLY:
        return R.SUPPORTED_BY_PARTIALLY
    return R.SUPPORTED_BY_FULLY


def _relax(rule: RepairRule, inst: PatternInstance, graph: RelationGraph) -> GraphDelta | None:
    pairs = [(t, b) for t in inst.top_ids for b in inst.base_ids]
    removed = tuple(
        RelationEdge(R.SUPPORTED_BY_FULLY, p) for p in pairs if graph.has(R.SUPPORTED_BY_FULLY, p)
    )
    if not removed:
        return None
    added = tuple(RelationEdge(R.SUPPORTED_BY_PARTIALLY, e.operands) for e in removed)
    return GraphDelta(rule, inst, added=added, removed=removed)


def _behind(scene: Scene, visible_id: int, dims: Vec3, gap: float) -> Vec3:
    """Pose directly behind a visible block (larger y) at the same height."""
    x, y, z = scene.block(visible_id).centroid
    depth = scene.dims(visible_id)[1]
    return (x, y + depth / 2 + gap + dims[1] / 2, z)


def _clamp_into(pose: Vec3, dims: Vec3, bounds: Box3) -> Vec3 | None:
    """Shift a box centre so the box lies inside `bounds`; None if it cannot fit."""
    out = []
    for c, d, lo, hi in zip(pose, dims, bounds.lo, bounds.hi, strict=True):
        lo, hi = lo + d / 2, hi - d / 2
        if lo > hi:
            return None
        out.append(min(max(c, lo), hi))
    return tuple(out)


def _add_hidden(
    rule: RepairRule,
    inst: PatternInstance,
    graph: RelationGraph,
    scene: Scene,
    cfg: GroundingConfig,
    next_id: int,
) -> GraphDelta | None:
    visible = [b for b in inst.base_ids if not graph.node(b).hidden]
    if len(visible) != len(inst.base_ids):
        # Already extended once.
        return None
    behind_of = visible if rule.hidden_per == "all" else visible[:1]

    compact = rule.target.descriptor.base_layout == Layout.COMPACT
    gap = 0.0 if compact else max(2 * cfg.classifier.eps, cfg.classifier.touch_eps + 0.01)
    support = _support_rel(rule.target)
    library = scene.library

    nodes, added, placements = [], [], {}
    for k, v in enumerate(behind_of):
        h = next_id + k
        type_id = graph.node(v).type_id
        dims = library.get(type_id).dims
        nominal = _behind(scene, v, dims, gap)
        pose = _clamp_into(nominal, dims, scene.bounds)
        if pose is None:
            logger.info("hidden %s does not fit the workspace", library.get(type_id).name)
            return None
        if pose != nominal:
            logger.debug(
                "hidden block behind %d clamped from y=%.3f to %.3f", v, nominal[1], pose[1]
            )
        box = Box3.from_center(pose, dims)
        if any(overlap_volume(box, scene.box(o)) > cfg.pen_tol for o in scene.ids):
            logger.debug("hidden block behind %d collides with the scene", v)
            return None
        nodes.append(GraphNode(h, type_id, hidden=True))
        placements[h] = pose
        side = R.TOUCHING_ALONG_Y if compact else R.NEAR_ALONG_Y
        added += [
            RelationEdge(R.FRONT_OF, (v, h)),
            RelationEdge(R.DEPTH_ALIGNED, (v, h)),
            RelationEdge(side, (v, h)),
        ]
        added += [RelationEdge(support, (t, h)) for t in inst.top_ids]
        # The hidden block stands on whatever carries its visible twin.
        added += [
            RelationEdge(e.rel, (h, e.operands[1]))
            for e in graph.geom_edges
            if e.rel in SUPPORT_RELATIONS and e.operands[0] == v
        ]

    hidden = [n.id for n in nodes]
    bases = list(inst.base_ids) + hidden
    if not compact and len(bases) >= 3:
        added.append(RelationEdge(R.REGULAR_GRID_SPARSE, tuple(bases)))
    return GraphDelta(rule, inst, tuple(nodes), tuple(added), (), placements)


def candidate_deltas(
    instance: PatternInstance,
    scene: Scene,
    graph: RelationGraph,
    rules: tuple[RepairRule, ...] = RULES,
    cfg: GroundingConfig | None = None,
    next_id: int | None = None,
) -> list[GraphDelta]:
    """Every rule delta that applies to `instance`, in rule order.

    A delta applies when its edits leave the instance a valid instance of
    the rule's target pattern.
    """
    cfg = cfg or GroundingConfig()
    if instance.pattern is None:
        return []
    if next_id is None:
        next_id = max(graph.block_ids, default=-1) + 1

    deltas = []
    for rule in rules:
        if rule.source != instance.pattern:
            continue
        if rule.action == RepairAction.RELAX:
            delta = _relax(rule, instance, graph)
        else:
            delta = _add_hidden(rule, instance, graph, scene, cfg, next_id)
        if delta is None:
            continue
        repaired = apply_delta(graph, delta)
        bases = instance.base_ids + tuple(delta.hidden_ids)
        if not eval_pattern(rule.target, bases, instance.top_ids, repaired, scene):
            logger.debug("rule %s leaves %s invalid", rule, instance)
            continue
        deltas.append(delta)
    return deltas


def repair_subgraph(
    instance: PatternInstance,
    sub_scene: Scene,
    report: StabilityReport,
    graph: RelationGraph,
    rules: tuple[RepairRule, ...] = RULES,
    cfg: GroundingConfig | None = None,
    next_id: int | None = None,
) -> GraphDelta:
    """The first applicable repair of an unstable instance.

    Raises:
        ValidationError: If the report says the instance is stable
        RepairExhausted: If no rule applies
    """
    if report.feasible:
        raise ValidationError(f"{instance} is stable; nothing to repair")
    deltas = candidate_deltas(instance, sub_scene, graph, rules, cfg, next_id)
    if not deltas:
        raise RepairExhausted(instance)
    return deltas[0]


# Grounding loop


@dataclass
class IterationRecord:
    iteration: int
    seed: int
    feasible: bool
    surviving_fraction: float
    resemblance: float
    instances: list[dict[str, Any]] = field(default_factory=list)
    applied: list[dict[str, Any]] = field(default_factory=list)
    deferred: list[str] = field(default_factory=list)
    exhausted: list[str] = field(default_factory=list)
    clamped: list[int] = field(default_factory=list)


@dataclass
class GroundingResult:
    graph: RelationGraph
    scene: Scene
    success: bool
    iterations: int
    best_iteration: int
    surviving_fraction: float
    resemblance: float
    trace: list[IterationRecord] = field(default_factory=list)

    @property
    def hidden_ids(self) -> list[int]:
        return [b.id for b in self.scene.blocks if b.hidden]


def trace_to_dict(result: GroundingResult) -> dict[str, Any]:
    return {
        "success": result.success,
        "iterations": result.iterations,
        "best_iteration": result.best_iteration,
        "surviving_fraction": result.surviving_fraction,
        "resemblance": result.resemblance,
        "hidden_ids": result.hidden_ids,
        "graph": result.graph.to_dict(),
        "trace": [asdict(r) for r in result.trace],
    }


def _survival(report: StabilityReport, scene: Scene) -> float:
    if not scene.blocks:
        return 1.0
    return len(report.survivors) / len(scene.blocks)


def _ground_once(
    graph: RelationGraph,
    models: dict[str, DenoiserModel],
    sampler: SamplerConfig,
    library: BlockLibrary,
    cfg: GroundingConfig,
    fixed: dict[int, Vec3] | None = None,
    warm: dict[int, Vec3] | None = None,
) -> tuple[Scene, list[int]]:
    sample = sample_composed(
        graph,
        models,
        sampler,
        library,
        cfg.bounds,
        fixed=fixed,
        warm=warm,
        classifier=cfg.classifier,
    )
    scene = settle(sample.to_scene(graph, library, cfg.bounds), cfg.settle_tol)
    return scene, sample.clamped


def _locally_stable(
    delta: GraphDelta,
    graph: RelationGraph,
    sub_scene: Scene,
    models: dict[str, DenoiserModel],
    sampler: SamplerConfig,
    library: BlockLibrary,
    cfg: GroundingConfig,
) -> bool:
    """Re-ground the repaired instance with everything beneath it held fixed."""
    repaired = attach_patterns(apply_delta(graph, delta))
    keep = set(sub_scene.ids) | set(delta.hidden_ids)
    local = repaired.restricted(keep)
    fixed = {
        b.id: b.centroid for b in sub_scene.blocks if b.id not in delta.instance.block_ids
    }
    warm = {b.id: b.centroid for b in sub_scene.blocks} | delta.placements
    scene, _ = _ground_once(local, models, sampler, library, cfg, fixed, warm)
    return check_equilibrium(scene, cfg.stability).feasible


def _lowest_z(inst: PatternInstance, scene: Scene) -> float:
    return min(scene.box(b).bottom for b in inst.base_ids)


def _plan_repairs(
    graph: RelationGraph,
    scene: Scene,
    unstable: list[tuple[PatternInstance, Scene]],
    models: dict[str, DenoiserModel],
    sampler: SamplerConfig,
    library: BlockLibrary,
    cfg: GroundingConfig,
    record: IterationRecord,
) -> list[GraphDelta]:
    """Choose one delta per unstable instance and drop conflicting ones."""
    next_id = max(graph.block_ids, default=-1) + 1
    chosen: list[GraphDelta] = []
    for inst, sub in sorted(unstable, key=lambda item: (_lowest_z(item[0], scene), item[0].key)):
        options = candidate_deltas(inst, scene, graph, RULES, cfg, next_id)[: cfg.repair_budget]
        if not options:
            logger.info("no repair applies to %s", inst)
            record.exhausted.append(str(inst))
            continue
        pick = options[0]
        for k, delta in enumerate(options):
            trial = replace(sampler, seed=sampler.seed + 7919 * (k + 1))
            if _locally_stable(delta, graph, sub, models, trial, library, cfg):
                pick = delta
                break
        chosen.append(pick)
        next_id += len(pick.hidden_ids)

    # Overlapping hidden blocks: the lower instance keeps its repair.
    kept: list[GraphDelta] = []
    taken: list[Box3] = []
    for delta in chosen:
        boxes = [
            Box3.from_center(delta.placements[n.id], library.get(n.type_id).dims)
            for n in delta.nodes
        ]
        if any(overlap_volume(a, b) > cfg.pen_tol for a in boxes for b in taken):
            record.deferred.append(str(delta.instance))
            continue
        kept.append(delta)
        taken.extend(boxes)
    return kept


def _iterate(
    sketch_graph: RelationGraph,
    models: dict[str, DenoiserModel],
    cfg: GroundingConfig,
    sampler: SamplerConfig,
    library: BlockLibrary,
    repair: bool,
) -> GroundingResult:
    if not sketch_graph.block_ids:
        empty = Scene(library, (), cfg.bounds)
        return GroundingResult(sketch_graph, empty, True, 0, 0, 1.0, 1.0)

    graph = attach_patterns(sketch_graph)
    trace: list[IterationRecord] = []
    best: tuple[tuple[float, float], int, RelationGraph, Scene] | None = None
    warm: dict[int, Vec3] | None = None
    success = False

    for it in range(cfg.max_iters + 1):
        step = replace(sampler, seed=sampler.seed + it)
        scene, clamped = _ground_once(graph, models, step, library, cfg, warm=warm)
        report = check_equilibrium(scene, cfg.stability)
        fraction = _survival(report, scene)
        score = resemblance(sketch_graph, scene, cfg.classifier)

        parts = [
            (inst, sub, check_equilibrium(sub, cfg.stability))
            for inst, sub in decompose(graph, scene)
        ]
        record = IterationRecord(
            it,
            step.seed,
            report.feasible,
            fraction,
            score,
            instances=[
                {
                    "pattern": inst.name,
                    "base_ids": list(inst.base_ids),
                    "top_ids": list(inst.top_ids),
                    "feasible": rep.feasible,
                }
                for inst, _, rep in parts
            ],
            clamped=clamped,
        )
        trace.append(record)
        logger.info(
            "iteration %d: feasible=%s survive=%.3f resemblance=%.3f",
            it,
            report.feasible,
            fraction,
            score,
        )

        if report.feasible and all(rep.feasible for _, _, rep in parts):
            best = ((fraction, score), it, graph, scene)
            success = True
            break
        if best is None or (fraction, score) > best[0]:
            best = ((fraction, score), it, graph, scene)
        if it == cfg.max_iters:
            break

        if repair:
            unstable = [(inst, sub) for inst, sub, rep in parts if not rep.feasible]
            deltas = _plan_repairs(graph, scene, unstable, models, step, library, cfg, record)
            for delta in deltas:
                graph = apply_delta(graph, delta)
                record.applied.append(delta.to_dict())
            if deltas:
                graph = attach_patterns(graph)
            warm = {b.id: b.centroid for b in scene.blocks}
            for delta in deltas:
                warm.update(delta.placements)
        else:
            warm = {b.id: b.centroid for b in scene.blocks}

    (fraction, score), best_it, best_graph, best_scene = best
    return GroundingResult(
        best_graph, best_scene, success, len(trace), best_it, fraction, score, trace
    )


def ground_iterate(
    sketch_graph: RelationGraph,
    models: dict[str, DenoiserModel],
    cfg: GroundingConfig,
    sampler: SamplerConfig,
    library: BlockLibrary,
) -> GroundingResult:
    """Ground a sketch graph, inserting hidden supports until the scene stands.

    Args:
        sketch_graph: Front-view graph of the sketch (node ids = block ids)
        models: Trained models keyed by relation or pattern name
        cfg: Iteration budget, repair budget and physics settings
        sampler: Sampler settings; iteration t uses seed sampler.seed + t
        library: Block library

    Returns:
        The first stable iterate, or the best one by (surviving fraction,
        resemblance) when the budget runs out

    Raises:
        ModelMissing: If the graph (or a repair) needs an untrained relation
    """
    return _iterate(sketch_graph, models, cfg, sampler, library, repair=True)


def ablation_iterate(
    sketch_graph: RelationGraph,
    models: dict[str, DenoiserModel],
    cfg: GroundingConfig,
    sampler: SamplerConfig,
    library: BlockLibrary,
) -> GroundingResult:
    """Same loop as ground_iterate, but unstable iterates are only re-sampled."""
    return _iterate(sketch_graph, models, cfg, sampler, library, repair=False)
