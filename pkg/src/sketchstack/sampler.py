"""Compositional pose sampling over a relation graph.

Every edge of the graph contributes the noise prediction of its relation's
model on the edge's operand slots. The contributions are scattered onto a
shared pose vector and the combined score drives annealed Langevin steps
down the noise schedule, which samples from the product of the per-relation
distributions.
"""

import logging
import math
from collections import defaultdict
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from sketchstack.config import ConfigError
from sketchstack.core import (
    DEFAULT_BOUNDS,
    TABLE_ID,
    BlockInstance,
    BlockLibrary,
    Box3,
    Scene,
    ValidationError,
    Vec3,
    denormalize_xyz,
    normalize_xyz,
    table_box,
)
from sketchstack.diffusion import DenoiserModel, NoiseSchedule, forward_noise
from sketchstack.relations import ArityError, ClassifierConfig, RelationGraph, eval_geom

logger = logging.getLogger(__name__)

NOISE_MODES = ("diffusion", "ula")
REDUCTIONS = ("sum", "mean")


class ModelMissing(ValidationError):
    """Raised when a graph edge has no trained model."""

    def __init__(self, relation: str):
        super().__init__(f"No trained model for '{relation}'")
        self.relation = relation


@dataclass(frozen=True)
class SamplerConfig:
    sched: NoiseSchedule
    M: int = 5
    weights: Mapping[str, float] = field(default_factory=dict)
    noise_mode: str = "diffusion"
    reduction: str = "sum"
    include_patterns: bool = True
    warm_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError(f"Sampler needs M >= 1 inner iterations, got {self.M}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"Unknown noise mode '{self.noise_mode}'")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"Unknown score reduction '{self.reduction}'")
        for name, w in self.weights.items():
            if not (math.isfinite(w) and w > 0):
                raise ConfigError(f"Edge weight for '{name}' must be finite and positive")

    def weight(self, name: str) -> float:
        return float(self.weights.get(name, 1.0))

    @classmethod
    def from_config(
        cls, sampler: dict[str, Any], sched: NoiseSchedule, seed: int
    ) -> "SamplerConfig":
        return cls(
            sched=sched,
            M=int(sampler.get("M", 5)),
            weights=dict(sampler.get("weights") or {}),
            noise_mode=str(sampler.get("noise_mode", "diffusion")).lower(),
            reduction=str(sampler.get("reduction", "sum")).lower(),
            include_patterns=bool(sampler.get("include_patterns", True)),
            warm_start=bool(sampler.get("warm_start", False)),
            seed=int(seed),
        )


@dataclass(frozen=True)
class SlotLayout:
    """Row order of the shared pose vector and each row's normalized geometry."""

    ids: tuple[int, ...]
    geometry: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_graph(cls, graph: RelationGraph, library: BlockLibrary) -> "SlotLayout":
        ids = tuple(graph.node_ids)
        dims = [library.get(graph.node(i).type_id).dims for i in ids]
        return cls(ids, normalize_xyz(np.asarray(dims).reshape(-1, 3)))

    def index(self, block_id: int) -> int:
        return self.ids.index(block_id)


@dataclass(frozen=True)
class _Term:
    name: str
    slots: tuple[int, ...]
    roles: tuple[float, ...] | None = None


def _terms(graph: RelationGraph, layout: SlotLayout, include_patterns: bool) -> list[_Term]:
    terms = [
        _Term(e.rel.value, tuple(layout.index(o) for o in e.operands)) for e in graph.geom_edges
    ]
    if include_patterns:
        for inst in graph.stab_edges:
            if inst.matched:
                ids = inst.base_ids + inst.top_ids
                roles = (0.0,) * len(inst.base_ids) + (1.0,) * len(inst.top_ids)
                terms.append(_Term(inst.name, tuple(layout.index(i) for i in ids), roles))
    return terms


def _term_outputs(
    models: Mapping[str, DenoiserModel],
    terms: list[_Term],
    layout: SlotLayout,
    poses_t: np.ndarray,
    t: int,
) -> list[tuple[_Term, np.ndarray]]:
    """Evaluate every term, batching the terms that share a model."""
    groups: dict[str, list[_Term]] = defaultdict(list)
    for term in terms:
        groups[term.name].append(term)

    outputs = []
    for name in sorted(groups):
        model = models.get(name)
        if model is None:
            raise ModelMissing(name)
        batch = groups[name]
        width = model.arch.slots if model.variadic else len(batch[0].slots)
        dg = model.arch.geom_dim
        P = np.zeros((len(batch), width, 3))
        G = np.zeros((len(batch), width, dg))
        mask = np.zeros((len(batch), width), dtype=bool)
        for b, term in enumerate(batch):
            k = len(term.slots)
            if k > width:
                raise ArityError(f"{name} model takes at most {width} operands, got {k}")
            idx = list(term.slots)
            P[b, :k] = poses_t[idx]
            G[b, :k, :3] = layout.geometry[idx]
            if dg > 3 and term.roles is not None:
                G[b, :k, 3] = term.roles
            mask[b, :k] = True
        out = model.forward(P, G, np.full(len(batch), float(t)), mask)
        outputs.extend((term, out[b, : len(term.slots)]) for b, term in enumerate(batch))
    return outputs


def composite_score(
    models: Mapping[str, DenoiserModel],
    graph: RelationGraph,
    poses_t: np.ndarray,
    t: int,
    layout: SlotLayout | None = None,
    weights: Mapping[str, float] | None = None,
    include_patterns: bool = True,
    library: BlockLibrary | None = None,
) -> np.ndarray:
    """Weighted sum of per-edge noise predictions on the shared pose vector.

    Args:
        models: Trained models keyed by relation or pattern name
        graph: Relation graph whose edges are scored
        poses_t: Poses (N, 3) in model units, rows in layout order
        t: Noise level
        layout: Row order and geometry (built from `library` when omitted)
        weights: Per-relation weights, default 1.0
        include_patterns: Also score stability-pattern edges
        library: Block library, needed only when `layout` is omitted

    Returns:
        Score (N, 3); rows of blocks in no edge are zero

    Raises:
        ModelMissing: If some edge's relation has no model
    """
    if layout is None:
        if library is None:
            raise ValidationError("composite_score needs a slot layout or a block library")
        layout = SlotLayout.from_graph(graph, library)
    weights = weights or {}
    score = np.zeros_like(np.asarray(poses_t, dtype=np.float64))
    terms = _terms(graph, layout, include_patterns)
    for term, out in _term_outputs(models, terms, layout, poses_t, t):
        np.add.at(score, list(term.slots), weights.get(term.name, 1.0) * out)
    return score


def ula_step(
    poses_t: np.ndarray, score: np.ndarray, t: int, cfg: SamplerConfig, rng: np.random.Generator
) -> np.ndarray:
    """One Langevin step at level t: p - A_t * score + B_t * noise."""
    beta = cfg.sched.beta[t]
    A = beta / math.sqrt(1.0 - cfg.sched.alpha_bar[t])
    B = math.sqrt(beta)
    if cfg.noise_mode == "ula":
        B *= math.sqrt(2.0)
    return poses_t - A * score + B * rng.standard_normal(np.shape(poses_t))


@dataclass
class SampleResult:
    poses: dict[int, Vec3]
    clamped: list[int]
    edge_pass: dict[str, bool] = field(default_factory=dict)
    energy: list[float] = field(default_factory=list)

    def to_scene(
        self, graph: RelationGraph, library: BlockLibrary, bounds: Box3 = DEFAULT_BOUNDS
    ) -> Scene:
        blocks = [
            BlockInstance(n.id, n.type_id, self.poses[n.id], n.hidden)
            for n in graph.nodes
            if n.id != TABLE_ID
        ]
        return Scene(library, tuple(blocks), bounds)

    def diagnostics(self) -> dict[str, Any]:
        return {"clamped": self.clamped, "edge_pass": self.edge_pass, "energy": self.energy}


def _clamp(
    poses: np.ndarray, layout: SlotLayout, library_dims: np.ndarray, bounds: Box3
) -> tuple[np.ndarray, list[int]]:
    lo = np.asarray(bounds.lo) + library_dims / 2
    hi = np.asarray(bounds.hi) - library_dims / 2
    mid = (lo + hi) / 2
    lo, hi = np.minimum(lo, mid), np.maximum(hi, mid)
    clipped = np.clip(poses, lo, hi)
    moved = [
        layout.ids[i]
        for i in range(len(layout.ids))
        if layout.ids[i] != TABLE_ID and not np.allclose(clipped[i], poses[i], atol=1e-12)
    ]
    return clipped, moved


def _edge_pass(
    graph: RelationGraph,
    poses: dict[int, Vec3],
    library: BlockLibrary,
    classifier: ClassifierConfig,
) -> dict[str, bool]:
    scene_boxes = {}
    for n in graph.nodes:
        dims = library.get(n.type_id).dims
        scene_boxes[n.id] = Box3.from_center(poses[n.id], dims)
    return {
        str(e): eval_geom(e.rel, [scene_boxes[o] for o in e.operands], classifier)
        for e in graph.geom_edges
    }


def sample_composed(
    graph: RelationGraph,
    models: Mapping[str, DenoiserModel],
    cfg: SamplerConfig,
    library: BlockLibrary,
    bounds: Box3 = DEFAULT_BOUNDS,
    fixed: Mapping[int, Vec3] | None = None,
    warm: Mapping[int, Vec3] | None = None,
    classifier: ClassifierConfig | None = None,
) -> SampleResult:
    """Sample poses for every graph node from the product of its edge models.

    Starting from standard normal poses, each noise level t = T..1 runs M
    Langevin steps at t and then one ancestral transition to t - 1. The table
    and any `fixed` blocks are held at their known poses, re-noised to the
    current level before each model call.

    Args:
        graph: Relation graph to ground
        models: Trained models keyed by relation or pattern name
        cfg: Sampler settings
        library: Block library giving node geometry
        bounds: Workspace; final poses are clamped into it
        fixed: Scene-unit poses of blocks that must not move
        warm: Scene-unit starting poses used when cfg.warm_start is set
        classifier: Thresholds for the per-edge pass diagnostics

    Returns:
        Poses in scene units, clamped ids and diagnostics

    Raises:
        ModelMissing: If some edge's relation has no model
        ValidationError: If the graph is empty
        ConfigError: If a model was trained with another schedule
    """
    if not graph.nodes:
        raise ValidationError("Cannot ground an empty relation graph")
    sched = cfg.sched
    for name, model in models.items():
        if model.arch.steps_T != sched.T:
            raise ConfigError(
                f"Model '{name}' uses {model.arch.steps_T} steps but the sampler uses {sched.T}"
            )

    rng = np.random.default_rng(cfg.seed)
    layout = SlotLayout.from_graph(graph, library)
    dims = np.asarray([library.get(graph.node(i).type_id).dims for i in layout.ids])
    terms = _terms(graph, layout, cfg.include_patterns)

    held = dict(fixed or {})
    if TABLE_ID in layout.ids:
        held[TABLE_ID] = table_box(library).center
    held_rows = [layout.index(i) for i in held if i in layout.ids]
    held_poses = normalize_xyz([held[layout.ids[r]] for r in held_rows]).reshape(-1, 3)

    counts = np.zeros(len(layout.ids))
    for term in terms:
        np.add.at(counts, list(term.slots), 1.0)
    counts = np.maximum(counts, 1.0)[:, None]

    def pin(p: np.ndarray, level: int) -> np.ndarray:
        if held_rows:
            noise = rng.standard_normal(held_poses.shape)
            p[held_rows] = forward_noise(held_poses, level, noise, sched) if level else held_poses
        return p

    def score_at(p: np.ndarray, level: int) -> np.ndarray:
        score = np.zeros_like(p)
        energy = 0.0
        for term, out in _term_outputs(models, terms, layout, p, level):
            contribution = cfg.weight(term.name) * out
            np.add.at(score, list(term.slots), contribution)
            energy += float(np.linalg.norm(out))
        trace.append(energy)
        if cfg.reduction == "mean":
            score = score / counts
        return score

    trace: list[float] = []
    start = sched.T
    p = rng.standard_normal((len(layout.ids), 3))
    if cfg.warm_start and warm:
        start = max(sched.T // 2, 1)
        rows = [layout.index(i) for i in warm if i in layout.ids]
        init = normalize_xyz([warm[layout.ids[r]] for r in rows]).reshape(-1, 3)
        p[rows] = forward_noise(init, start, rng.standard_normal(init.shape), sched)

    for t in range(start, 0, -1):
        for _ in range(cfg.M):
            p = pin(p, t)
            p = ula_step(p, score_at(p, t), t, cfg, rng)
        p = pin(p, t)
        beta = sched.beta[t]
        ab = sched.alpha_bar[t]
        p = (p - beta / math.sqrt(1.0 - ab) * score_at(p, t)) / math.sqrt(1.0 - beta)
        if t > 1:
            var = beta * (1.0 - sched.alpha_bar[t - 1]) / (1.0 - ab)
            p = p + math.sqrt(var) * rng.standard_normal(p.shape)
    p = pin(p, 0)

    final, clamped = _clamp(denormalize_xyz(p), layout, dims, bounds)
    for r, i in enumerate(layout.ids):
        if i in held:
            final[r] = held[i]
    poses = {i: tuple(float(v) for v in final[r]) for r, i in enumerate(layout.ids)}
    if clamped:
        logger.info("clamped %d block(s) into the workspace: %s", len(clamped), clamped)

    result = SampleResult(poses, [c for c in clamped if c not in held], energy=trace)
    result.edge_pass = _edge_pass(graph, poses, library, classifier or ClassifierConfig())
    return result
