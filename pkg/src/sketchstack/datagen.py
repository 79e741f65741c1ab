"""Synthetic structures, per-relation training sets and front-view renders.

Structures are built by chaining stability patterns: the top tier of one
pattern becomes the base tier of the next, so every generated scene
decomposes back into exactly the instances that produced it. Each pattern
is drawn by rejection sampling with pattern-specific pose priors and kept
only when the classifiers recognise it and the whole scene is in static
equilibrium.
"""

import json
import logging
import struct
from collections import Counter
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image
from scipy import ndimage

from sketchstack import config as config_mod
from sketchstack import utils
from sketchstack.core import (
    DEFAULT_BOUNDS,
    PEN_TOL,
    BlockInstance,
    BlockLibrary,
    BlockType,
    Box3,
    Scene,
    ValidationError,
    aabb,
    normalize_xyz,
    validate_scene,
)
from sketchstack.diffusion import DenoiserData, ShapeError
from sketchstack.patterns import (
    PatternInstance,
    PatternType,
    eval_pattern,
    layout_holds,
    match_patterns,
)
from sketchstack.relations import (
    ClassifierConfig,
    RelationType,
    eval_geom,
    extract_scene_graph,
)
from sketchstack.sketchio import Sketch, SketchBox, SketchConfig, SketchSource, find_regions
from sketchstack.stability import StabilityConfig, check_equilibrium

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"SKDS"
DATASET_FORMAT = "1.0"

# Clear space between bridge pillars, as a fraction of the lintel width.
GAP_RANGE = (0.3, 1.2)
# Smallest clear gap between blocks that must not touch.
MIN_GAP = 0.05
# Keeps sampled centers of mass off the edge of their support.
COM_SLACK = 0.03

P = PatternType
_SINGLE_BASE = (
    P.SINGLE_BLOCK_STACK,
    P.CANTILEVER,
    P.SINGLE_BASE_N_PILLAR,
    P.SINGLE_BASE_N_OVERHEAD,
)
_SEPARATED_BASE = (P.TWO_PILLAR_BRIDGE, P.N_PILLAR_BRIDGE, P.BASIC_ARC)


class GenerationExhausted(RuntimeError):
    """Raised when rejection sampling finds no valid structure in its budget."""

    def __init__(self, what: str, attempts: int):
        super().__init__(f"Could not sample '{what}' within {attempts} attempts")
        self.what = what
        self.attempts = attempts


@dataclass(frozen=True)
class GenConfig:
    max_attempts: int = 200
    max_restarts: int = 20
    pen_tol: float = PEN_TOL
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    bounds: Box3 = DEFAULT_BOUNDS

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "GenConfig":
        datagen = config_mod.section(config, "datagen")
        stability = config_mod.section(config, "stability")
        return cls(
            max_attempts=int(datagen.get("max_attempts", 200)),
            max_restarts=int(datagen.get("max_restarts", 20)),
            pen_tol=float(stability.get("pen_tol", PEN_TOL)),
            classifier=ClassifierConfig.from_mapping(config_mod.section(config, "classifier")),
            stability=StabilityConfig.from_mapping(stability),
            bounds=config_mod.workspace_bounds(config),
        )


@dataclass(frozen=True)
class Tier:
    """A placed tier of blocks that the next pattern uses as its base."""

    scene: Scene
    ids: tuple[int, ...]


@dataclass(frozen=True)
class Structure:
    scene: Scene
    instances: tuple[PatternInstance, ...]
    seed: int | None = None
    levels: int = 1


# Pose priors


def _pick(rng: np.random.Generator, types: Sequence[BlockType]) -> BlockType:
    return types[int(rng.integers(len(types)))]


def _place(block_id: int, t: BlockType, x: float, y: float, bottom: float) -> BlockInstance:
    return BlockInstance(block_id, t.id, (x, y, bottom + t.dims[2] / 2))


def _grid(
    t: BlockType,
    rows: int,
    cols: int,
    gap_x: float,
    gap_y: float,
    x0: float,
    y0: float,
    bottom: float,
    first_id: int,
) -> list[BlockInstance]:
    """rows x cols blocks of one type centered on (x0, y0) with the given clear gaps."""
    w, ln, _ = t.dims
    left = x0 - (cols * w + (cols - 1) * gap_x) / 2
    front = y0 - (rows * ln + (rows - 1) * gap_y) / 2
    blocks = []
    for r in range(rows):
        for c in range(cols):
            x = left + w / 2 + c * (w + gap_x)
            y = front + ln / 2 + r * (ln + gap_y)
            blocks.append(_place(first_id + len(blocks), t, x, y, bottom))
    return blocks


def _span(boxes: Sequence[Box3]) -> tuple[float, float, float, float]:
    return (
        min(b.left for b in boxes),
        max(b.right for b in boxes),
        min(b.front for b in boxes),
        max(b.back for b in boxes),
    )


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float | None:
    if lo > hi:
        return None
    return float(rng.uniform(lo, hi)) if hi > lo else lo


def _new_base(
    pattern: PatternType, rng: np.random.Generator, lib: BlockLibrary, first_id: int
) -> tuple[list[BlockInstance], BlockType | None]:
    """A base tier on the table, plus the top type it was laid out for."""
    x0 = float(rng.uniform(-0.6, 0.6))
    y0 = float(rng.uniform(-0.4, 0.4))
    t = _pick(rng, lib.block_types)
    if pattern in _SINGLE_BASE:
        return _grid(t, 1, 1, 0.0, 0.0, x0, y0, 0.0, first_id), None

    if pattern in _SEPARATED_BASE:
        top = _pick(rng, lib.block_types)
        rows, cols = 1, 2
        if pattern == P.N_PILLAR_BRIDGE:
            rows, cols = ((2, 2) if rng.random() < 0.3 else (1, int(rng.integers(3, 5))))
        clear = float(rng.uniform(*GAP_RANGE)) * top.dims[0]
        gap_x = max(clear / (cols - 1), MIN_GAP)
        gap_y = float(rng.uniform(MIN_GAP, 0.3))
        return _grid(t, rows, cols, gap_x, gap_y, x0, y0, 0.0, first_id), top

    if pattern == P.TWO_BASE_SINGLE:
        rows, cols = 1, 2
    elif pattern == P.N_BASE_SINGLE:
        rows, cols = ((2, 2) if rng.random() < 0.3 else (1, int(rng.integers(3, 5))))
    else:
        rows, cols = 1, int(rng.integers(2, 4))
    return _grid(t, rows, cols, 0.0, 0.0, x0, y0, 0.0, first_id), None


def _stack_top(
    pattern: PatternType, rng: np.random.Generator, t: BlockType, base: Box3, eps: float
) -> tuple[float, float] | None:
    """Top center over a single base: fully inside/around it, or overhanging in x."""
    tw, tl, _ = t.dims
    bw, bl, _ = base.size
    cx, cy, _ = base.center

    if tl <= bl:
        dy = _uniform(rng, -(bl - tl) / 2, (bl - tl) / 2)
    else:
        reach = min((tl - bl) / 2, bl / 2 - COM_SLACK)
        dy = _uniform(rng, -reach, reach)
    if dy is None:
        return None

    if pattern == P.SINGLE_BLOCK_STACK:
        if tw <= bw and tl <= bl:
            dx = _uniform(rng, -(bw - tw) / 2, (bw - tw) / 2)
        elif tw >= bw and tl >= bl:
            reach = min((tw - bw) / 2, bw / 4)
            dx = _uniform(rng, -reach, reach)
        else:
            return None
    else:
        # Overhang one side by more than the contact tolerance, center of
        # mass still over the base.
        dx = _uniform(rng, abs(bw - tw) / 2 + 2 * eps, bw / 2 - COM_SLACK)
        if dx is not None and rng.random() < 0.5:
            dx = -dx
    if dx is None:
        return None
    return cx + dx, cy + dy


def _covering_top(
    rng: np.random.Generator, t: BlockType, boxes: Sequence[Box3]
) -> tuple[float, float] | None:
    """Center of a top whose footprint contains every base footprint."""
    xmin, xmax, ymin, ymax = _span(boxes)
    tw, tl, _ = t.dims
    x = _uniform(
        rng, max(xmax - tw / 2, xmin + COM_SLACK), min(xmin + tw / 2, xmax - COM_SLACK)
    )
    y = _uniform(
        rng, max(ymax - tl / 2, ymin + COM_SLACK), min(ymin + tl / 2, ymax - COM_SLACK)
    )
    if x is None or y is None:
        return None
    return x, y


def _keystone(
    rng: np.random.Generator, t: BlockType, boxes: Sequence[Box3], eps: float
) -> tuple[float, float] | None:
    """Center of a top resting partially on two separated pillars."""
    if len(boxes) != 2:
        return None
    p1, p2 = sorted(boxes, key=lambda b: b.left)
    tw = t.dims[0]
    left = _uniform(
        rng,
        max(p1.left + 2 * eps, p2.left + 2 * eps - tw),
        min(p1.right - 2 * eps, p2.right - 2 * eps - tw),
    )
    if left is None:
        return None
    return left + tw / 2, (p1.center[1] + p2.center[1]) / 2


def _new_tops(
    pattern: PatternType,
    rng: np.random.Generator,
    lib: BlockLibrary,
    base_boxes: Sequence[Box3],
    first_id: int,
    hint: BlockType | None,
    eps: float,
) -> list[BlockInstance] | None:
    tops_z = [b.top for b in base_boxes]
    if max(tops_z) - min(tops_z) > eps / 2:
        return None
    bottom = max(tops_z)
    t = hint or _pick(rng, lib.block_types)

    if pattern in (P.SINGLE_BLOCK_STACK, P.CANTILEVER):
        center = _stack_top(pattern, rng, t, base_boxes[0], eps)
    elif pattern == P.BASIC_ARC:
        center = _keystone(rng, t, base_boxes, eps)
    elif pattern in (P.TWO_PILLAR_BRIDGE, P.N_PILLAR_BRIDGE, P.TWO_BASE_SINGLE, P.N_BASE_SINGLE):
        center = _covering_top(rng, t, base_boxes)
    else:
        return _top_row(pattern, rng, t, base_boxes, bottom, first_id)

    if center is None:
        return None
    return [_place(first_id, t, center[0], center[1], bottom)]


def _top_row(
    pattern: PatternType,
    rng: np.random.Generator,
    t: BlockType,
    base_boxes: Sequence[Box3],
    bottom: float,
    first_id: int,
) -> list[BlockInstance] | None:
    """Two or three tops in a row along x, spaced for sparse patterns, touching otherwise."""
    m = int(rng.integers(2, 4))
    gap = float(rng.uniform(MIN_GAP, 0.3)) if pattern == P.SINGLE_BASE_N_PILLAR else 0.0
    tw, tl, _ = t.dims
    span = m * tw + (m - 1) * gap
    xmin, xmax, ymin, ymax = _span(base_boxes)
    if span > xmax - xmin:
        return None

    x0 = (xmin + xmax) / 2 + float(rng.uniform(-1, 1)) * (xmax - xmin - span) / 2
    if pattern == P.N_BASE_M_OVERHEAD:
        y0 = (ymin + ymax) / 2
    else:
        if tl > ymax - ymin:
            return None
        y0 = (ymin + ymax) / 2 + float(rng.uniform(-1, 1)) * (ymax - ymin - tl) / 2
    return _grid(t, 1, m, gap, 0.0, x0, y0, bottom, first_id)


# Pattern and structure sampling


def _accept(
    scene: Scene,
    pattern: PatternType,
    base_ids: tuple[int, ...],
    top_ids: tuple[int, ...],
    cfg: GenConfig,
) -> bool:
    if validate_scene(scene, cfg.pen_tol):
        return False
    graph = extract_scene_graph(scene, cfg.classifier)
    if not eval_pattern(pattern, base_ids, top_ids, graph, scene):
        return False
    found = match_patterns(graph, scene)
    if PatternInstance(pattern, base_ids, top_ids) not in found:
        return False
    if not all(i.matched for i in found):
        return False
    return check_equilibrium(scene, cfg.stability).feasible


def sample_pattern_instance(
    pattern: PatternType | str,
    rng: np.random.Generator,
    lib: BlockLibrary,
    base_surface: Tier | None = None,
    cfg: GenConfig | None = None,
) -> tuple[Scene, PatternInstance]:
    """Place one pattern instance on the table or on an existing tier.

    Args:
        pattern: Pattern to sample
        rng: Random stream
        lib: Block library to draw types from
        base_surface: Tier to use as the pattern's base; None builds a new
            base tier on the table
        cfg: Generation settings

    Returns:
        The scene with the new blocks added, and the placed instance

    Raises:
        GenerationExhausted: If no valid placement is found in cfg.max_attempts draws
    """
    cfg = cfg or GenConfig()
    pattern = PatternType(pattern)
    desc = pattern.descriptor
    scene = base_surface.scene if base_surface is not None else Scene(lib, (), cfg.bounds)
    if base_surface is not None and not desc.admits(len(base_surface.ids), desc.n_top[0]):
        raise GenerationExhausted(pattern.value, 0)

    eps = cfg.classifier.eps
    for attempt in range(1, cfg.max_attempts + 1):
        first = scene.next_id()
        if base_surface is None:
            base, hint = _new_base(pattern, rng, lib, first)
            base_ids = tuple(b.id for b in base)
            base_boxes = [aabb(b, lib) for b in base]
            first += len(base)
        else:
            base, hint = [], None
            base_ids = tuple(base_surface.ids)
            base_boxes = [scene.box(i) for i in base_ids]

        tops = _new_tops(pattern, rng, lib, base_boxes, first, hint, eps)
        if tops is None:
            continue
        top_ids = tuple(b.id for b in tops)
        candidate = scene.with_blocks(scene.blocks + tuple(base) + tuple(tops))
        if _accept(candidate, pattern, base_ids, top_ids, cfg):
            logger.debug("sampled %s after %d attempt(s)", pattern.value, attempt)
            return candidate, PatternInstance(pattern, base_ids, top_ids)

    raise GenerationExhausted(pattern.value, cfg.max_attempts)


def _candidates(tier: Tier | None, cfg: GenConfig) -> list[PatternType]:
    if tier is None:
        return list(PatternType)
    graph = extract_scene_graph(tier.scene, cfg.classifier)
    n = len(tier.ids)
    return [
        p
        for p in PatternType
        if p.descriptor.admits(n, p.descriptor.n_top[0])
        and layout_holds(p.descriptor.base_layout, graph, tier.ids)
    ]


def build_structure(
    rng: np.random.Generator, levels: int, lib: BlockLibrary, cfg: GenConfig | None = None
) -> Structure:
    """Chain `levels` pattern instances, each on the previous top tier.

    Raises:
        ValidationError: If levels < 1
        GenerationExhausted: If no structure is found within cfg.max_restarts restarts
    """
    if levels < 1:
        raise ValidationError(f"A structure needs at least one level, got {levels}")
    cfg = cfg or GenConfig()

    for restart in range(cfg.max_restarts):
        tier: Tier | None = None
        instances: list[PatternInstance] = []
        try:
            for _ in range(levels):
                order = _candidates(tier, cfg)
                rng.shuffle(order)
                for pattern in order:
                    try:
                        scene, inst = sample_pattern_instance(pattern, rng, lib, tier, cfg)
                    except GenerationExhausted:
                        continue
                    break
                else:
                    raise GenerationExhausted(f"level {len(instances) + 1}", len(order))
                instances.append(inst)
                tier = Tier(scene, inst.top_ids)
        except GenerationExhausted as e:
            logger.debug("restart %d: %s", restart + 1, e)
            continue

        graph = extract_scene_graph(scene, cfg.classifier)
        recovered = {i.key for i in match_patterns(graph, scene)}
        if recovered == {i.key for i in instances}:
            return Structure(scene, tuple(instances), levels=levels)
        logger.debug("restart %d: pattern recovery mismatch", restart + 1)

    raise GenerationExhausted(f"{levels}-level structure", cfg.max_restarts)


def compose_structure(
    rng: np.random.Generator, levels: int, lib: BlockLibrary, cfg: GenConfig | None = None
) -> Scene:
    """Stable multi-level scene made of `levels` chained pattern instances."""
    return build_structure(rng, levels, lib, cfg).scene


def _generate_one(args: tuple) -> Structure:
    index, base_seed, levels, lib, cfg = args
    structure = build_structure(utils.rng_stream(base_seed, index), levels, lib, cfg)
    return Structure(structure.scene, structure.instances, base_seed + index, levels)


def generate_structures(
    count: int,
    base_seed: int,
    levels: Sequence[int],
    lib: BlockLibrary,
    cfg: GenConfig | None = None,
    workers: int = 1,
) -> list[Structure]:
    """Generate `count` structures; structure i uses seed base_seed + i.

    Level counts cycle through `levels`. Results are identical for any
    number of workers.
    """
    if not levels:
        raise ValidationError("At least one level count is required")
    cfg = cfg or GenConfig()
    jobs = [(i, base_seed, int(levels[i % len(levels)]), lib, cfg) for i in range(count)]
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_generate_one, jobs))
    return [_generate_one(job) for job in jobs]


# Training sets


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """One positive example: operand geometry and poses in model units.

    g is (k, geom_dim) and p is (k, 3) for k operands.
    """

    name: str
    scene_index: int
    operands: tuple[int, ...]
    g: np.ndarray
    p: np.ndarray


def is_pattern_name(name: str) -> bool:
    return name in {p.value for p in PatternType}


def geom_dim_for(name: str) -> int:
    """Per-operand geometry width: dims, plus a base/top role flag for patterns."""
    return 4 if is_pattern_name(name) else 3


def _sample(
    name: str, index: int, scene: Scene, operands: Sequence[int], roles: Sequence[float] | None
) -> TrainingSample:
    boxes = [scene.box(o) for o in operands]
    g = np.zeros((len(boxes), geom_dim_for(name)))
    g[:, :3] = normalize_xyz([b.size for b in boxes])
    if roles is not None:
        g[:, 3] = roles
    p = normalize_xyz([b.center for b in boxes])
    return TrainingSample(name, index, tuple(operands), g, p)


def extract_training_set(
    scenes: Sequence[Scene], name: str, cfg: ClassifierConfig | None = None
) -> list[TrainingSample]:
    """Collect every operand tuple of `name` that holds in the scenes.

    `name` is a relation or a stability pattern. Relation samples are
    re-checked with the classifier; pattern samples come from matching.
    Duplicates (same scene, same operands) appear once.

    Args:
        scenes: Source scenes
        name: Relation or pattern name
        cfg: Classifier thresholds

    Returns:
        Samples in scene order, then operand order
    """
    cfg = cfg or ClassifierConfig()
    pattern = is_pattern_name(name)
    rel = None if pattern else RelationType(name)

    samples: list[TrainingSample] = []
    seen: set[tuple[int, tuple[int, ...]]] = set()
    for index, scene in enumerate(scenes):
        graph = extract_scene_graph(scene, cfg)
        if pattern:
            for inst in match_patterns(graph, scene):
                if inst.name != name:
                    continue
                ops = inst.base_ids + inst.top_ids
                if (index, ops) in seen:
                    continue
                seen.add((index, ops))
                roles = (0.0,) * len(inst.base_ids) + (1.0,) * len(inst.top_ids)
                samples.append(_sample(name, index, scene, ops, roles))
            continue

        for edge in graph.edges_of(rel):
            if (index, edge.key[1]) in seen:
                continue
            if not eval_geom(rel, [scene.box(o) for o in edge.operands], cfg):
                logger.warning("dropping %s in scene %d: classifier disagrees", edge, index)
                continue
            seen.add((index, edge.key[1]))
            samples.append(_sample(name, index, scene, edge.operands, None))
    return samples


def to_denoiser_data(samples: Sequence[TrainingSample], slots: int, geom_dim: int) -> DenoiserData:
    """Pad samples to `slots` operands and stack them.

    Raises:
        ShapeError: If a sample has more operands than slots or another geometry width
    """
    g = np.zeros((len(samples), slots, geom_dim))
    p = np.zeros((len(samples), slots, 3))
    mask = np.zeros((len(samples), slots), dtype=bool)
    for i, s in enumerate(samples):
        k = len(s.operands)
        if k > slots:
            raise ShapeError(f"{s.name} sample has {k} operands but only {slots} slots")
        if s.g.shape[1] != geom_dim:
            raise ShapeError(f"{s.name} sample geometry width {s.g.shape[1]} != {geom_dim}")
        g[i, :k] = s.g
        p[i, :k] = s.p
        mask[i, :k] = True
    return DenoiserData(g, p, mask)


def save_dataset(
    data: DenoiserData, path: Path, name: str, seed: int | None = None, config_hash: str = ""
) -> None:
    """Write a dataset: magic, header length, JSON header, float32 LE rows.

    Each row is [operand count, geometry (slots * geom_dim), poses (slots * 3)].
    """
    n, slots, dg = data.g.shape
    rel_arity = None if is_pattern_name(name) else RelationType(name).arity
    header = {
        "format": DATASET_FORMAT,
        "relation": name,
        "arity": rel_arity,
        "slots": slots,
        "geom_dim": dg,
        "count": n,
        "seed": seed,
        "config_hash": config_hash,
    }
    rows = np.concatenate(
        [data.mask.sum(axis=1, keepdims=True), data.g.reshape(n, -1), data.p.reshape(n, -1)],
        axis=1,
    )
    head = json.dumps(header).encode("utf-8")
    utils.atomic_write_bytes(
        Path(path),
        DATASET_MAGIC + struct.pack("<I", len(head)) + head + rows.astype("<f4").tobytes(),
    )


def load_dataset(path: Path) -> tuple[DenoiserData, dict[str, Any]]:
    """Read a dataset written by save_dataset.

    Raises:
        FileNotFoundError: If the file does not exist
        ShapeError: If the file is malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != DATASET_MAGIC or len(raw) < 8:
        raise ShapeError(f"Not a dataset file: {path}")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
        count, slots, dg = int(header["count"]), int(header["slots"]), int(header["geom_dim"])
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError) as e:
        raise ShapeError(f"Corrupt dataset header in {path}: {e}") from e

    width = 1 + slots * dg + slots * 3
    rows = np.frombuffer(raw[8 + n :], dtype="<f4").astype(np.float64)
    if rows.size != count * width:
        raise ShapeError(f"Dataset {path} holds {rows.size} values, expected {count * width}")
    rows = rows.reshape(count, width)
    k = rows[:, 0].astype(int)
    mask = np.arange(slots)[None, :] < k[:, None]
    g = rows[:, 1 : 1 + slots * dg].reshape(count, slots, dg)
    p = rows[:, 1 + slots * dg :].reshape(count, slots, 3)
    return DenoiserData(g, p, mask), header


def write_manifest(
    path: Path, counts: dict[str, int], seed: int, config_hash: str, **extra
) -> None:
    data = {"counts": dict(sorted(counts.items())), "seed": seed, "config_hash": config_hash}
    data.update(extra)
    utils.atomic_write_text(Path(path), json.dumps(data, indent=2) + "\n")


# Rendering


@dataclass(frozen=True)
class RenderConfig:
    px_per_unit: int = 100
    pad_px: int = 10
    dilate_px: int = 1
    blur: float = 1.0

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "RenderConfig":
        return cls(
            px_per_unit=int(data.get("px_per_unit", cls.px_per_unit)),
            pad_px=int(data.get("pad_px", cls.pad_px)),
            dilate_px=int(data.get("dilate_px", cls.dilate_px)),
            blur=float(data.get("blur", cls.blur)),
        )


@dataclass
class RenderResult:
    """A front-view raster and what it shows.

    `labels` and `block_ids` follow the raster's region scan order; holes
    between blocks get None in both.
    """

    image: np.ndarray
    sketch: Sketch
    labels: list[str | None]
    block_ids: list[int | None]


BACKGROUND = -2


def render_frontview_sketch(
    scene: Scene, cfg: RenderConfig | None = None, sketch_cfg: SketchConfig | None = None
) -> RenderResult:
    """Draw the scene as seen from the front, like a hand sketch.

    Blocks are painted far to near (larger y first): each clears its
    rectangle and draws its outline, so nearer blocks hide what is behind
    them. Blocks left with no painted pixel are fully occluded and dropped.
    Strokes are then dilated and blurred.

    Args:
        scene: Scene to draw
        cfg: Raster settings
        sketch_cfg: Settings the raster will be parsed with (for labels)

    Returns:
        Raster, structured sketch of the visible blocks (scene units) and
        per-region labels
    """
    cfg = cfg or RenderConfig()
    sketch_cfg = sketch_cfg or SketchConfig(stroke_px=cfg.dilate_px)
    ppu, pad = cfg.px_per_unit, cfg.pad_px
    x_lo, x_hi = scene.bounds.left, scene.bounds.right
    z_hi = max([scene.box(i).top for i in scene.ids] + [1.0])
    width = int(round((x_hi - x_lo) * ppu)) + 2 * pad + 1
    height = int(round(z_hi * ppu)) + 2 * pad + 1

    def col(x: float) -> int:
        return pad + int(round((x - x_lo) * ppu))

    def row(z: float) -> int:
        return height - 1 - (pad + int(round(z * ppu)))

    ink = np.zeros((height, width), dtype=bool)
    owner = np.full((height, width), BACKGROUND, dtype=int)
    order = sorted(scene.blocks, key=lambda b: (-scene.box(b.id).center[1], b.id))
    for block in order:
        box = scene.box(block.id)
        c0, c1 = col(box.left), col(box.right)
        r0, r1 = row(box.top), row(box.bottom)
        owner[r0 : r1 + 1, c0 : c1 + 1] = block.id
        ink[r0 : r1 + 1, c0 : c1 + 1] = False
        ink[r0 : r1 + 1, [c0, c1]] = True
        ink[[r0, r1], c0 : c1 + 1] = True

    shown = set(np.unique(owner).tolist()) - {BACKGROUND}
    visible = [b for b in scene.blocks if b.id in shown]
    dropped = len(scene.blocks) - len(visible)
    if dropped:
        logger.debug("render: %d fully occluded block(s) dropped", dropped)

    if cfg.dilate_px > 0:
        ink = ndimage.binary_dilation(
            ink, structure=np.ones((3, 3), dtype=bool), iterations=cfg.dilate_px
        )
    gray = np.where(ink, 0.0, 255.0)
    if cfg.blur > 0:
        gray = ndimage.gaussian_filter(gray, cfg.blur)
    image = np.clip(np.round(gray), 0, 255).astype(np.uint8)

    labels: list[str | None] = []
    block_ids: list[int | None] = []
    grow = sketch_cfg.dilate_px + sketch_cfg.stroke_px + 1
    for region in find_regions(image, sketch_cfg):
        c0, c1 = int(region.left) + grow, int(region.right) - grow
        r0 = height - 1 - (int(region.top) - grow)
        r1 = height - 1 - (int(region.bottom) + grow)
        patch = owner[r0 : r1 + 1, c0 : c1 + 1].ravel()
        winner = Counter(patch.tolist()).most_common(1)[0][0] if patch.size else BACKGROUND
        if winner == BACKGROUND:
            labels.append(None)
            block_ids.append(None)
        else:
            labels.append(scene.library.get(scene.block(winner).type_id).name)
            block_ids.append(int(winner))

    boxes = []
    for block in sorted(visible, key=lambda b: b.id):
        box = scene.box(block.id)
        w, _, h = box.size
        cx, _, cz = box.center
        boxes.append(SketchBox(block.id, block.type_id, cx, cz, w, h))
    sketch = Sketch(tuple(boxes), scene.library, SketchSource.STRUCTURED)
    return RenderResult(image, sketch, labels, block_ids)


def save_render(result: RenderResult, stem: Path) -> tuple[Path, Path]:
    """Write `<stem>.png` and the `<stem>.labels.json` sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    png = stem.with_suffix(".png")
    labels = stem.parent / f"{stem.name}.labels.json"
    Image.fromarray(result.image).save(png)
    utils.atomic_write_text(labels, json.dumps(result.labels) + "\n")
    return png, labels
