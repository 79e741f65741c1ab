"""Geometry primitives, the block library and the scene container.

Every other module builds on these immutable values: axis-aligned boxes,
block types, placed block instances and scenes. The validity checks here
run before any relation or physics evaluation.
"""

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from sketchstack import utils

TABLE_ID = -1
PEN_TOL = 1e-4
BOUNDS_TOL = 1e-9


class ValidationError(ValueError):
    """Base exception for invalid inputs (the CLI maps it to exit code 2)."""

    pass


class LibraryError(ValidationError):
    """Raised for malformed block libraries and unknown block types."""

    pass


Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box given by its low and high corners."""

    lo: Vec3
    hi: Vec3

    @classmethod
    def from_center(cls, center: Vec3, dims: Vec3) -> "Box3":
        cx, cy, cz = center
        w, ln, h = dims
        return cls((cx - w / 2, cy - ln / 2, cz - h / 2), (cx + w / 2, cy + ln / 2, cz + h / 2))

    @property
    def left(self) -> float:
        return self.lo[0]

    @property
    def right(self) -> float:
        return self.hi[0]

    @property
    def front(self) -> float:
        return self.lo[1]

    @property
    def back(self) -> float:
        return self.hi[1]

    @property
    def bottom(self) -> float:
        return self.lo[2]

    @property
    def top(self) -> float:
        return self.hi[2]

    @property
    def center(self) -> Vec3:
        return tuple((a + b) / 2 for a, b in zip(self.lo, self.hi, strict=True))

    @property
    def size(self) -> Vec3:
        return tuple(b - a for a, b in zip(self.lo, self.hi, strict=True))

    @property
    def volume(self) -> float:
        w, ln, h = self.size
        return w * ln * h

    def translated(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> "Box3":
        d = (dx, dy, dz)
        return Box3(
            tuple(a + b for a, b in zip(self.lo, d, strict=True)),
            tuple(a + b for a, b in zip(self.hi, d, strict=True)),
        )

    def contains(self, other: "Box3", tol: float = BOUNDS_TOL) -> bool:
        return all(
            o_lo >= s_lo - tol and o_hi <= s_hi + tol
            for s_lo, s_hi, o_lo, o_hi in zip(self.lo, self.hi, other.lo, other.hi, strict=True)
        )


DEFAULT_BOUNDS = Box3((-1.5, -1.0, 0.0), (1.5, 1.0, 5.0))

# Poses and dims are divided by these before entering a denoiser.
NORM_SCALE: Vec3 = (1.5, 1.0, 2.5)


def normalize_xyz(values):
    """Scale scene-unit xyz triples (any array with last axis 3) to model units."""
    return np.asarray(values, dtype=np.float64) / np.asarray(NORM_SCALE)


def denormalize_xyz(values):
    return np.asarray(values, dtype=np.float64) * np.asarray(NORM_SCALE)


@dataclass(frozen=True)
class BlockType:
    """A rigid axis-aligned block shape: width (x), length (y), height (z)."""

    id: int
    name: str
    dims: Vec3

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dims)
        if len(dims) != 3:
            raise LibraryError(f"Block type '{self.name}' needs 3 dims, got {len(dims)}")
        if not all(math.isfinite(d) and d > 0 for d in dims):
            raise LibraryError(f"Block type '{self.name}' has non-positive dims {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def volume(self) -> float:
        w, ln, h = self.dims
        return w * ln * h


@dataclass(frozen=True)
class BlockLibrary:
    """Ordered block types; index 0 is always the table."""

    types: tuple[BlockType, ...]

    def __post_init__(self):
        types = tuple(self.types)
        if not types:
            raise LibraryError("Block library cannot be empty")
        ids = [t.id for t in types]
        if len(set(ids)) != len(ids):
            raise LibraryError(f"Duplicate block type ids in library: {ids}")
        names = [t.name for t in types]
        if len(set(names)) != len(names):
            raise LibraryError(f"Duplicate block type names in library: {names}")
        object.__setattr__(self, "types", types)

    @property
    def table(self) -> BlockType:
        return self.types[0]

    @property
    def block_types(self) -> tuple[BlockType, ...]:
        """Placeable types (everything except the table)."""
        return self.types[1:]

    def get(self, type_id: int) -> BlockType:
        for t in self.types:
            if t.id == type_id:
                return t
        raise LibraryError(f"Unknown block type id: {type_id}")

    def by_name(self, name: str) -> BlockType:
        for t in self.types:
            if t.name == name:
                return t
        raise LibraryError(f"Unknown block type label: '{name}'")

    def check_table(self, bounds: Box3) -> None:
        """Ensure the table footprint encloses the workspace footprint."""
        w, ln, _ = self.table.dims
        bw, bl, _ = bounds.size
        if w < bw - BOUNDS_TOL or ln < bl - BOUNDS_TOL:
            raise LibraryError(
                f"Table {self.table.name} ({w} x {ln}) does not enclose the workspace ({bw} x {bl})"
            )

    def __len__(self) -> int:
        return len(self.types)


@dataclass(frozen=True)
class BlockInstance:
    """A placed block: library type plus centroid pose."""

    id: int
    type_id: int
    centroid: Vec3
    hidden: bool = False

    def __post_init__(self):
        object.__setattr__(self, "centroid", tuple(float(c) for c in self.centroid))

    def moved(self, centroid: Vec3) -> "BlockInstance":
        return replace(self, centroid=tuple(float(c) for c in centroid))


@dataclass(frozen=True)
class Violation:
    """One problem found by validate_scene."""

    kind: str
    block_ids: tuple[int, ...]
    detail: str


def aabb(block: BlockInstance, lib: BlockLibrary) -> Box3:
    """Get the axis-aligned bounding box of a placed block.

    Args:
        block: Placed block
        lib: Library holding the block's type

    Returns:
        Box spanning centroid ± dims/2 on every axis

    Raises:
        LibraryError: If the block's type id is not in the library
    """
    return Box3.from_center(block.centroid, lib.get(block.type_id).dims)


def overlap_volume(a: Box3, b: Box3) -> float:
    """Volume of the intersection of two boxes (0.0 when disjoint or touching)."""
    volume = 1.0
    for a_lo, a_hi, b_lo, b_hi in zip(a.lo, a.hi, b.lo, b.hi, strict=True):
        extent = min(a_hi, b_hi) - max(a_lo, b_lo)
        if extent <= 0:
            return 0.0
        volume *= extent
    return volume


def table_box(lib: BlockLibrary) -> Box3:
    """Box of the table: centered at the origin with its top face at z=0."""
    w, ln, h = lib.table.dims
    return Box3.from_center((0.0, 0.0, -h / 2), (w, ln, h))


@dataclass(frozen=True)
class Scene:
    """Blocks placed in a workspace on top of the table."""

    library: BlockLibrary
    blocks: tuple[BlockInstance, ...] = ()
    bounds: Box3 = DEFAULT_BOUNDS

    def __post_init__(self):
        blocks = tuple(self.blocks)
        ids = [b.id for b in blocks]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"Duplicate block ids in scene: {sorted(ids)}")
        if TABLE_ID in ids:
            raise ValidationError(f"Block id {TABLE_ID} is reserved for the table")
        self.library.check_table(self.bounds)
        object.__setattr__(self, "blocks", blocks)

    @property
    def ids(self) -> list[int]:
        return [b.id for b in self.blocks]

    def block(self, block_id: int) -> BlockInstance:
        if block_id == TABLE_ID:
            return self.table_block()
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise KeyError(f"No block with id {block_id}")

    def table_block(self) -> BlockInstance:
        h = self.library.table.dims[2]
        return BlockInstance(TABLE_ID, self.library.table.id, (0.0, 0.0, -h / 2))

    def box(self, block_id: int) -> Box3:
        if block_id == TABLE_ID:
            return table_box(self.library)
        return aabb(self.block(block_id), self.library)

    def dims(self, block_id: int) -> Vec3:
        return self.library.get(self.block(block_id).type_id).dims

    def mass(self, block_id: int, density: float = 1.0) -> float:
        """Block mass under uniform density."""
        return self.library.get(self.block(block_id).type_id).volume * density

    def visible(self) -> list[BlockInstance]:
        return [b for b in self.blocks if not b.hidden]

    def with_blocks(self, blocks: list[BlockInstance] | tuple[BlockInstance, ...]) -> "Scene":
        return replace(self, blocks=tuple(blocks))

    def subset(self, block_ids) -> "Scene":
        keep = set(block_ids)
        return self.with_blocks([b for b in self.blocks if b.id in keep])

    def next_id(self) -> int:
        return max(self.ids, default=-1) + 1


def validate_scene(scene: Scene, pen_tol: float = PEN_TOL) -> list[Violation]:
    """Report everything that makes a scene physically invalid.

    Never raises: unknown types, out-of-bounds boxes, blocks sunk into the
    table and interpenetrating pairs are all returned as violations, in
    block-id order.

    Args:
        scene: Scene to check
        pen_tol: Largest interpenetration volume tolerated between two blocks

    Returns:
        List of violations (empty for a valid scene)
    """
    violations: list[Violation] = []
    boxes: dict[int, Box3] = {}

    for block in sorted(scene.blocks, key=lambda b: b.id):
        try:
            box = aabb(block, scene.library)
        except LibraryError as e:
            violations.append(Violation("unknown-type", (block.id,), str(e)))
            continue
        boxes[block.id] = box
        if box.bottom < -BOUNDS_TOL:
            violations.append(
                Violation(
                    "below-table", (block.id,), f"base z {box.bottom:.6g} below table surface"
                )
            )
        elif not scene.bounds.contains(box):
            violations.append(
                Violation("out-of-bounds", (block.id,), f"box {box.lo}..{box.hi} leaves workspace")
            )

    ids = sorted(boxes)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            vol = overlap_volume(boxes[a], boxes[b])
            if vol > pen_tol:
                violations.append(
                    Violation("interpenetration", (a, b), f"overlap volume {vol:.6g}")
                )

    return violations


def default_library() -> BlockLibrary:
    """Built-in library: the table plus eight block shapes (w, ln, h)."""
    shapes = [
        (3.0, 2.0, 0.1),  # table
        (0.2, 0.2, 0.2),  # cube
        (0.2, 0.2, 0.6),  # pillar
        (0.4, 0.2, 0.2),  # brick
        (0.8, 0.4, 0.2),  # beam
        (1.2, 0.6, 0.1),  # plank
        (0.6, 0.6, 0.2),  # slab
        (0.4, 0.8, 0.2),  # deep slab
        (0.4, 0.4, 0.4),  # large cube
    ]
    return BlockLibrary(
        tuple(BlockType(i, f"type_{i}_block", dims) for i, dims in enumerate(shapes))
    )


def library_from_list(entries: list[dict[str, Any]]) -> BlockLibrary:
    """Build a library from ``[{"id", "name", "dims"}]`` records.

    Raises:
        LibraryError: If a record is malformed
    """
    types = []
    for entry in entries:
        try:
            types.append(BlockType(int(entry["id"]), str(entry["name"]), tuple(entry["dims"])))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, LibraryError):
                raise
            raise LibraryError(f"Malformed library entry {entry!r}: {e}") from e
    return BlockLibrary(tuple(types))


def library_to_list(lib: BlockLibrary) -> list[dict[str, Any]]:
    return [{"id": t.id, "name": t.name, "dims": list(t.dims)} for t in lib.types]


def scene_to_dict(scene: Scene) -> dict[str, Any]:
    """Serialize a scene with canonical field order."""
    return {
        "library": library_to_list(scene.library),
        "blocks": [
            {
                "id": b.id,
                "type_id": b.type_id,
                "centroid": list(b.centroid),
                "hidden": b.hidden,
            }
            for b in scene.blocks
        ],
        "bounds": {"lo": list(scene.bounds.lo), "hi": list(scene.bounds.hi)},
    }


def scene_from_dict(data: dict[str, Any]) -> Scene:
    """Inverse of scene_to_dict.

    Raises:
        ValidationError: If required fields are missing or malformed
    """
    try:
        lib = library_from_list(data["library"])
        blocks = tuple(
            BlockInstance(
                int(b["id"]), int(b["type_id"]), tuple(b["centroid"]), bool(b.get("hidden", False))
            )
            for b in data["blocks"]
        )
        bounds_data = data.get("bounds")
        bounds = (
            Box3(tuple(bounds_data["lo"]), tuple(bounds_data["hi"]))
            if bounds_data
            else DEFAULT_BOUNDS
        )
    except (KeyError, TypeError) as e:
        raise ValidationError(f"Malformed scene data: {e}") from e
    return Scene(lib, blocks, bounds)


def save_scene(scene: Scene, path: Path, extra: dict[str, Any] | None = None) -> None:
    """Write a scene JSON file, optionally with extra top-level fields (config, seed)."""
    data = scene_to_dict(scene)
    if extra:
        data.update(extra)
    utils.atomic_write_text(Path(path), json.dumps(data, indent=2) + "\n")


def load_scene(path: Path) -> Scene:
    """Read a scene JSON file.

    Raises:
        FileNotFoundError: If the file does not exist
        ValidationError: If the contents are not a scene
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scene file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"Scene file is not valid JSON: {path}: {e}") from e
    return scene_from_dict(data)
