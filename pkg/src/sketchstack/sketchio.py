"""Sketch parsing for structured files and raster images.

Both sources end as a Sketch of labeled front-view boxes, normalized so the
union of boxes spans the workspace width and rests on z=0.

Raster parsing thresholds the strokes, dilates the ink to close small gaps,
flood-fills the background from the image border and fits one axis-aligned
box per enclosed region. Region labels come from a sidecar JSON list in
region scan order (bottom to top, then left to right); a ``null`` label
marks an enclosed region that is a hole between blocks, not a block.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image
from scipy import ndimage

from sketchstack import utils
from sketchstack.core import BlockLibrary, LibraryError, ValidationError

logger = logging.getLogger(__name__)

INK_THRESHOLD = 128


class ParseError(ValidationError):
    """Raised when a sketch file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class LabelMismatch(ParseError):
    """Raised when the sidecar label count differs from the region count."""

    pass


class EmptySketch(ParseError):
    """Raised when a raster contains no enclosed regions."""

    pass


class SketchSource(str, Enum):
    STRUCTURED = "structured"
    RASTER = "raster"


@dataclass(frozen=True)
class SketchBox:
    """A labeled front-view box: coarse centroid (cx, cz) and size (w, h)."""

    id: int
    type_id: int
    cx: float
    cz: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ParseError(f"Sketch box {self.id} must have positive size, got {self.w}x{self.h}")

    @property
    def left(self) -> float:
        return self.cx - self.w / 2

    @property
    def right(self) -> float:
        return self.cx + self.w / 2

    @property
    def bottom(self) -> float:
        return self.cz - self.h / 2

    @property
    def top(self) -> float:
        return self.cz + self.h / 2


@dataclass(frozen=True)
class Sketch:
    boxes: tuple[SketchBox, ...]
    library: BlockLibrary
    source: SketchSource = SketchSource.STRUCTURED

    def __post_init__(self):
        boxes = tuple(self.boxes)
        for box in boxes:
            self.library.get(box.type_id)
        object.__setattr__(self, "boxes", boxes)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class SketchConfig:
    """Raster parsing knobs.

    stroke_px is the ink half-width beyond a box's true edge in the drawn
    image (1 for rasters from render_frontview_sketch, 0 for hairlines).
    """

    dilate_px: int = 2
    stroke_px: int = 1
    min_region_px: int = 4
    target_width: float = 3.0

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "SketchConfig":
        return cls(
            dilate_px=int(data.get("dilate_px", cls.dilate_px)),
            stroke_px=int(data.get("stroke_px", cls.stroke_px)),
            min_region_px=int(data.get("min_region_px", cls.min_region_px)),
            target_width=float(data.get("target_width", cls.target_width)),
        )


@dataclass(frozen=True)
class Region:
    """Recovered box of one enclosed raster region, in pixels with z pointing up."""

    left: float
    right: float
    bottom: float
    top: float
    size: int

    @property
    def cx(self) -> float:
        return (self.left + self.right) / 2

    @property
    def cz(self) -> float:
        return (self.bottom + self.top) / 2

    @property
    def sort_key(self) -> tuple[float, float]:
        return (self.bottom, self.cx)


def resolve_label(library: BlockLibrary, label: str):
    """Resolve a type label; ``type_3`` is accepted for ``type_3_block``.

    Raises:
        LibraryError: If neither form names a library type
    """
    try:
        return library.by_name(label)
    except LibraryError:
        return library.by_name(f"{label}_block")


def _box_lines(text: str) -> list[int]:
    """Line number of each object literal opening inside the "boxes" array."""
    start = text.find('"boxes"')
    if start < 0:
        return []
    line = text.count("\n", 0, start) + 1
    lines: list[int] = []
    depth = 0
    started = False
    in_str = False
    escape = False
    for ch in text[start + len('"boxes"') :]:
        if ch == "\n":
            line += 1
        if in_str:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch in "[{":
            if ch == "{" and depth == 1:
                lines.append(line)
            depth += 1
            started = True
        elif ch in "]}":
            depth -= 1
            if started and depth == 0:
                break
    return lines


def parse_structured(path: Path, library: BlockLibrary, target_width: float = 3.0) -> Sketch:
    """Load a structured sketch file and normalize it.

    Format: ``{"boxes": [{"id", "type": "type_k_block", "cx", "cz", "w", "h"}]}``.

    Args:
        path: Sketch JSON file
        library: Library the type labels refer to
        target_width: Width of the normalized sketch

    Returns:
        Normalized Sketch (empty when the file lists no boxes)

    Raises:
        FileNotFoundError: If the file does not exist
        ParseError: On malformed JSON, malformed fields or unknown type labels
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Sketch file not found: {path}")
    text = path.read_text()

    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno) from e

    if not isinstance(data, dict) or not isinstance(data.get("boxes"), list):
        raise ParseError("expected an object with a 'boxes' list", line=1)

    lines = _box_lines(text)
    boxes: list[SketchBox] = []
    seen: set[int] = set()
    for i, entry in enumerate(data["boxes"]):
        line = lines[i] if i < len(lines) else None
        try:
            box_id = int(entry["id"])
            label = str(entry["type"])
            cx, cz = float(entry["cx"]), float(entry["cz"])
            w, h = float(entry["w"]), float(entry["h"])
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"box {i}: malformed field ({e})", line=line) from e

        try:
            block_type = resolve_label(library, label)
        except LibraryError as e:
            raise ParseError(f"box {i}: unknown type label '{label}'", line=line) from e

        if box_id in seen:
            raise ParseError(f"box {i}: duplicate id {box_id}", line=line)
        if w <= 0 or h <= 0:
            raise ParseError(f"box {i}: size must be positive, got {w}x{h}", line=line)
        seen.add(box_id)
        boxes.append(SketchBox(box_id, block_type.id, cx, cz, w, h))

    sketch = Sketch(tuple(boxes), library, SketchSource.STRUCTURED)
    if not boxes:
        return sketch
    return normalize(sketch, target_width)


def sketch_to_dict(sketch: Sketch) -> dict[str, Any]:
    return {
        "boxes": [
            {
                "id": b.id,
                "type": sketch.library.get(b.type_id).name,
                "cx": b.cx,
                "cz": b.cz,
                "w": b.w,
                "h": b.h,
            }
            for b in sketch.boxes
        ]
    }


def save_structured(sketch: Sketch, path: Path) -> None:
    """Write a sketch in the structured JSON format."""
    utils.atomic_write_text(Path(path), json.dumps(sketch_to_dict(sketch), indent=2) + "\n")


def _load_gray(image: np.ndarray | Path | str) -> np.ndarray:
    if isinstance(image, np.ndarray):
        gray = image
    else:
        path = Path(image)
        if not path.exists():
            raise FileNotFoundError(f"Sketch image not found: {path}")
        with Image.open(path) as img:
            gray = np.asarray(img.convert("L"))
    if gray.ndim != 2:
        raise ParseError(f"expected a grayscale image, got shape {gray.shape}")
    return gray


def find_regions(image: np.ndarray | Path | str, cfg: SketchConfig) -> list[Region]:
    """Find enclosed regions of a stroke raster and recover their box outlines.

    Args:
        image: 8-bit grayscale array or image path
        cfg: Parsing knobs

    Returns:
        Regions sorted by (bottom, then center x)
    """
    gray = _load_gray(image)
    ink = gray < INK_THRESHOLD
    if cfg.dilate_px > 0:
        ink = ndimage.binary_dilation(
            ink, structure=np.ones((3, 3), dtype=bool), iterations=cfg.dilate_px
        )

    labeled, count = ndimage.label(~ink)
    if count == 0:
        return []

    border = np.concatenate([labeled[0, :], labeled[-1, :], labeled[:, 0], labeled[:, -1]])
    background = set(np.unique(border).tolist())
    sizes = np.bincount(labeled.ravel(), minlength=count + 1)

    height = gray.shape[0]
    grow = cfg.dilate_px + cfg.stroke_px + 1
    regions: list[Region] = []
    for label, slices in enumerate(ndimage.find_objects(labeled), start=1):
        if slices is None or label in background or sizes[label] < cfg.min_region_px:
            continue
        rows, cols = slices
        top_row = rows.start - grow
        bottom_row = rows.stop - 1 + grow
        regions.append(
            Region(
                left=float(cols.start - grow),
                right=float(cols.stop - 1 + grow),
                bottom=float(height - 1 - bottom_row),
                top=float(height - 1 - top_row),
                size=int(sizes[label]),
            )
        )

    regions.sort(key=lambda r: r.sort_key)
    return regions


def _load_labels(labels: Path | str | list[str | None]) -> list[str | None]:
    if isinstance(labels, list):
        return labels
    path = Path(labels)
    if not path.exists():
        raise FileNotFoundError(f"Label file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"label file is not valid JSON: {e.msg}", line=e.lineno) from e
    if not isinstance(data, list) or not all(x is None or isinstance(x, str) for x in data):
        raise ParseError("label file must be a JSON list of type labels or null")
    return data


def parse_raster(
    image: np.ndarray | Path | str,
    labels: Path | str | list[str | None],
    library: BlockLibrary,
    cfg: SketchConfig | None = None,
    normalized: bool = True,
) -> Sketch:
    """Parse a raster sketch into labeled boxes.

    Args:
        image: 8-bit grayscale array or PNG path
        labels: Sidecar label file (or the list itself), one entry per region
        library: Library the labels refer to
        cfg: Parsing knobs
        normalized: Normalize to cfg.target_width; False keeps pixel units

    Returns:
        Sketch with box ids in region scan order

    Raises:
        EmptySketch: If the image has no enclosed regions
        LabelMismatch: If the label count differs from the region count
        ParseError: On unknown type labels
    """
    cfg = cfg or SketchConfig()
    regions = find_regions(image, cfg)
    if not regions:
        raise EmptySketch("no enclosed regions found in sketch image")

    names = _load_labels(labels)
    if len(names) != len(regions):
        raise LabelMismatch(f"found {len(regions)} regions but {len(names)} labels")

    boxes: list[SketchBox] = []
    for region, name in zip(regions, names, strict=True):
        if name is None:
            continue
        try:
            block_type = resolve_label(library, name)
        except LibraryError as e:
            raise ParseError(f"unknown type label '{name}'") from e
        boxes.append(
            SketchBox(
                len(boxes),
                block_type.id,
                region.cx,
                region.cz,
                region.right - region.left,
                region.top - region.bottom,
            )
        )

    if not boxes:
        raise EmptySketch("every enclosed region is labeled as a hole")

    logger.debug("parsed %d boxes from %d regions", len(boxes), len(regions))
    sketch = Sketch(tuple(boxes), library, SketchSource.RASTER)
    return normalize(sketch, cfg.target_width) if normalized else sketch


def normalize(sketch: Sketch, target_width: float = 3.0) -> Sketch:
    """Scale and translate a sketch onto the workspace frame.

    The union of boxes is centered on x=0 with width `target_width` and its
    lowest edge on z=0. Uniform scaling keeps every ratio.
    """
    if not sketch.boxes:
        return sketch

    xmin = min(b.left for b in sketch.boxes)
    xmax = max(b.right for b in sketch.boxes)
    zmin = min(b.bottom for b in sketch.boxes)
    xmid = (xmin + xmax) / 2
    scale = target_width / (xmax - xmin)

    boxes = tuple(
        SketchBox(
            b.id,
            b.type_id,
            (b.cx - xmid) * scale,
            (b.cz - zmin) * scale,
            b.w * scale,
            b.h * scale,
        )
        for b in sketch.boxes
    )
    return Sketch(boxes, sketch.library, sketch.source)
