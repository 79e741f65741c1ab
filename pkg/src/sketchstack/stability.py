"""Quasi-static stability checking.

Blocks are rigid, axis-aligned and frictionless, so gravity is balanced by
vertical contact forces alone. A scene is stable when nonnegative forces at
the corners of every contact patch can balance the weight and the tipping
torques of every block; this is a linear feasibility program.
"""

import logging
from dataclasses import dataclass, field
from typing import Any

import networkx as nx
import numpy as np
from scipy.optimize import linprog

from sketchstack.core import TABLE_ID, Box3, Scene, table_box

logger = logging.getLogger(__name__)

AREA_TOL = 1e-9


class NotApplicable(ValueError):
    """Raised when the tree oracle is asked about a non-tree support graph."""

    pass


@dataclass(frozen=True)
class StabilityConfig:
    contact_tol: float = 0.02
    stability_margin: float = 0.005
    gravity: float = 9.81
    density: float = 1.0

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "StabilityConfig":
        known = {k: float(v) for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class Contact:
    """Face contact between an upper block and the block (or table) below it.

    The patch is the x-y rectangle where the faces overlap, at height z.
    """

    upper_id: int
    lower_id: int
    x: tuple[float, float]
    y: tuple[float, float]
    z: float

    @property
    def area(self) -> float:
        return (self.x[1] - self.x[0]) * (self.y[1] - self.y[0])

    def corners(self, margin: float = 0.0) -> list[tuple[float, float]]:
        """Patch corners after shrinking each side by `margin`.

        A side narrower than twice the margin collapses onto its midline.
        """
        x0, x1 = _shrink(self.x, margin)
        y0, y1 = _shrink(self.y, margin)
        return [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]


def _shrink(span: tuple[float, float], margin: float) -> tuple[float, float]:
    lo, hi = span
    if hi - lo <= 2 * margin:
        mid = (lo + hi) / 2
        return mid, mid
    return lo + margin, hi - margin


@dataclass
class StabilityReport:
    feasible: bool
    survivors: set[int]
    contacts: list[Contact]
    forces: dict[int, list[float]] = field(default_factory=dict)
    unsupported: list[int] = field(default_factory=list)


def _patch(upper: Box3, lower: Box3) -> tuple[tuple[float, float], tuple[float, float]] | None:
    x = (max(upper.left, lower.left), min(upper.right, lower.right))
    y = (max(upper.front, lower.front), min(upper.back, lower.back))
    if (x[1] - x[0]) * (y[1] - y[0]) <= AREA_TOL or x[1] <= x[0] or y[1] <= y[0]:
        return None
    return x, y


def extract_contacts(scene: Scene, contact_tol: float = 0.02) -> list[Contact]:
    """Find every face contact in the scene.

    Args:
        scene: Scene to inspect
        contact_tol: Largest gap between faces still counted as touching

    Returns:
        Contacts ordered by (upper_id, lower_id); table contacts use TABLE_ID
    """
    boxes = {b.id: scene.box(b.id) for b in scene.blocks}
    table = table_box(scene.library)
    contacts = []
    for uid in sorted(boxes):
        upper = boxes[uid]
        if abs(upper.bottom - table.top) <= contact_tol:
            patch = _patch(upper, table)
            if patch:
                contacts.append(Contact(uid, TABLE_ID, patch[0], patch[1], table.top))
        for lid in sorted(boxes):
            if lid == uid:
                continue
            lower = boxes[lid]
            if abs(upper.bottom - lower.top) > contact_tol:
                continue
            patch = _patch(upper, lower)
            if patch:
                contacts.append(Contact(uid, lid, patch[0], patch[1], lower.top))
    contacts.sort(key=lambda c: (c.upper_id, c.lower_id))
    return contacts


def _unsupported(scene: Scene, contacts: list[Contact]) -> list[int]:
    g = nx.Graph()
    g.add_node(TABLE_ID)
    g.add_nodes_from(scene.ids)
    g.add_edges_from((c.upper_id, c.lower_id) for c in contacts)
    grounded = nx.node_connected_component(g, TABLE_ID)
    return sorted(i for i in scene.ids if i not in grounded)


def _solve(scene: Scene, contacts: list[Contact], cfg: StabilityConfig) -> np.ndarray | None:
    """Corner forces balancing every block, or None if none exist."""
    ids = scene.ids
    if not ids:
        return np.zeros(0)
    row = {bid: i for i, bid in enumerate(ids)}
    n_vars = 4 * len(contacts)
    if n_vars == 0:
        return None

    # Three equations per block: vertical force, torque about x, torque about y.
    A = np.zeros((3 * len(ids), n_vars))
    b = np.zeros(3 * len(ids))
    for bid in ids:
        r = 3 * row[bid]
        b[r] = scene.mass(bid, cfg.density) * cfg.gravity

    for ci, contact in enumerate(contacts):
        for k, (px, py) in enumerate(contact.corners(cfg.stability_margin)):
            col = 4 * ci + k
            for bid, sign in ((contact.upper_id, 1.0), (contact.lower_id, -1.0)):
                if bid == TABLE_ID:
                    continue
                cx, cy, _ = scene.block(bid).centroid
                r = 3 * row[bid]
                A[r, col] += sign
                A[r + 1, col] += sign * (py - cy)
                A[r + 2, col] += sign * (px - cx)

    # Scale rows so the tolerance means the same for light and heavy scenes.
    scale = max(float(np.abs(b).max()), 1e-12)
    result = linprog(
        np.zeros(n_vars), A_eq=A / scale, b_eq=b / scale, bounds=(0, None), method="highs"
    )
    if result.status != 0:
        return None
    residual = np.abs(A @ result.x - b).max() / scale
    if residual > 1e-7:
        logger.debug("equilibrium solution rejected, residual %.2e", residual)
        return None
    return result.x


def _feasible(scene: Scene, cfg: StabilityConfig) -> tuple[bool, list[Contact], np.ndarray | None]:
    contacts = extract_contacts(scene, cfg.contact_tol)
    if not scene.blocks:
        return True, contacts, np.zeros(0)
    forces = _solve(scene, contacts, cfg)
    return forces is not None, contacts, forces


def _greedy_survivors(scene: Scene, cfg: StabilityConfig) -> set[int]:
    kept: list[int] = []
    order = sorted(scene.blocks, key=lambda b: (scene.box(b.id).bottom, b.id))
    for block in order:
        trial = scene.subset(kept + [block.id])
        if _feasible(trial, cfg)[0]:
            kept.append(block.id)
    return set(kept)


def check_equilibrium(scene: Scene, cfg: StabilityConfig | None = None) -> StabilityReport:
    """Decide whether the scene stands under gravity.

    Args:
        scene: Scene to check
        cfg: Contact tolerance, margin and mass parameters

    Returns:
        Report with the verdict, contacts and corner forces when feasible.
        When infeasible, survivors come from the greedy bottom-up pass and
        blocks with no contact path to the table are flagged as unsupported.
    """
    cfg = cfg or StabilityConfig()
    feasible, contacts, forces = _feasible(scene, cfg)
    if feasible:
        per_contact = {
            i: [float(f) for f in forces[4 * i : 4 * i + 4]] for i in range(len(contacts))
        }
        return StabilityReport(True, set(scene.ids), contacts, per_contact)

    unsupported = _unsupported(scene, contacts)
    survivors = _greedy_survivors(scene, cfg)
    logger.debug(
        "infeasible scene: %d/%d survive, unsupported %s",
        len(survivors),
        len(scene.blocks),
        unsupported,
    )
    return StabilityReport(False, survivors, contacts, {}, unsupported)


def surviving_fraction(scene: Scene, cfg: StabilityConfig | None = None) -> float:
    """Share of blocks that stay in place; 1.0 for a stable (or empty) scene."""
    cfg = cfg or StabilityConfig()
    if not scene.blocks:
        return 1.0
    if _feasible(scene, cfg)[0]:
        return 1.0
    return len(_greedy_survivors(scene, cfg)) / len(scene.blocks)


def tree_support_oracle(scene: Scene, cfg: StabilityConfig | None = None) -> bool:
    """Exact stability test for assemblies where each block has one support.

    Each block's combined center of mass (itself plus everything it
    carries) must fall strictly inside its shrunk support patch.

    Raises:
        NotApplicable: If some block rests on more than one support
    """
    cfg = cfg or StabilityConfig()
    contacts = extract_contacts(scene, cfg.contact_tol)
    below: dict[int, list[Contact]] = {i: [] for i in scene.ids}
    carried: dict[int, list[int]] = {i: [] for i in scene.ids}
    for c in contacts:
        below[c.upper_id].append(c)
        if c.lower_id != TABLE_ID:
            carried[c.lower_id].append(c.upper_id)

    if any(len(cs) > 1 for cs in below.values()):
        raise NotApplicable("Support graph is not a forest")
    if any(not cs for cs in below.values()):
        return False

    def load(bid: int) -> tuple[float, float, float]:
        """Total mass and combined x-y center of mass of `bid` and its load."""
        m = scene.mass(bid, cfg.density)
        x, y, _ = scene.block(bid).centroid
        mx, my = m * x, m * y
        for child in carried[bid]:
            cm, cx, cy = load(child)
            m += cm
            mx += cm * cx
            my += cm * cy
        return m, mx / m, my / m

    for bid in scene.ids:
        _, x, y = load(bid)
        contact = below[bid][0]
        x0, x1 = _shrink(contact.x, cfg.stability_margin)
        y0, y1 = _shrink(contact.y, cfg.stability_margin)
        if not (x0 < x < x1 and y0 < y < y1):
            return False
    return True


def settle(scene: Scene, tol: float = 0.05) -> Scene:
    """Snap blocks vertically onto the highest surface just below them.

    Blocks are processed bottom-up so each one lands on already settled
    blocks. A block moves only if the surface lies within `tol` of its base.
    """
    table = table_box(scene.library)
    settled: dict[int, Box3] = {}
    moved = {}
    for block in sorted(scene.blocks, key=lambda b: (scene.box(b.id).bottom, b.id)):
        box = scene.box(block.id)
        surface = table.top
        for other in settled.values():
            if _patch(box, other) is None:
                continue
            if other.top <= box.bottom + tol and other.top > surface:
                surface = other.top
        shift = surface - box.bottom
        if abs(shift) <= tol and shift != 0.0:
            x, y, z = block.centroid
            block = block.moved((x, y, z + shift))
        moved[block.id] = block
        settled[block.id] = scene.with_blocks([block]).box(block.id)
    return scene.with_blocks([moved[b.id] for b in scene.blocks])


def report_to_dict(report: StabilityReport, scene: Scene | None = None) -> dict[str, Any]:
    data: dict[str, Any] = {
        "feasible": report.feasible,
        "survivors": sorted(report.survivors),
        "unsupported": report.unsupported,
        "contacts": [
            {
                "upper_id": c.upper_id,
                "lower_id": c.lower_id,
                "x": list(c.x),
                "y": list(c.y),
                "z": c.z,
                "forces": report.forces.get(i),
            }
            for i, c in enumerate(report.contacts)
        ],
    }
    if scene is not None:
        data["surviving_fraction"] = (
            len(report.survivors) / len(scene.blocks) if scene.blocks else 1.0
        )
    return data
