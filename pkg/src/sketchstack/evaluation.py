"""Benchmark corpus, paired evaluation and goal-pose export.

The evaluation corpus is generated, not stored: case i is the structure
built from seed base_seed + i, rendered to a front-view sketch. Each case
is grounded twice under the same sampler seed, once with hidden-support
repair and once without, and the results are split by whether the visible
blocks alone can stand.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from sketchstack import config as config_mod
from sketchstack import utils
from sketchstack.core import BlockLibrary, Scene
from sketchstack.datagen import (
    GenConfig,
    RenderConfig,
    generate_structures,
    render_frontview_sketch,
)
from sketchstack.diffusion import DenoiserModel
from sketchstack.grounding import GroundingConfig, ablation_iterate, ground_iterate
from sketchstack.relations import RelationGraph, extract_frontview_graph
from sketchstack.sampler import SamplerConfig
from sketchstack.stability import check_equilibrium

logger = logging.getLogger(__name__)


class IoError(OSError):
    """Raised when an output file cannot be written."""

    pass


@dataclass(frozen=True)
class EvalConfig:
    cases: int = 15
    levels: tuple[int, ...] = (1, 2, 3)
    base_seed: int = 1000

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "EvalConfig":
        section = config_mod.section(config, "eval")
        return cls(
            cases=int(section.get("cases", 15)),
            levels=tuple(int(v) for v in section.get("levels", (1, 2, 3))),
            base_seed=int(section.get("base_seed", 1000)),
        )


@dataclass(frozen=True)
class CorpusCase:
    index: int
    seed: int
    levels: int
    scene: Scene
    sketch_graph: RelationGraph
    requires_hidden: bool


@dataclass
class CaseResult:
    index: int
    seed: int
    levels: int
    requires_hidden: bool
    resemblance: float
    surviving_fraction: float
    ablation_resemblance: float
    ablation_surviving_fraction: float
    hidden_added: int
    iterations: int


@dataclass
class EvalSummary:
    cases: list[CaseResult]
    aggregate: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "aggregate": self.aggregate,
            "cases": [asdict(c) for c in self.cases],
        }


def build_corpus(
    cfg: EvalConfig,
    lib: BlockLibrary,
    gen_cfg: GenConfig | None = None,
    render_cfg: RenderConfig | None = None,
    workers: int = 1,
) -> list[CorpusCase]:
    """Generate, render and extract the sketch graph of every corpus case.

    A case requires hidden support when its visible blocks alone are not
    in equilibrium.
    """
    gen_cfg = gen_cfg or GenConfig()
    structures = generate_structures(cfg.cases, cfg.base_seed, cfg.levels, lib, gen_cfg, workers)
    corpus = []
    for index, structure in enumerate(structures):
        render = render_frontview_sketch(structure.scene, render_cfg)
        visible = structure.scene.subset(b.id for b in render.sketch.boxes)
        requires_hidden = not check_equilibrium(visible, gen_cfg.stability).feasible
        graph = extract_frontview_graph(render.sketch, gen_cfg.classifier, gen_cfg.bounds)
        corpus.append(
            CorpusCase(
                index,
                structure.seed,
                structure.levels,
                visible,
                graph,
                requires_hidden,
            )
        )
    logger.info(
        "corpus: %d case(s), %d requiring hidden support",
        len(corpus),
        sum(c.requires_hidden for c in corpus),
    )
    return corpus


def run_case(
    case: CorpusCase,
    models: dict[str, DenoiserModel],
    cfg: GroundingConfig,
    sampler: SamplerConfig,
    lib: BlockLibrary,
) -> CaseResult:
    """Ground one case with and without repair under the same sampler seed."""
    paired = replace(sampler, seed=sampler.seed + case.seed)
    full = ground_iterate(case.sketch_graph, models, cfg, paired, lib)
    ablation = ablation_iterate(case.sketch_graph, models, cfg, paired, lib)
    return CaseResult(
        index=case.index,
        seed=case.seed,
        levels=case.levels,
        requires_hidden=case.requires_hidden,
        resemblance=full.resemblance,
        surviving_fraction=full.surviving_fraction,
        ablation_resemblance=ablation.resemblance,
        ablation_surviving_fraction=ablation.surviving_fraction,
        hidden_added=len(full.hidden_ids),
        iterations=full.iterations,
    )


def _run_case_job(args: tuple) -> CaseResult:
    return run_case(*args)


def _cell(values: list[float]) -> dict[str, float]:
    if not values:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(values)}


def summarize(cases: list[CaseResult], config_hash: str = "") -> EvalSummary:
    """Mean and population std per (split, method, metric).

    Splits are "with_hidden" and "without_hidden"; methods are "full" and
    "ablation". Every aggregate is recomputable from the per-case values.
    """
    aggregate: dict[str, dict[str, dict[str, float]]] = {}
    for split, wanted in (("with_hidden", True), ("without_hidden", False)):
        chosen = [c for c in cases if c.requires_hidden == wanted]
        aggregate[split] = {
            "full": {
                "resemblance": _cell([c.resemblance for c in chosen]),
                "surviving_fraction": _cell([c.surviving_fraction for c in chosen]),
            },
            "ablation": {
                "resemblance": _cell([c.ablation_resemblance for c in chosen]),
                "surviving_fraction": _cell([c.ablation_surviving_fraction for c in chosen]),
            },
        }
    return EvalSummary(sorted(cases, key=lambda c: c.index), aggregate, config_hash)


def evaluate_corpus(
    corpus: list[CorpusCase],
    models: dict[str, DenoiserModel],
    cfg: GroundingConfig,
    sampler: SamplerConfig,
    lib: BlockLibrary,
    workers: int = 1,
    config_hash: str = "",
) -> EvalSummary:
    """Run every corpus case and aggregate the results."""
    jobs = [(case, models, cfg, sampler, lib) for case in corpus]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_case_job, jobs))
    else:
        results = [_run_case_job(job) for job in jobs]
    return summarize(results, config_hash)


def save_summary(summary: EvalSummary, path: Path) -> None:
    try:
        utils.atomic_write_text(Path(path), json.dumps(summary.to_dict(), indent=2) + "\n")
    except OSError as e:
        raise IoError(f"Cannot write evaluation summary {path}: {e}") from e


def goal_poses(scene: Scene) -> list[dict[str, Any]]:
    """Blocks in placement order: lower bases first, ties by x, y, then id."""
    order = sorted(
        scene.blocks,
        key=lambda b: (scene.box(b.id).bottom, b.centroid[0], b.centroid[1], b.id),
    )
    return [
        {
            "index": i,
            "type": scene.library.get(b.type_id).name,
            "centroid": list(b.centroid),
        }
        for i, b in enumerate(order)
    ]


def export_goal_poses(scene: Scene, path: Path) -> None:
    """Write goal poses as newline-delimited JSON; orientation is identity.

    Raises:
        IoError: If the file cannot be written
    """
    lines = "".join(json.dumps(record) + "\n" for record in goal_poses(scene))
    try:
        utils.atomic_write_text(Path(path), lines)
    except OSError as e:
        raise IoError(f"Cannot write goal poses {path}: {e}") from e
