"""Shared fixtures: the built-in library, small hand-built scenes and trained models.

Library shapes (w, l, h): 1 cube 0.2^3, 2 pillar 0.2x0.2x0.6, 3 brick
0.4x0.2x0.2, 4 beam 0.8x0.4x0.2, 5 plank 1.2x0.6x0.1, 6 slab 0.6x0.6x0.2,
7 deep slab 0.4x0.8x0.2, 8 large cube 0.4^3.
"""

import numpy as np
import pytest

from sketchstack.core import BlockInstance, BlockLibrary, Scene, default_library
from sketchstack.datagen import (
    extract_training_set,
    generate_structures,
    geom_dim_for,
    is_pattern_name,
    to_denoiser_data,
)
from sketchstack.diffusion import (
    ArchConfig,
    DenoiserModel,
    OptimConfig,
    cosine_schedule,
    train_denoiser,
)
from sketchstack.patterns import PatternType
from sketchstack.relations import RelationType

CUBE, PILLAR, BRICK, BEAM, PLANK, SLAB, DEEP_SLAB, LARGE_CUBE = range(1, 9)

# Settings for the statistical runs marked slow
TRAIN_T = 50
TRAIN_SCENES = 300
TRAIN_STEPS = 3000
MAX_SLOTS = 8


@pytest.fixture
def lib() -> BlockLibrary:
    return default_library()


@pytest.fixture
def place(lib):
    """Build a block from its type, x, y and base height."""

    def _place(
        block_id: int, type_id: int, x: float, bottom: float, y: float = 0.0, hidden: bool = False
    ) -> BlockInstance:
        h = lib.get(type_id).dims[2]
        return BlockInstance(block_id, type_id, (x, y, bottom + h / 2), hidden)

    return _place


@pytest.fixture
def make_scene(lib):
    def _make(*blocks: BlockInstance) -> Scene:
        return Scene(lib, tuple(blocks))

    return _make


@pytest.fixture
def bridge(place, make_scene) -> Scene:
    """Two pillars with a beam across them."""
    return make_scene(
        place(0, PILLAR, -0.3, 0.0),
        place(1, PILLAR, 0.3, 0.0),
        place(2, BEAM, 0.0, 0.6),
    )


@pytest.fixture
def tower(place, make_scene) -> Scene:
    """Three cubes stacked on top of each other."""
    return make_scene(
        place(0, CUBE, 0.0, 0.0),
        place(1, CUBE, 0.0, 0.2),
        place(2, CUBE, 0.0, 0.4),
    )


@pytest.fixture
def overhang(place, make_scene) -> Scene:
    """A brick resting mostly beside the cube below it."""
    return make_scene(
        place(0, CUBE, 0.0, 0.0),
        place(1, BRICK, 0.25, 0.2),
    )


@pytest.fixture(scope="session")
def trained_models() -> dict[str, DenoiserModel]:
    """One small model per relation or pattern, trained on generated structures.

    Names with too few samples in the generated set get no model.
    """
    lib = default_library()
    scenes = [s.scene for s in generate_structures(TRAIN_SCENES, 0, [1, 2, 3], lib)]
    sched = cosine_schedule(TRAIN_T)
    names = [r.value for r in RelationType] + [p.value for p in PatternType]
    models = {}
    for index, name in enumerate(names):
        arity = None if is_pattern_name(name) else RelationType(name).arity
        slots = arity or MAX_SLOTS
        samples = [s for s in extract_training_set(scenes, name) if len(s.operands) <= slots]
        if len(samples) < 16:
            continue
        arch = ArchConfig(
            mode="fixed" if arity else "variadic",
            slots=slots,
            geom_dim=geom_dim_for(name),
            hidden=64,
            time_hidden=128,
            steps_T=TRAIN_T,
        )
        opt = OptimConfig(steps=TRAIN_STEPS, batch_size=min(64, len(samples)), log_every=0)
        data = to_denoiser_data(samples, slots, geom_dim_for(name))
        rng = np.random.default_rng(index)
        models[name] = train_denoiser(data, arch, opt, sched, rng, name=name)
    return models
