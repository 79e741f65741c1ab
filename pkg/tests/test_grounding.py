"""Tests for grounding module."""

import numpy as np
import pytest

from sketchstack.config import ConfigError, default_config
from sketchstack.core import ValidationError
from sketchstack.diffusion import cosine_schedule
from sketchstack.grounding import (
    GroundingConfig,
    RepairAction,
    RepairExhausted,
    ablation_iterate,
    candidate_deltas,
    ground_iterate,
    repair_subgraph,
    trace_to_dict,
)
from sketchstack.patterns import PatternInstance, PatternType
from sketchstack.relations import (
    ClassifierConfig,
    GraphNode,
    RelationEdge,
    RelationGraph,
    RelationType,
    extract_frontview_graph,
    extract_scene_graph,
)
from sketchstack.sampler import SampleResult, SamplerConfig
from sketchstack.sketchio import Sketch, SketchBox
from sketchstack.stability import check_equilibrium
from tests.conftest import BRICK, CUBE, LARGE_CUBE, PILLAR, SLAB

R = RelationType
P = PatternType
SCHED = cosine_schedule(10)


class ScriptedSampler:
    """Stand-in for sample_composed that replays fixed poses.

    Call k uses rounds[k] (the last round once they run out); blocks a
    round does not name keep their fixed or warm pose.
    """

    def __init__(self, *rounds: dict):
        self.rounds = rounds
        self.calls: list[dict] = []

    def __call__(self, graph, models, sampler, library, bounds, fixed=None, warm=None, **kwargs):
        self.calls.append({"seed": sampler.seed, "fixed": fixed, "warm": warm})
        script = self.rounds[min(len(self.calls) - 1, len(self.rounds) - 1)]
        poses = {}
        for node in graph.nodes:
            for source in (script, fixed or {}, warm or {}):
                if node.id in source:
                    poses[node.id] = tuple(source[node.id])
                    break
        return SampleResult(poses, clamped=[])


def poses_of(scene) -> dict:
    return {b.id: b.centroid for b in scene.blocks}


def stack_graph() -> RelationGraph:
    nodes = (GraphNode(0, CUBE), GraphNode(1, CUBE))
    return RelationGraph(nodes, (RelationEdge(R.SUPPORTED_BY_FULLY, (1, 0)),))


@pytest.fixture
def stack(place, make_scene):
    return make_scene(place(0, CUBE, 0.0, 0.0), place(1, CUBE, 0.0, 0.2))


@pytest.fixture
def sampler_cfg() -> SamplerConfig:
    return SamplerConfig(SCHED, M=1, seed=10)


class TestGroundingConfig:
    """Tests for GroundingConfig."""

    def test_from_default_config(self):
        """Should read the grounding section."""
        cfg = GroundingConfig.from_config(default_config())
        assert (cfg.max_iters, cfg.repair_budget, cfg.settle_tol) == (5, 3, 0.05)

    def test_validation(self):
        """Should reject negative iteration counts and empty repair budgets."""
        with pytest.raises(ConfigError):
            GroundingConfig(max_iters=-1)
        with pytest.raises(ConfigError):
            GroundingConfig(repair_budget=0)


class TestCandidateDeltas:
    """Tests for candidate_deltas function."""

    def test_stack_rules_in_order(self, stack):
        """Should offer relaxing before promoting a single-block stack."""
        inst = PatternInstance(P.SINGLE_BLOCK_STACK, (0,), (1,))
        deltas = candidate_deltas(inst, stack, stack_graph())
        assert [d.rule.action for d in deltas] == [RepairAction.RELAX, RepairAction.PROMOTE]

        relax, promote = deltas
        assert relax.removed == (RelationEdge(R.SUPPORTED_BY_FULLY, (1, 0)),)
        assert relax.added == (RelationEdge(R.SUPPORTED_BY_PARTIALLY, (1, 0)),)
        assert relax.hidden_ids == []

        assert promote.rule.target == P.TWO_PILLAR_BRIDGE
        assert promote.hidden_ids == [2]
        assert promote.nodes[0].hidden
        assert promote.nodes[0].type_id == CUBE
        assert promote.placements[2] == pytest.approx((0.0, 0.24, 0.1))
        assert RelationEdge(R.SUPPORTED_BY_FULLY, (1, 2)) in promote.added
        assert RelationEdge(R.FRONT_OF, (0, 2)) in promote.added

    def test_hidden_block_clamped_to_workspace(self, place, make_scene):
        """Should pull a hidden block near the back wall inside the workspace."""
        scene = make_scene(place(0, CUBE, 0.0, 0.0, y=0.7), place(1, CUBE, 0.0, 0.2, y=0.7))
        inst = PatternInstance(P.SINGLE_BLOCK_STACK, (0,), (1,))
        deltas = candidate_deltas(inst, scene, stack_graph())
        assert [d.rule.action for d in deltas] == [RepairAction.RELAX, RepairAction.PROMOTE]
        promote = deltas[1]
        assert promote.placements[2] == pytest.approx((0.0, 0.9, 0.1))
        assert RelationEdge(R.NEAR_ALONG_Y, (0, 2)) in promote.added

    def test_clamped_hidden_block_collides(self, place, make_scene):
        """Should drop a promotion when clamping pushes the hidden block into its twin."""
        scene = make_scene(place(0, CUBE, 0.0, 0.0, y=0.85), place(1, CUBE, 0.0, 0.2, y=0.85))
        inst = PatternInstance(P.SINGLE_BLOCK_STACK, (0,), (1,))
        deltas = candidate_deltas(inst, scene, stack_graph())
        assert [d.rule.action for d in deltas] == [RepairAction.RELAX]

    def test_relaxation_needs_centre_of_mass_over_base(self, place, make_scene):
        """Should not relax into a cantilever whose top centroid hangs past the base."""
        scene = make_scene(place(0, CUBE, 0.0, 0.0), place(1, CUBE, 0.15, 0.2))
        inst = PatternInstance(P.SINGLE_BLOCK_STACK, (0,), (1,))
        deltas = candidate_deltas(inst, scene, stack_graph())
        assert [d.rule.action for d in deltas] == [RepairAction.PROMOTE]

    def test_hidden_block_collides(self, place, make_scene):
        """Should drop a promotion whose hidden block overlaps a scene block."""
        scene = make_scene(
            place(0, CUBE, 0.0, 0.0), place(1, CUBE, 0.0, 0.2), place(2, CUBE, 0.0, 0.0, y=0.24)
        )
        inst = PatternInstance(P.SINGLE_BLOCK_STACK, (0,), (1,))
        graph = stack_graph().with_nodes([GraphNode(2, CUBE)])
        deltas = candidate_deltas(inst, scene, graph)
        assert [d.rule.action for d in deltas] == [RepairAction.RELAX]

    def test_compact_bases_get_flush_twins(self, place, make_scene):
        """Should place one touching hidden block behind every compact base."""
        scene = make_scene(
            place(0, CUBE, -0.1, 0.0), place(1, CUBE, 0.1, 0.0), place(2, BRICK, 0.0, 0.2)
        )
        nodes = (GraphNode(0, CUBE), GraphNode(1, CUBE), GraphNode(2, BRICK))
        graph = RelationGraph(
            nodes,
            (
                RelationEdge(R.TOUCHING_ALONG_X, (0, 1)),
                RelationEdge(R.SUPPORTED_BY_FULLY, (2, 0)),
                RelationEdge(R.SUPPORTED_BY_FULLY, (2, 1)),
            ),
        )
        inst = PatternInstance(P.TWO_BASE_SINGLE, (0, 1), (2,))
        (delta,) = candidate_deltas(inst, scene, graph)
        assert delta.rule.target == P.N_BASE_SINGLE
        assert delta.hidden_ids == [3, 4]
        assert delta.placements[3] == pytest.approx((-0.1, 0.2, 0.1))
        assert delta.placements[4] == pytest.approx((0.1, 0.2, 0.1))
        assert RelationEdge(R.TOUCHING_ALONG_Y, (0, 3)) in delta.added

    def test_no_rule_for_pattern(self, bridge):
        """Should offer nothing for patterns without repair rules or unmatched instances."""
        graph = extract_scene_graph(bridge, ClassifierConfig())
        arc = PatternInstance(P.BASIC_ARC, (0, 1), (2,))
        assert candidate_deltas(arc, bridge, graph) == []
        assert candidate_deltas(PatternInstance(None, (0, 1), (2,)), bridge, graph) == []


class TestRepairSubgraph:
    """Tests for repair_subgraph function."""

    def test_first_applicable_rule(self, stack, overhang):
        """Should return the least invasive repair."""
        inst = PatternInstance(P.SINGLE_BLOCK_STACK, (0,), (1,))
        delta = repair_subgraph(inst, stack, check_equilibrium(overhang), stack_graph())
        assert delta.rule.action == RepairAction.RELAX
        assert delta.to_dict()["rule"] == (
            "single-block-stack -> cantilever-with-counterbalance (relax-relation)"
        )

    def test_stable_instance(self, stack):
        """Should refuse to repair a stable instance."""
        inst = PatternInstance(P.SINGLE_BLOCK_STACK, (0,), (1,))
        with pytest.raises(ValidationError, match="stable"):
            repair_subgraph(inst, stack, check_equilibrium(stack), stack_graph())

    def test_exhausted(self, bridge, overhang):
        """Should raise RepairExhausted when no rule applies."""
        graph = extract_scene_graph(bridge, ClassifierConfig())
        inst = PatternInstance(P.BASIC_ARC, (0, 1), (2,))
        with pytest.raises(RepairExhausted) as exc:
            repair_subgraph(inst, bridge, check_equilibrium(overhang), graph)
        assert exc.value.instance == inst


class TestGroundIterate:
    """Tests for ground_iterate and ablation_iterate."""

    def test_stable_first_try(self, bridge, lib, sampler_cfg, monkeypatch):
        """Should stop at the first iterate when the scene stands."""
        fake = ScriptedSampler(poses_of(bridge))
        monkeypatch.setattr("sketchstack.grounding.sample_composed", fake)
        graph = extract_scene_graph(bridge, ClassifierConfig())

        result = ground_iterate(graph, {}, GroundingConfig(), sampler_cfg, lib)
        assert result.success
        assert (result.iterations, result.best_iteration) == (1, 0)
        assert result.surviving_fraction == 1.0
        assert result.hidden_ids == []
        assert [c["seed"] for c in fake.calls] == [10]
        assert result.graph.stab_edges

    def test_empty_graph(self, lib, sampler_cfg):
        """Should ground an empty sketch to an empty scene."""
        result = ground_iterate(RelationGraph(), {}, GroundingConfig(), sampler_cfg, lib)
        assert result.success
        assert result.scene.blocks == ()
        assert result.iterations == 0

    def test_zero_iterations(self, overhang, lib, sampler_cfg, monkeypatch):
        """Should sample once and report failure without repairing."""
        fake = ScriptedSampler(poses_of(overhang))
        monkeypatch.setattr("sketchstack.grounding.sample_composed", fake)
        graph = extract_scene_graph(overhang, ClassifierConfig())

        result = ground_iterate(graph, {}, GroundingConfig(max_iters=0), sampler_cfg, lib)
        assert not result.success
        assert result.iterations == 1
        assert result.surviving_fraction == pytest.approx(0.5)
        assert len(fake.calls) == 1
        assert result.trace[0].applied == []

    def test_unrepairable_instance_recorded(self, overhang, lib, sampler_cfg, monkeypatch):
        """Should log instances no rule can fix and keep sampling."""
        fake = ScriptedSampler(poses_of(overhang))
        monkeypatch.setattr("sketchstack.grounding.sample_composed", fake)
        graph = extract_scene_graph(overhang, ClassifierConfig())

        result = ground_iterate(graph, {}, GroundingConfig(max_iters=1), sampler_cfg, lib)
        assert not result.success
        assert result.iterations == 2
        assert result.trace[0].exhausted == ["unmatched(base=[0], top=[1])"]
        assert [c["seed"] for c in fake.calls] == [10, 11]
        assert sorted(fake.calls[1]["warm"]) == [0, 1]

    def test_relaxation_repairs_stack(self, place, make_scene, lib, sampler_cfg, monkeypatch):
        """Should relax a toppling stack into a cantilever and then succeed."""
        leaning = make_scene(place(0, CUBE, 0.0, 0.0), place(1, LARGE_CUBE, 0.098, 0.2))
        centered = make_scene(place(0, CUBE, 0.0, 0.0), place(1, LARGE_CUBE, 0.0, 0.2))
        assert not check_equilibrium(leaning).feasible
        fake = ScriptedSampler(poses_of(leaning), poses_of(centered))
        monkeypatch.setattr("sketchstack.grounding.sample_composed", fake)
        graph = extract_scene_graph(leaning, ClassifierConfig())

        result = ground_iterate(graph, {}, GroundingConfig(), sampler_cfg, lib)
        assert result.success
        assert (result.iterations, result.best_iteration) == (2, 1)
        (applied,) = result.trace[0].applied
        assert applied["rule"].startswith("single-block-stack -> cantilever")
        assert result.graph.has(R.SUPPORTED_BY_PARTIALLY, (1, 0))
        assert not result.graph.has(R.SUPPORTED_BY_FULLY, (1, 0))
        assert result.hidden_ids == []

    def test_ablation_only_resamples(self, place, make_scene, lib, sampler_cfg, monkeypatch):
        """Should leave the graph alone and pick the best iterate."""
        leaning = make_scene(place(0, CUBE, 0.0, 0.0), place(1, LARGE_CUBE, 0.098, 0.2))
        fake = ScriptedSampler(poses_of(leaning))
        monkeypatch.setattr("sketchstack.grounding.sample_composed", fake)
        graph = extract_scene_graph(leaning, ClassifierConfig())

        result = ablation_iterate(graph, {}, GroundingConfig(max_iters=2), sampler_cfg, lib)
        assert not result.success
        assert result.iterations == 3
        assert result.best_iteration == 0
        assert all(r.applied == [] for r in result.trace)
        assert result.graph.has(R.SUPPORTED_BY_FULLY, (1, 0))
        assert [c["seed"] for c in fake.calls] == [10, 11, 12]

    def test_trace_to_dict(self, bridge, lib, sampler_cfg, monkeypatch):
        """Should serialize the result with its per-iteration records."""
        monkeypatch.setattr(
            "sketchstack.grounding.sample_composed", ScriptedSampler(poses_of(bridge))
        )
        graph = extract_scene_graph(bridge, ClassifierConfig())
        data = trace_to_dict(ground_iterate(graph, {}, GroundingConfig(), sampler_cfg, lib))
        assert data["success"] is True
        assert data["trace"][0]["seed"] == 10
        assert data["trace"][0]["feasible"] is True
        assert {i["pattern"] for i in data["trace"][0]["instances"]} == {
            P.TWO_PILLAR_BRIDGE.value
        }


class TestHiddenSupportRuns:
    """Paired runs with and without repair on a sketch that needs a rear pillar."""

    @pytest.fixture
    def pillar_and_slab(self, lib):
        """Front view of a slab on one pillar; in 3D the slab also rests on a pillar behind."""
        sketch = Sketch(
            (SketchBox(0, PILLAR, 0.0, 0.3, 0.2, 0.6), SketchBox(1, SLAB, 0.0, 0.7, 0.6, 0.2)),
            lib,
        )
        return extract_frontview_graph(sketch, ClassifierConfig())

    def test_construction_needs_hidden_pillar(self, place, make_scene):
        """Should fall without the rear pillar and stand with it."""
        visible = (place(0, PILLAR, 0.0, 0.0), place(1, SLAB, 0.0, 0.6, y=0.2))
        rear = place(2, PILLAR, 0.0, 0.0, y=0.4, hidden=True)
        assert not check_equilibrium(make_scene(*visible)).feasible
        assert check_equilibrium(make_scene(*visible, rear)).feasible

    @pytest.mark.slow
    def test_repair_beats_resampling(self, pillar_and_slab, trained_models, lib):
        """Should stand on nearly every seed and survive better than re-sampling alone."""
        sched = cosine_schedule(next(iter(trained_models.values())).arch.steps_T)
        cfg = GroundingConfig(max_iters=5)
        full, ablation = [], []
        for seed in range(20):
            sampler = SamplerConfig(sched, M=2, seed=seed)
            full.append(ground_iterate(pillar_and_slab, trained_models, cfg, sampler, lib))
            ablation.append(ablation_iterate(pillar_and_slab, trained_models, cfg, sampler, lib))

        assert sum(r.success for r in full) >= 19

        full_mean = np.mean([r.surviving_fraction for r in full])
        ablation_mean = np.mean([r.surviving_fraction for r in ablation])
        assert ablation_mean <= full_mean
        if not all(r.success for r in ablation):
            assert ablation_mean < full_mean
