"""Tests for core module."""

import json

import numpy as np
import pytest

from sketchstack.core import (
    DEFAULT_BOUNDS,
    TABLE_ID,
    BlockInstance,
    BlockLibrary,
    BlockType,
    Box3,
    LibraryError,
    Scene,
    ValidationError,
    aabb,
    denormalize_xyz,
    library_from_list,
    library_to_list,
    load_scene,
    normalize_xyz,
    overlap_volume,
    save_scene,
    table_box,
    validate_scene,
)
from tests.conftest import BEAM, CUBE, PILLAR


class TestBox3:
    """Tests for Box3."""

    def test_from_center(self):
        """Should span center ± dims/2 on every axis."""
        box = Box3.from_center((1.0, 0.0, 0.5), (0.4, 0.2, 1.0))
        assert box.left == pytest.approx(0.8)
        assert box.right == pytest.approx(1.2)
        assert box.front == pytest.approx(-0.1)
        assert box.back == pytest.approx(0.1)
        assert box.bottom == pytest.approx(0.0)
        assert box.top == pytest.approx(1.0)
        assert box.volume == pytest.approx(0.08)

    def test_contains(self):
        """Should contain boxes inside it and reject boxes poking out."""
        outer = Box3((0, 0, 0), (1, 1, 1))
        assert outer.contains(Box3((0.2, 0.2, 0.2), (0.8, 0.8, 0.8)))
        assert not outer.contains(Box3((0.2, 0.2, 0.2), (1.1, 0.8, 0.8)))

    def test_overlap_volume_touching_is_zero(self):
        """Should report zero overlap for boxes sharing only a face."""
        a = Box3((0, 0, 0), (1, 1, 1))
        b = Box3((1, 0, 0), (2, 1, 1))
        assert overlap_volume(a, b) == 0.0
        assert overlap_volume(a, Box3((0.5, 0.5, 0.5), (1.5, 1.5, 1.5))) == pytest.approx(0.125)


class TestLibrary:
    """Tests for BlockLibrary and block types."""

    def test_default_library_has_table_first(self, lib):
        """Should put the table at index 0 with eight placeable types."""
        assert lib.table.name == "type_0_block"
        assert len(lib.block_types) == 8
        assert lib.by_name("type_2_block").dims == (0.2, 0.2, 0.6)

    def test_non_positive_dims_rejected(self):
        """Should reject zero or negative block sizes."""
        with pytest.raises(LibraryError, match="non-positive"):
            BlockType(1, "flat", (0.2, 0.0, 0.2))

    def test_duplicate_names_rejected(self):
        """Should reject two types sharing a name."""
        with pytest.raises(LibraryError, match="Duplicate block type names"):
            BlockLibrary((BlockType(0, "a", (3, 2, 0.1)), BlockType(1, "a", (1, 1, 1))))

    def test_unknown_type_id(self, lib):
        """Should raise LibraryError for an unknown type id."""
        with pytest.raises(LibraryError, match="Unknown block type id"):
            lib.get(42)

    def test_list_conversion(self, lib):
        """Should rebuild the same library from its list form."""
        assert library_from_list(library_to_list(lib)) == lib

    def test_malformed_list_entry(self):
        """Should raise LibraryError for a record without dims."""
        with pytest.raises(LibraryError, match="Malformed"):
            library_from_list([{"id": 0, "name": "table"}])

    def test_small_table_rejected_by_scene(self):
        """Should refuse a table that does not cover the workspace footprint."""
        small = BlockLibrary((BlockType(0, "table", (1.0, 1.0, 0.1)),))
        with pytest.raises(LibraryError, match="does not enclose"):
            Scene(small)


class TestScene:
    """Tests for Scene."""

    def test_table_box_top_at_zero(self, lib):
        """Should place the table's top face at z=0."""
        assert table_box(lib).top == pytest.approx(0.0)

    def test_table_block(self, bridge):
        """Should expose the table as block TABLE_ID."""
        assert bridge.block(TABLE_ID).id == TABLE_ID
        assert bridge.box(TABLE_ID).top == pytest.approx(0.0)

    def test_duplicate_ids_rejected(self, lib, place):
        """Should refuse two blocks with the same id."""
        with pytest.raises(ValidationError, match="Duplicate block ids"):
            Scene(lib, (place(0, CUBE, 0.0, 0.0), place(0, CUBE, 0.5, 0.0)))

    def test_reserved_table_id_rejected(self, lib):
        """Should refuse a block using the table id."""
        with pytest.raises(ValidationError, match="reserved"):
            Scene(lib, (BlockInstance(TABLE_ID, CUBE, (0, 0, 0.1)),))

    def test_subset_and_next_id(self, bridge):
        """Should keep only the requested blocks and allocate fresh ids."""
        sub = bridge.subset([0, 2])
        assert sub.ids == [0, 2]
        assert bridge.next_id() == 3

    def test_visible_skips_hidden(self, lib, place):
        """Should list only blocks not flagged hidden."""
        scene = Scene(lib, (place(0, CUBE, 0.0, 0.0), place(1, CUBE, 0.5, 0.0, hidden=True)))
        assert [b.id for b in scene.visible()] == [0]

    def test_mass_scales_with_volume(self, bridge):
        """Should weigh a block as volume times density."""
        assert bridge.mass(2) == pytest.approx(0.8 * 0.4 * 0.2)
        assert bridge.mass(2, density=2.0) == pytest.approx(2 * 0.8 * 0.4 * 0.2)

    def test_aabb(self, lib, place):
        """Should put a placed block's base at its requested height."""
        box = aabb(place(0, BEAM, 0.0, 0.6), lib)
        assert box.bottom == pytest.approx(0.6)
        assert box.top == pytest.approx(0.8)


class TestValidateScene:
    """Tests for validate_scene."""

    def test_valid_bridge(self, bridge):
        """Should find nothing wrong with a resting bridge."""
        assert validate_scene(bridge) == []

    def test_interpenetration(self, make_scene, place):
        """Should report overlapping blocks."""
        scene = make_scene(place(0, CUBE, 0.0, 0.0), place(1, CUBE, 0.1, 0.0))
        kinds = [v.kind for v in validate_scene(scene)]
        assert kinds == ["interpenetration"]

    def test_below_table(self, make_scene):
        """Should report blocks sunk into the table."""
        scene = make_scene(BlockInstance(0, CUBE, (0.0, 0.0, 0.05)))
        assert [v.kind for v in validate_scene(scene)] == ["below-table"]

    def test_out_of_bounds(self, make_scene, place):
        """Should report blocks leaving the workspace."""
        scene = make_scene(place(0, CUBE, 1.45, 0.0))
        assert [v.kind for v in validate_scene(scene)] == ["out-of-bounds"]

    def test_unknown_type(self, make_scene):
        """Should report unknown types instead of raising."""
        scene = make_scene(BlockInstance(0, 99, (0.0, 0.0, 0.1)))
        assert [v.kind for v in validate_scene(scene)] == ["unknown-type"]

    def test_tolerated_penetration(self, make_scene, place):
        """Should ignore overlaps below the penetration tolerance."""
        scene = make_scene(place(0, PILLAR, 0.0, 0.0), place(1, CUBE, 0.0, 0.599))
        assert validate_scene(scene, pen_tol=1e-4) == []
        assert validate_scene(scene, pen_tol=1e-6) != []


class TestNormalization:
    """Tests for model-unit normalization."""

    def test_round_trip(self):
        """Should invert normalization exactly."""
        values = [[0.3, -0.2, 1.1], [1.5, 1.0, 5.0]]
        np.testing.assert_allclose(denormalize_xyz(normalize_xyz(values)), values)
        assert normalize_xyz([1.5, 1.0, 2.5]).tolist() == [1.0, 1.0, 1.0]


class TestSceneFiles:
    """Tests for scene JSON files."""

    def test_save_and_load(self, tmp_path, bridge):
        """Should write a scene and read the same scene back."""
        path = tmp_path / "scene.json"
        save_scene(bridge, path, extra={"seed": 7})
        assert load_scene(path) == bridge
        assert json.loads(path.read_text())["seed"] == 7

    def test_missing_file(self, tmp_path):
        """Should raise FileNotFoundError for a missing scene."""
        with pytest.raises(FileNotFoundError):
            load_scene(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        """Should raise ValidationError for a file that is not JSON."""
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ValidationError, match="not valid JSON"):
            load_scene(path)

    def test_missing_fields(self, tmp_path):
        """Should raise ValidationError when blocks are missing."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"library": []}))
        with pytest.raises(ValidationError):
            load_scene(path)

    def test_default_bounds(self, tmp_path, lib):
        """Should fall back to the standard workspace without bounds."""
        path = tmp_path / "scene.json"
        path.write_text(json.dumps({"library": library_to_list(lib), "blocks": []}))
        assert load_scene(path).bounds == DEFAULT_BOUNDS
