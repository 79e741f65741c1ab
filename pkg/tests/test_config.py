"""Tests for config module."""

import os

import pytest
import yaml

from sketchstack import __version__
from sketchstack.config import (
    ConfigError,
    config_hash,
    deep_merge,
    default_config,
    library_from_config,
    load_config,
    save_config,
    section,
    workspace_bounds,
)
from sketchstack.core import DEFAULT_BOUNDS, ValidationError


class TestLoadConfig:
    """Tests for load_config function."""

    def test_defaults_without_file(self, tmp_path, monkeypatch):
        """Should return the built-in defaults when no config file exists."""
        monkeypatch.setattr(
            "sketchstack.config.get_config_path", lambda: tmp_path / "missing.yaml"
        )
        assert load_config() == default_config()

    def test_explicit_missing_file(self, tmp_path):
        """Should raise FileNotFoundError for an explicit path that is missing."""
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "missing.yaml")

    def test_file_merged_over_defaults(self, tmp_path):
        """Should keep default keys the file does not set."""
        path = tmp_path / "config.yaml"
        path.write_text("seed: 11\ngrounding:\n  max_iters: 2\n")
        cfg = load_config(path)
        assert cfg["seed"] == 11
        assert cfg["grounding"]["max_iters"] == 2
        assert cfg["grounding"]["repair_budget"] == 3

    def test_overrides_win(self, tmp_path):
        """Should apply CLI overrides over the file."""
        path = tmp_path / "config.yaml"
        path.write_text("seed: 11\n")
        cfg = load_config(path, {"seed": 3, "diffusion": {"steps": 10}})
        assert cfg["seed"] == 3
        assert cfg["diffusion"]["steps"] == 10
        assert cfg["diffusion"]["batch_size"] == 128

    def test_empty_file(self, tmp_path):
        """Should raise ConfigError for an empty file."""
        path = tmp_path / "config.yaml"
        path.write_text("")
        with pytest.raises(ConfigError, match="empty or invalid"):
            load_config(path)

    def test_not_a_mapping(self, tmp_path):
        """Should raise ConfigError when the file is a list."""
        path = tmp_path / "config.yaml"
        path.write_text("- a\n- b\n")
        with pytest.raises(ConfigError, match="YAML dictionary"):
            load_config(path)

    def test_unknown_section(self, tmp_path):
        """Should reject unknown top-level sections."""
        path = tmp_path / "config.yaml"
        path.write_text("physics:\n  g: 9.8\n")
        with pytest.raises(ConfigError, match="Unknown config sections"):
            load_config(path)

    def test_newer_major_version(self, tmp_path):
        """Should reject configs from a newer major version."""
        path = tmp_path / "config.yaml"
        path.write_text("version: '99.0.0'\n")
        with pytest.raises(ConfigError, match="newer"):
            load_config(path)

    def test_invalid_version(self, tmp_path):
        """Should reject an unparsable version string."""
        path = tmp_path / "config.yaml"
        path.write_text("version: 'not a version'\n")
        with pytest.raises(ConfigError, match="Invalid config version"):
            load_config(path)

    def test_config_error_is_validation_error(self):
        """Should be catchable as a validation failure."""
        assert issubclass(ConfigError, ValidationError)


class TestSaveConfig:
    """Tests for save_config function."""

    def test_round_trip(self, tmp_path):
        """Should write YAML that loads back to the same config."""
        path = tmp_path / "sub" / "config.yaml"
        cfg = default_config()
        cfg["seed"] = 42
        save_config(cfg, path)
        assert load_config(path) == cfg
        assert yaml.safe_load(path.read_text())["version"] == __version__

    def test_default_location(self, tmp_path, monkeypatch):
        """Should write to get_config_path() when no path is given."""
        target = tmp_path / ".sketchstack" / "config.yaml"
        monkeypatch.setattr("sketchstack.config.get_config_path", lambda: target)
        save_config(default_config())
        assert target.exists()

    def test_failed_write_cleans_up(self, tmp_path, monkeypatch):
        """Should leave no temp file behind when the write fails."""
        path = tmp_path / "config.yaml"

        def fail(*args, **kwargs):
            raise OSError("read-only")

        monkeypatch.setattr("sketchstack.config.os.replace", fail)
        with pytest.raises(OSError):
            save_config(default_config(), path)
        assert os.listdir(tmp_path) == []


class TestDeepMerge:
    """Tests for deep_merge function."""

    def test_nested(self):
        """Should merge nested dicts without mutating the inputs."""
        base = {"a": {"x": 1, "y": 2}, "b": 1}
        override = {"a": {"y": 3}}
        merged = deep_merge(base, override)
        assert merged == {"a": {"x": 1, "y": 3}, "b": 1}
        assert base["a"]["y"] == 2

    def test_replaces_non_dicts(self):
        """Should replace lists and scalars wholesale."""
        assert deep_merge({"a": [1, 2]}, {"a": [3]}) == {"a": [3]}


class TestConfigHash:
    """Tests for config_hash function."""

    def test_stable_and_short(self):
        """Should give the same 12-character digest for equal configs."""
        a = config_hash(default_config())
        b = config_hash(default_config())
        assert a == b
        assert len(a) == 12

    def test_key_order_irrelevant(self):
        """Should ignore key insertion order."""
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})

    def test_changes_with_values(self):
        """Should change when any value changes."""
        cfg = default_config()
        other = deep_merge(cfg, {"seed": 1})
        assert config_hash(cfg) != config_hash(other)


class TestSections:
    """Tests for section helpers."""

    def test_missing_section_falls_back(self):
        """Should return the default section when the key is absent."""
        assert section({}, "grounding")["max_iters"] == 5

    def test_non_mapping_section(self):
        """Should reject a section that is not a mapping."""
        with pytest.raises(ConfigError, match="must be a mapping"):
            section({"grounding": 3}, "grounding")

    def test_workspace_bounds(self):
        """Should read the default workspace box."""
        assert workspace_bounds(default_config()) == DEFAULT_BOUNDS

    def test_inverted_workspace(self):
        """Should reject a workspace whose low corner is above its high corner."""
        cfg = deep_merge(default_config(), {"workspace": {"lo": [1, 0, 0], "hi": [0, 1, 1]}})
        with pytest.raises(ConfigError, match="Invalid workspace bounds"):
            workspace_bounds(cfg)

    def test_library_default_and_custom(self, lib):
        """Should use the built-in library unless one is configured."""
        assert library_from_config(default_config()) == lib
        cfg = deep_merge(
            default_config(),
            {
                "library": [
                    {"id": 0, "name": "table", "dims": [3, 2, 0.1]},
                    {"id": 1, "name": "cube", "dims": [0.1, 0.1, 0.1]},
                ]
            },
        )
        custom = library_from_config(cfg)
        assert [t.name for t in custom.types] == ["table", "cube"]
