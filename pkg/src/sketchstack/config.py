"""Configuration management for sketchstack.

Handles loading, saving and merging the YAML configuration file with the
built-in defaults, and derives the config hash embedded in every artifact.
Precedence is CLI flag > config file > built-in default.
"""

import copy
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any

import yaml
from packaging.version import InvalidVersion, Version

from sketchstack import __version__
from sketchstack.core import Box3, BlockLibrary, ValidationError, default_library, library_from_list

DEFAULTS: dict[str, Any] = {
    "version": __version__,
    "seed": 0,
    "workers": 1,
    "workspace": {"lo": [-1.5, -1.0, 0.0], "hi": [1.5, 1.0, 5.0]},
    "library": None,
    "classifier": {
        "eps": 0.02,
        "touch_eps": 0.02,
        "gap": 0.30,
        "d_near": 0.25,
        "alpha": 0.5,
        "beta": 0.5,
        "grid_reg_tol": 0.1,
        "fill_sparse": 0.90,
        "fill_compact": 0.95,
    },
    "stability": {
        "contact_tol": 0.02,
        "stability_margin": 0.005,
        "gravity": 9.81,
        "density": 1.0,
        "pen_tol": 1e-4,
    },
    "sketch": {"dilate_px": 2, "stroke_px": 1, "min_region_px": 4, "target_width": 3.0},
    "render": {"px_per_unit": 100, "pad_px": 10, "dilate_px": 1, "blur": 1.0},
    "datagen": {
        "scenes": 300,
        "levels": [1, 2, 3, 4],
        "samples_per_relation": 5000,
        "max_attempts": 200,
        "max_restarts": 20,
    },
    "diffusion": {
        "preset": "desk",
        "steps": 20000,
        "batch_size": 128,
        "lr": 1e-3,
        "heads": 4,
        "blocks": 2,
        "max_slots": 8,
        "position_encoding": True,
        "offset": 0.008,
        "log_every": 500,
    },
    "sampler": {
        "M": 5,
        "noise_mode": "diffusion",
        "reduction": "sum",
        "include_patterns": True,
        "warm_start": False,
        "weights": {},
    },
    "grounding": {"max_iters": 5, "repair_budget": 3, "settle_tol": 0.05},
    "eval": {"cases": 15, "levels": [1, 2, 3], "base_seed": 1000},
}


class ConfigError(ValidationError):
    """Raised when a configuration file or value is invalid."""

    pass


def get_config_path() -> Path:
    """Get the path to the default config file."""
    return Path.home() / ".sketchstack" / "config.yaml"


def default_config() -> dict[str, Any]:
    """Return a fresh copy of the built-in defaults."""
    return copy.deepcopy(DEFAULTS)


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Merge `override` into a copy of `base`, recursing into nested dicts."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def check_version(config: dict[str, Any]) -> None:
    """Reject configs written by a newer major version of sketchstack.

    Raises:
        ConfigError: If the version field is unparsable or from a newer major version
    """
    raw = config.get("version")
    if raw is None:
        return
    try:
        found = Version(str(raw))
    except InvalidVersion as e:
        raise ConfigError(f"Invalid config version '{raw}'") from e
    if found.major > Version(__version__).major:
        raise ConfigError(
            f"Config version {found} is newer than sketchstack {__version__}; upgrade sketchstack"
        )


def load_config(
    path: Path | None = None, overrides: dict[str, Any] | None = None
) -> dict[str, Any]:
    """Load the effective configuration.

    Reads the YAML file (explicit `path`, or the default location when it
    exists), deep-merges it over the defaults, then applies `overrides`.

    Args:
        path: Explicit config file; must exist when given
        overrides: Values from CLI flags, merged last

    Returns:
        Effective configuration dictionary

    Raises:
        FileNotFoundError: If an explicit config file doesn't exist
        ConfigError: If the file is empty, not a mapping, has unknown sections
            or a newer major version
    """
    config = default_config()

    config_path = Path(path) if path is not None else get_config_path()
    if path is not None and not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")

    if config_path.exists():
        with open(config_path) as f:
            data = yaml.safe_load(f)

        if data is None:
            raise ConfigError(f"Config file is empty or invalid: {config_path}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file must contain a YAML dictionary: {config_path}")

        unknown = sorted(set(data) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"Unknown config sections in {config_path}: {', '.join(unknown)}")

        check_version(data)
        config = deep_merge(config, data)

    if overrides:
        config = deep_merge(config, overrides)

    return config


def save_config(config: dict[str, Any], path: Path | None = None) -> None:
    """Save configuration to YAML file with atomic write.

    Uses atomic write (temp file + os.replace) to prevent corruption.
    Creates config directory if it doesn't exist.

    Args:
        config: Configuration dictionary to save
        path: Destination; defaults to get_config_path()
    """
    config_path = Path(path) if path is not None else get_config_path()

    config_path.parent.mkdir(parents=True, exist_ok=True)

    # Same directory keeps os.replace atomic
    fd, temp_path = tempfile.mkstemp(
        dir=config_path.parent, prefix=".config.", suffix=".yaml.tmp", text=True
    )

    try:
        with os.fdopen(fd, "w") as f:
            yaml.safe_dump(config, f, default_flow_style=False, sort_keys=False)
            f.flush()
            os.fsync(f.fileno())

        os.replace(temp_path, config_path)

        dir_fd = os.open(str(config_path.parent), os.O_RDONLY)
        try:
            os.fsync(dir_fd)
        finally:
            os.close(dir_fd)
    except Exception:
        Path(temp_path).unlink(missing_ok=True)
        raise


def config_hash(config: dict[str, Any]) -> str:
    """Short stable digest of the effective configuration."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def section(config: dict[str, Any], name: str) -> dict[str, Any]:
    """Return one config section, falling back to its defaults."""
    value = config.get(name)
    if value is None:
        return copy.deepcopy(DEFAULTS[name])
    if not isinstance(value, dict):
        raise ConfigError(f"Config section '{name}' must be a mapping")
    return value


def workspace_bounds(config: dict[str, Any]) -> Box3:
    """Workspace box from the `workspace` section."""
    ws = section(config, "workspace")
    try:
        lo = tuple(float(v) for v in ws["lo"])
        hi = tuple(float(v) for v in ws["hi"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid workspace section: {e}") from e
    if len(lo) != 3 or len(hi) != 3 or any(a >= b for a, b in zip(lo, hi, strict=True)):
        raise ConfigError(f"Invalid workspace bounds: lo={lo} hi={hi}")
    return Box3(lo, hi)


def library_from_config(config: dict[str, Any]) -> BlockLibrary:
    """The configured block library, or the built-in one when unset."""
    entries = config.get("library")
    if not entries:
        return default_library()
    if not isinstance(entries, list):
        raise ConfigError("Config 'library' must be a list of block types")
    return library_from_list(entries)
