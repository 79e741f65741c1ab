"""Utility functions for sketchstack.

Provides path helpers, atomic file writes, seeded random streams and
artifact-name validation shared by the pipeline modules.
"""

import os
import re
import tempfile
from pathlib import Path

import numpy as np


def expand_path(path: str | Path) -> Path:
    """Expand and resolve a path with ~ expansion.

    Args:
        path: Path string to expand

    Returns:
        Resolved Path object
    """
    return Path(path).expanduser().resolve()


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write bytes to a file atomically.

    Writes to a temp file in the destination directory, fsyncs it, then
    replaces the destination and fsyncs the parent directory.

    Args:
        path: Destination file
        data: File contents
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fd, temp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())

        os.replace(temp_path, path)

        dir_fd = os.open(str(path.parent), os.O_RDONLY)
        try:
            os.fsync(dir_fd)
        finally:
            os.close(dir_fd)
    except Exception:
        Path(temp_path).unlink(missing_ok=True)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    """Write UTF-8 text to a file atomically (see atomic_write_bytes)."""
    atomic_write_bytes(path, text.encode("utf-8"))


def rng_stream(base_seed: int, index: int = 0) -> np.random.Generator:
    """Return the random stream for job `index` of a run seeded with `base_seed`.

    Streams are reproducible per job: seed = base_seed + index.
    """
    return np.random.default_rng(int(base_seed) + int(index))


def validate_artifact_name(name: str) -> None:
    """Validate that a relation or pattern name is safe to use as a file stem.

    Names are kebab-case identifiers such as ``left-of`` or
    ``two-pillar-single-top-bridge``; anything else could escape the
    artifact directory.

    Args:
        name: Artifact name to validate

    Raises:
        ValueError: If the name is empty or contains invalid characters
    """
    if not name:
        raise ValueError("Invalid artifact name: cannot be empty")

    if not re.match(r"^[a-z0-9]+(-[a-z0-9]+)*$", name):
        raise ValueError(
            f"Invalid artifact name '{name}': must be lowercase words joined by single hyphens"
        )


def validate_path_safety(path: Path, base_dir: Path) -> None:
    """Validate that a path is safely contained within the base directory.

    Args:
        path: Path to validate
        base_dir: Base directory that should contain the path

    Raises:
        ValueError: If path is outside base directory or escapes via symlink
    """
    try:
        resolved_path = path.resolve()
        resolved_base = base_dir.resolve()

        if not resolved_path.is_relative_to(resolved_base):
            raise ValueError(f"Path is outside base directory: {path} not within {base_dir}")
    except (OSError, RuntimeError) as e:
        raise ValueError(f"Cannot validate path safety: {e}") from e


def artifact_path(base_dir: Path, name: str, suffix: str) -> Path:
    """Get the path of a per-relation artifact (dataset or checkpoint).

    Args:
        base_dir: Directory holding the artifacts
        name: Relation or pattern name
        suffix: File suffix including the dot, e.g. ".ckpt"

    Returns:
        Path to the artifact file

    Raises:
        ValueError: If name contains invalid characters
    """
    validate_artifact_name(name)

    path = base_dir / f"{name}{suffix}"

    validate_path_safety(path, base_dir)

    return path
