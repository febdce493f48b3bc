"""File I/O utilities for stitchkit."""

import json
from pathlib import Path
from typing import Any, Optional

from ..exceptions import FileOperationError


def safe_read_file(file_path: Path) -> Optional[str]:
    """Safely read a text file and return its contents (None when absent)."""
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            return f.read()
    except FileNotFoundError:
        return None
    except Exception as e:
        raise FileOperationError(f"Failed to read file {file_path}: {e}")


def safe_read_bytes(file_path: Path) -> bytes:
    """Read a binary file; a missing file is an error."""
    try:
        return Path(file_path).read_bytes()
    except Exception as e:
        raise FileOperationError(f"Failed to read file {file_path}: {e}")


def safe_write_bytes(file_path: Path, content: bytes) -> None:
    """Write bytes atomically: temporary sibling file, then replace."""
    file_path = Path(file_path)
    try:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        temp_file = file_path.with_suffix(file_path.suffix + ".tmp")
        with open(temp_file, "wb") as f:
            f.write(content)
        temp_file.replace(file_path)
    except Exception as e:
        raise FileOperationError(f"Failed to write file {file_path}: {e}")


def safe_write_file(file_path: Path, content: str) -> None:
    """Safely write text content to a file."""
    safe_write_bytes(file_path, content.encode("utf-8"))


def write_json(file_path: Path, data: Any) -> None:
    """Write ``data`` as stable, indented JSON (sorted keys, trailing newline)."""
    safe_write_file(file_path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(file_path: Path) -> Any:
    text = safe_read_file(file_path)
    if text is None:
        raise FileOperationError(f"File not found: {file_path}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FileOperationError(f"Invalid JSON in {file_path}: {e}")


def ensure_directory_exists(dir_path: Path) -> Path:
    """Ensure a directory exists, creating it if necessary."""
    try:
        dir_path = Path(dir_path)
        dir_path.mkdir(parents=True, exist_ok=True)
        return dir_path
    except Exception as e:
        raise FileOperationError(f"Failed to create directory {dir_path}: {e}")
