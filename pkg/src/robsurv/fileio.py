"""Atomic file writes so re-runs never leave partial outputs behind."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _atomic_write(path, data, mode: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_bytes(path, data: bytes) -> None:
    _atomic_write(path, data, "wb")


def atomic_text(path, text: str) -> None:
    _atomic_write(path, text, "w")
