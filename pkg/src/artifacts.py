"""Artifact files: atomic writes and optional timestamp headers."""

from collections.abc import Iterable
from datetime import UTC, datetime
import logging
import os
from pathlib import Path
import tempfile

logger = logging.getLogger(__name__)


def timestamp_header() -> str:
    """Comment line recording when an artifact was produced."""
    return f"# generated {datetime.now(UTC).strftime('%Y-%m-%dT%H:%M:%SZ')}"


def write_lines_atomic(path: Path, lines: Iterable[str]) -> Path:
    """Write lines to a temp file next to ``path``, then rename over it.

    A failure part-way leaves no partial artifact behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            for line in lines:
                f.write(line)
                f.write("\n")
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    logger.info(f"Wrote {path}")
    return path
