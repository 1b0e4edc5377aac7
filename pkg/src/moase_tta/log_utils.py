"""Logging helpers for moase_tta."""

from __future__ import annotations

import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

DEFAULT_LOG_PATH = Path(
    os.environ.get("MOASE_TTA_LOG_PATH", Path.home() / ".cache" / "moase_tta" / "moase_tta.log")
)


def ensure_log_path(log_path: Path) -> Path:
    """Ensure the log directory exists and return the usable path."""
    log_path.parent.mkdir(parents=True, exist_ok=True)
    if not log_path.exists():
        log_path.touch()
    return log_path


def write_log(message: str, log_path: Path = DEFAULT_LOG_PATH) -> None:
    """Append `message` to the log with a UTC timestamp."""
    timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")
    path = ensure_log_path(log_path)
    with path.open("a", encoding="utf-8", errors="ignore") as fp:
        fp.write(f"{timestamp} {message}\n")


def format_fields(**fields: Any) -> str:
    """Render keyword fields as `key=value` pairs in insertion order."""
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    return " ".join(parts)


def log_event(event: str, log_path: Path = DEFAULT_LOG_PATH, **fields: Any) -> None:
    """Write `event key=value ...` to the log."""
    suffix = format_fields(**fields)
    write_log(f"{event} {suffix}" if suffix else event, log_path)
