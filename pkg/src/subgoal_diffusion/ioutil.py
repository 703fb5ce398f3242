"""Small shared IO helpers: canonical json, digests, jsonl files."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import DataError


def canonical_json(data) -> str:
    """Deterministic json encoding (sorted keys, no whitespace drift).

    Floats go through Python's repr, which round-trips exactly, so equal
    payloads digest equally across runs and platforms.
    """
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def stable_digest(data) -> str:
    """16-hex-char sha256 prefix of the canonical json encoding."""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:16]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec))
            fh.write("\n")


def read_jsonl(path) -> list:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: bad json line: {exc}") from exc
    return records


def write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: bad json: {exc}") from exc
