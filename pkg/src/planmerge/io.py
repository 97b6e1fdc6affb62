"""Atomic file writes, content hashing, and delimited-table helpers."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via temp-file-then-rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def short_hash(obj) -> str:
    """12-hex content hash of a JSON-serializable object."""
    return sha256_hex(canonical_json(obj).encode("utf-8"))[:12]


def fingerprint_paths(root: Path, paths: Iterable[Path]) -> str:
    """Content hash over (relative path, bytes) pairs, order-independent."""
    items = sorted((str(p.relative_to(root)), sha256_hex(p.read_bytes())) for p in paths)
    return sha256_hex(canonical_json(items).encode("utf-8"))[:12]


def fmt_float(x: float) -> str:
    return f"{x:.6g}"


def write_table(
    path: str | Path,
    header: Sequence[str],
    rows: Iterable[Sequence],
    comment: str | None = None,
) -> None:
    """Comma-separated table; optional single '#' comment line before the header."""
    lines = []
    if comment is not None:
        lines.append("# " + comment)
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(fmt_float(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_table(path: str | Path) -> tuple[str | None, list[str], list[list[str]]]:
    """Read a table written by :func:`write_table`; returns (comment, header, rows)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    comment = None
    if lines and lines[0].startswith("#"):
        comment = lines[0][1:].strip()
        lines = lines[1:]
    if not lines:
        raise FormatError(f"{path}: empty table")
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:] if line.strip()]
    return comment, header, rows


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed derived from arbitrary labeled parts."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
