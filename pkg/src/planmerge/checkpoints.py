"""Checkpoints, the deduplicated checkpoint pool, and bit-exact serialization.

On-disk format: 4 magic bytes, u32 format version, u32 metadata length, a
UTF-8 JSON metadata block (provenance, metric snapshot, layout descriptor),
then the raw little-endian float64 payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, InputError, LayoutError
from .io import atomic_write_bytes, sha256_hex
from .metrics import MetricReport
from .params import GroupLayout, ParamVector

MAGIC = b"PMCK"
VERSION = 1


class Reason(str, Enum):
    BEST_ADE = "best_ade"
    BEST_FDE = "best_fde"
    BEST_CR = "best_cr"
    BEST_MR = "best_mr"
    INTERVAL = "interval"


BEST_REASONS = (Reason.BEST_ADE, Reason.BEST_FDE, Reason.BEST_CR, Reason.BEST_MR)
REASON_FOR_METRIC = {
    "ade": Reason.BEST_ADE,
    "fde": Reason.BEST_FDE,
    "collision_rate": Reason.BEST_CR,
    "miss_rate": Reason.BEST_MR,
}


class Stage(str, Enum):
    FORECASTER = "forecaster"
    PLANNER = "planner"


@dataclass(frozen=True)
class Checkpoint:
    """Parameter snapshot with provenance and the metric report at capture time."""

    params: ParamVector
    domain_id: str
    epoch: int
    reason: Reason
    stage: Stage
    metrics: MetricReport

    def __post_init__(self) -> None:
        if self.epoch < 1:
            raise InputError("checkpoint epoch must be >= 1")


@dataclass(frozen=True)
class CheckpointPool:
    """Shared base parameters plus deduplicated harvested checkpoints."""

    base: ParamVector
    entries: tuple[Checkpoint, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for entry in self.entries:
            if entry.params.layout != self.base.layout:
                raise LayoutError(f"checkpoint {entry.domain_id}/{entry.epoch} layout mismatch")
            digest = sha256_hex(entry.params.values.tobytes())
            if digest in seen:
                raise InputError("pool contains bit-identical checkpoints")
            seen.add(digest)

    @property
    def size(self) -> int:
        return len(self.entries)

    def domains(self) -> tuple[str, ...]:
        out: list[str] = []
        for entry in self.entries:
            if entry.domain_id not in out:
                out.append(entry.domain_id)
        return tuple(out)


def assemble_pool(base: ParamVector, candidates: Iterable[Checkpoint]) -> CheckpointPool:
    """Deduplicate by bitwise payload equality.

    A best-metric snapshot that coincides with an interval snapshot is stored
    once under the best-metric reason; among equal best-metric snapshots the
    first harvested wins.
    """
    kept: list[Checkpoint] = []
    index: dict[str, int] = {}
    for cand in candidates:
        digest = sha256_hex(cand.params.values.tobytes())
        if digest not in index:
            index[digest] = len(kept)
            kept.append(cand)
            continue
        pos = index[digest]
        if kept[pos].reason is Reason.INTERVAL and cand.reason is not Reason.INTERVAL:
            kept[pos] = cand
    return CheckpointPool(base=base, entries=tuple(kept))


def filter_pool(
    pool: CheckpointPool,
    all_metric: bool = True,
    epoch_planner: bool = True,
    epoch_forecaster: bool = True,
    planner_interval: int | None = None,
    forecaster_interval: int | None = None,
) -> CheckpointPool:
    """Select a pool composition without re-harvesting.

    Planner best-ADE checkpoints are always kept; ``all_metric`` adds the other
    per-metric bests, ``epoch_planner``/``epoch_forecaster`` add interval
    checkpoints of the respective stage. ``*_interval`` further restricts
    interval checkpoints to epochs divisible by the given interval, supporting
    interval sweeps over a pool harvested at a divisor interval.
    """
    kept = []
    for entry in pool.entries:
        if entry.stage is Stage.PLANNER:
            if entry.reason is Reason.BEST_ADE:
                kept.append(entry)
            elif entry.reason in BEST_REASONS:
                if all_metric:
                    kept.append(entry)
            elif epoch_planner and (planner_interval is None or entry.epoch % planner_interval == 0):
                kept.append(entry)
        else:
            if not epoch_forecaster:
                continue
            if entry.reason is not Reason.INTERVAL:
                kept.append(entry)
            elif forecaster_interval is None or entry.epoch % forecaster_interval == 0:
                kept.append(entry)
    return CheckpointPool(base=pool.base, entries=tuple(kept))


# ------------------------------------------------------------------- file io


def _pack(meta: dict, values: np.ndarray) -> bytes:
    meta_bytes = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    header = MAGIC + struct.pack("<II", VERSION, len(meta_bytes))
    payload = np.ascontiguousarray(values, dtype="<f8").tobytes()
    return header + meta_bytes + payload


def _unpack(data: bytes, path: str) -> tuple[dict, np.ndarray]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    version, meta_len = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if len(data) < 12 + meta_len:
        raise FormatError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(data[12 : 12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata block: {exc}") from exc
    layout = GroupLayout.from_json(meta["layout"])
    payload = data[12 + meta_len :]
    if len(payload) != 8 * layout.total_len:
        raise FormatError(
            f"{path}: payload holds {len(payload) // 8} values, "
            f"layout declares {layout.total_len}"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return meta, values


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = {
        "kind": "checkpoint",
        "domain_id": ckpt.domain_id,
        "epoch": ckpt.epoch,
        "reason": ckpt.reason.value,
        "stage": ckpt.stage.value,
        "metrics": ckpt.metrics.to_json(),
        "layout": ckpt.params.layout.to_json(),
    }
    atomic_write_bytes(path, _pack(meta, ckpt.params.values))


def load_checkpoint(path: str | Path) -> Checkpoint:
    meta, values = _unpack(Path(path).read_bytes(), str(path))
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path}: expected a checkpoint file, got kind={meta.get('kind')!r}")
    layout = GroupLayout.from_json(meta["layout"])
    return Checkpoint(
        params=ParamVector(values=values, layout=layout),
        domain_id=meta["domain_id"],
        epoch=int(meta["epoch"]),
        reason=Reason(meta["reason"]),
        stage=Stage(meta["stage"]),
        metrics=MetricReport.from_json(meta["metrics"]),
    )


def save_params(params: ParamVector, path: str | Path) -> None:
    meta = {"kind": "params", "layout": params.layout.to_json()}
    atomic_write_bytes(path, _pack(meta, params.values))


def load_params(path: str | Path) -> ParamVector:
    meta, values = _unpack(Path(path).read_bytes(), str(path))
    if meta.get("kind") != "params":
        raise FormatError(f"{path}: expected a bare parameter file, got kind={meta.get('kind')!r}")
    return ParamVector(values=values, layout=GroupLayout.from_json(meta["layout"]))


def _entry_filename(idx: int, ckpt: Checkpoint) -> str:
    tag = f"ep{ckpt.epoch:03d}" if ckpt.reason is Reason.INTERVAL else ckpt.reason.value
    return f"e{idx:03d}_{ckpt.domain_id}_{ckpt.stage.value}_{tag}.ckpt"


def save_pool(pool: CheckpointPool, pool_dir: str | Path, extra_meta: dict | None = None) -> None:
    """Persist base + entries + a JSON manifest (paths relative to the pool dir)."""
    pool_dir = Path(pool_dir)
    (pool_dir / "entries").mkdir(parents=True, exist_ok=True)
    save_params(pool.base, pool_dir / "base.ckpt")
    entries = []
    for idx, ckpt in enumerate(pool.entries):
        rel = f"entries/{_entry_filename(idx, ckpt)}"
        save_checkpoint(ckpt, pool_dir / rel)
        entries.append(
            {
                "path": rel,
                "domain_id": ckpt.domain_id,
                "epoch": ckpt.epoch,
                "reason": ckpt.reason.value,
                "stage": ckpt.stage.value,
            }
        )
    manifest = {"version": VERSION, "base": "base.ckpt", "entries": entries}
    manifest.update(extra_meta or {})
    atomic_write_bytes(pool_dir / "manifest.json", json.dumps(manifest, indent=1).encode("utf-8"))


def load_pool(pool_dir: str | Path) -> tuple[CheckpointPool, dict]:
    pool_dir = Path(pool_dir)
    manifest_path = pool_dir / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no pool manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    base = load_params(pool_dir / manifest["base"])
    entries = tuple(load_checkpoint(pool_dir / e["path"]) for e in manifest["entries"])
    return CheckpointPool(base=base, entries=entries), manifest
