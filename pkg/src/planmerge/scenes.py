"""Planning samples: one ego agent plus masked surrounding agents.

Coordinates are ego-centric: every array in a scene is translated so the ego's
last observed position sits at the origin. Surrounding-agent arrays are padded
to a fixed row count with ``agent_mask`` marking the valid rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError


@dataclass
class Scene:
    """One planning sample.

    ``surr_future_pred`` starts out ``None`` and is filled by the forecaster
    before the planner may consume the scene.
    """

    ego_past: np.ndarray          # (t_obs, 2)
    surr_past: np.ndarray         # (max_agents, t_obs, 2)
    surr_future_gt: np.ndarray    # (max_agents, t_fut, 2)
    ego_future_gt: np.ndarray     # (t_fut, 2)
    agent_mask: np.ndarray        # (max_agents,) bool
    surr_future_pred: np.ndarray | None = field(default=None)

    def n_valid(self) -> int:
        return int(self.agent_mask.sum())


def validate_scene(scene: Scene, t_obs: int, t_fut: int, max_agents: int) -> None:
    """Raise :class:`InputError` on any shape/finiteness violation."""
    checks = [
        ("ego_past", scene.ego_past, (t_obs, 2)),
        ("surr_past", scene.surr_past, (max_agents, t_obs, 2)),
        ("surr_future_gt", scene.surr_future_gt, (max_agents, t_fut, 2)),
        ("ego_future_gt", scene.ego_future_gt, (t_fut, 2)),
    ]
    for name, arr, shape in checks:
        arr = np.asarray(arr)
        if arr.shape != shape:
            raise InputError(f"{name}: expected shape {shape}, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InputError(f"{name}: contains NaN/Inf")
    if np.asarray(scene.agent_mask).shape != (max_agents,):
        raise InputError(f"agent_mask: expected shape ({max_agents},)")
    if not np.allclose(scene.ego_past[-1], 0.0, atol=1e-9):
        raise InputError("scene is not ego-centric: ego_past[-1] != (0, 0)")


@dataclass(frozen=True)
class SceneBatch:
    """Stacked scene arrays for vectorized forward/backward passes."""

    ego_past: np.ndarray        # (B, t_obs, 2)
    surr_past: np.ndarray       # (B, M, t_obs, 2)
    surr_future_gt: np.ndarray  # (B, M, t_fut, 2)
    ego_future_gt: np.ndarray   # (B, t_fut, 2)
    agent_mask: np.ndarray      # (B, M) bool

    @property
    def size(self) -> int:
        return self.ego_past.shape[0]

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene]) -> "SceneBatch":
        if len(scenes) == 0:
            raise InputError("empty scene batch")
        shapes = {s.surr_past.shape for s in scenes}
        if len(shapes) != 1:
            raise InputError(f"scenes disagree on padded agent shape: {shapes}")
        return cls(
            ego_past=np.stack([s.ego_past for s in scenes]).astype(np.float64),
            surr_past=np.stack([s.surr_past for s in scenes]).astype(np.float64),
            surr_future_gt=np.stack([s.surr_future_gt for s in scenes]).astype(np.float64),
            ego_future_gt=np.stack([s.ego_future_gt for s in scenes]).astype(np.float64),
            agent_mask=np.stack([s.agent_mask for s in scenes]).astype(bool),
        )


_SCENE_FIELDS = ("ego_past", "surr_past", "surr_future_gt", "ego_future_gt", "agent_mask")


def scene_to_json(scene: Scene) -> str:
    """One-line JSON record; floats round-trip exactly via repr."""
    record = {
        "ego_past": scene.ego_past.tolist(),
        "surr_past": scene.surr_past.tolist(),
        "surr_future_gt": scene.surr_future_gt.tolist(),
        "ego_future_gt": scene.ego_future_gt.tolist(),
        "agent_mask": [bool(m) for m in scene.agent_mask],
    }
    return json.dumps(record, separators=(",", ":"))


def scene_from_json(line: str) -> Scene:
    obj = json.loads(line)
    missing = [f for f in _SCENE_FIELDS if f not in obj]
    if missing:
        raise InputError(f"scene record is missing fields: {missing}")
    return Scene(
        ego_past=np.asarray(obj["ego_past"], dtype=np.float64),
        surr_past=np.asarray(obj["surr_past"], dtype=np.float64),
        surr_future_gt=np.asarray(obj["surr_future_gt"], dtype=np.float64),
        ego_future_gt=np.asarray(obj["ego_future_gt"], dtype=np.float64),
        agent_mask=np.asarray(obj["agent_mask"], dtype=bool),
    )


def scenes_to_jsonl(scenes: Iterable[Scene]) -> str:
    return "".join(scene_to_json(s) + "\n" for s in scenes)


def scenes_from_jsonl(text: str) -> list[Scene]:
    return [scene_from_json(line) for line in text.splitlines() if line.strip()]
