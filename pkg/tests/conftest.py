"""Shared fixtures: a small planner, random scenes, finite-difference helpers."""

from __future__ import annotations

import numpy as np
import pytest

from planmerge.net import Planner, PlannerConfig
from planmerge.scenes import Scene


@pytest.fixture(scope="session")
def small_cfg() -> PlannerConfig:
    return PlannerConfig(t_obs=4, t_fut=3, hidden_dim=4, attn_dim=3, max_agents=3)


@pytest.fixture(scope="session")
def small_planner(small_cfg) -> Planner:
    return Planner(small_cfg)


def make_scene(rng: np.random.Generator, cfg: PlannerConfig, n_valid: int) -> Scene:
    """Random, well-conditioned scene with ``n_valid`` active agents."""
    M = cfg.max_agents
    ego_past = np.cumsum(rng.normal(0.0, 0.3, (cfg.t_obs, 2)), axis=0)
    ego_past -= ego_past[-1]
    scene = Scene(
        ego_past=ego_past,
        surr_past=rng.normal(0.0, 2.0, (M, cfg.t_obs, 2)),
        surr_future_gt=rng.normal(0.0, 2.0, (M, cfg.t_fut, 2)),
        ego_future_gt=np.cumsum(rng.normal(0.2, 0.3, (cfg.t_fut, 2)), axis=0),
        agent_mask=np.arange(M) < n_valid,
    )
    scene.surr_past[~scene.agent_mask] = 0.0
    scene.surr_future_gt[~scene.agent_mask] = 0.0
    return scene


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over every coordinate."""
    grad = np.zeros_like(x)
    for j in range(x.size):
        xp = x.copy()
        xp[j] += step
        xm = x.copy()
        xm[j] -= step
        grad[j] = (f(xp) - f(xm)) / (2.0 * step)
    return grad


def max_relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> float:
    """max_j |a-n| / max(|a|, |n|, floor); the floor absorbs dead coordinates."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())
