"""Deterministic synthetic crowd domains for training and evaluation.

Each domain rolls out social-force-style agent dynamics at dt = 0.4 s and
slices the recorded tracks into scenes of 8 observed + 12 future steps,
ego-centric normalized. Regimes differ in who reacts to whom:

- ``reciprocal_avoid``: everyone repels everyone (robot-in-crowd style),
- ``patrol_ignore``:    the ego follows fixed waypoints and ignores agents,
  while agents still avoid the ego,
- ``mutual_yield``:     mutual repulsion plus mutual slow-down inside a yield
  radius scaled by ``interaction_gain``,
- ``indoor_slow`` / ``outdoor_fast``: reciprocal avoidance with regime speed
  factors (and typically obstacle boxes for the indoor case).

Rollouts draw from per-rollout counter-based Philox streams, so any scene is
reproducible in isolation and whole datasets are byte-identical per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InputError, SpecError
from .scenes import Scene

DT = 0.4
AGENT_RADIUS = 0.3
REP_STRENGTH = 3.0
REP_RANGE = 0.8
OBS_STRENGTH = 4.0
OBS_RANGE = 0.5
RELAX_TAU = 0.8
FORCE_CAP = 6.0
ARRIVE_RADIUS = 0.15
YIELD_RADIUS = 1.5
YIELD_SLOWDOWN = 0.45
ARENA = 9.0
ROLLOUT_STEPS = 26
WINDOW_STRIDE = 3
SPAWN_CLEARANCE = 1.0
OBSTACLE_MARGIN = 0.4

Box = tuple[float, float, float, float]  # (x0, y0, x1, y1)


class Regime(str, Enum):
    RECIPROCAL_AVOID = "reciprocal_avoid"
    PATROL_IGNORE = "patrol_ignore"
    INDOOR_SLOW = "indoor_slow"
    OUTDOOR_FAST = "outdoor_fast"
    MUTUAL_YIELD = "mutual_yield"


# Regimes with a designated robot ego; role rotation is not defined for them.
DESIGNATED_EGO_REGIMES = (Regime.PATROL_IGNORE, Regime.RECIPROCAL_AVOID)

SPEED_FACTOR = {
    Regime.INDOOR_SLOW: 0.55,
    Regime.OUTDOOR_FAST: 1.6,
}


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one synthetic domain."""

    name: str
    regime: Regime
    n_agents: tuple[int, int] = (2, 4)
    speed: tuple[float, float] = (0.8, 1.2)
    interaction_gain: float = 1.0
    obstacle_boxes: tuple[Box, ...] = ()
    noise_sigma: float = 0.0
    n_scenes: int = 200
    seed: int = 0
    rotate_roles: bool = False
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        if not (0 < self.speed[0] <= self.speed[1]):
            raise InputError(f"{self.name}: speed range must be positive")
        if self.n_scenes < 1:
            raise InputError(f"{self.name}: n_scenes must be >= 1")
        if not (0 <= self.n_agents[0] <= self.n_agents[1]):
            raise InputError(f"{self.name}: bad n_agents range")
        if self.interaction_gain < 0:
            raise InputError(f"{self.name}: interaction_gain must be >= 0")
        if not (0.0 < self.val_fraction < 1.0):
            raise InputError(f"{self.name}: val_fraction must be in (0, 1)")
        for box in self.obstacle_boxes:
            if not (box[0] < box[2] and box[1] < box[3]):
                raise InputError(f"{self.name}: malformed obstacle box {box}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "regime": self.regime.value,
            "n_agents": list(self.n_agents),
            "speed": list(self.speed),
            "interaction_gain": self.interaction_gain,
            "obstacle_boxes": [list(b) for b in self.obstacle_boxes],
            "noise_sigma": self.noise_sigma,
            "n_scenes": self.n_scenes,
            "seed": self.seed,
            "rotate_roles": self.rotate_roles,
            "val_fraction": self.val_fraction,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DomainSpec":
        return cls(
            name=obj["name"],
            regime=Regime(obj["regime"]),
            n_agents=tuple(obj.get("n_agents", (2, 4))),
            speed=tuple(obj.get("speed", (0.8, 1.2))),
            interaction_gain=float(obj.get("interaction_gain", 1.0)),
            obstacle_boxes=tuple(tuple(b) for b in obj.get("obstacle_boxes", ())),
            noise_sigma=float(obj.get("noise_sigma", 0.0)),
            n_scenes=int(obj.get("n_scenes", 200)),
            seed=int(obj.get("seed", 0)),
            rotate_roles=bool(obj.get("rotate_roles", False)),
            val_fraction=float(obj.get("val_fraction", 0.2)),
        )


@dataclass
class Dataset:
    domain: DomainSpec
    train: list[Scene] = field(default_factory=list)
    val: list[Scene] = field(default_factory=list)


# ----------------------------------------------------------------- simulator


def _in_box(p: np.ndarray, box: Box, margin: float = 0.0) -> np.ndarray:
    x0, y0, x1, y1 = box
    return (
        (p[..., 0] > x0 - margin)
        & (p[..., 0] < x1 + margin)
        & (p[..., 1] > y0 - margin)
        & (p[..., 1] < y1 + margin)
    )


def _project_out(p: np.ndarray, boxes: tuple[Box, ...]) -> np.ndarray:
    """Push any point strictly inside a box to its nearest face (+1 mm)."""
    eps = 1e-3
    for box in boxes:
        x0, y0, x1, y1 = box
        inside = _in_box(p, box)
        if not inside.any():
            continue
        dists = np.stack(
            [p[..., 0] - x0, x1 - p[..., 0], p[..., 1] - y0, y1 - p[..., 1]], axis=-1
        )
        face = np.argmin(dists, axis=-1)
        px = p[..., 0].copy()
        py = p[..., 1].copy()
        px = np.where(inside & (face == 0), x0 - eps, px)
        px = np.where(inside & (face == 1), x1 + eps, px)
        py = np.where(inside & (face == 2), y0 - eps, py)
        py = np.where(inside & (face == 3), y1 + eps, py)
        p = np.stack([px, py], axis=-1)
    return p


def _obstacle_force(p: np.ndarray, boxes: tuple[Box, ...]) -> np.ndarray:
    f = np.zeros_like(p)
    for box in boxes:
        x0, y0, x1, y1 = box
        nearest = np.stack(
            [np.clip(p[..., 0], x0, x1), np.clip(p[..., 1], y0, y1)], axis=-1
        )
        dvec = p - nearest
        dist = np.linalg.norm(dvec, axis=-1)
        outside = dist > 1e-9
        mag = np.where(
            outside,
            np.minimum(FORCE_CAP, OBS_STRENGTH * np.exp((AGENT_RADIUS - dist) / OBS_RANGE)),
            0.0,
        )
        denom = np.where(outside, dist, 1.0)
        f = f + mag[..., None] * dvec / denom[..., None]
    return f


def simulate_crowd(
    starts: np.ndarray,
    goals: np.ndarray,
    prefs: np.ndarray,
    regime: Regime,
    interaction_gain: float = 1.0,
    obstacle_boxes: tuple[Box, ...] = (),
    n_steps: int = ROLLOUT_STEPS,
    waypoints: np.ndarray | None = None,
    active: np.ndarray | None = None,
) -> np.ndarray:
    """Roll out one or more crowds; agent 0 of each rollout is the ego.

    ``starts``/``goals`` are (R, A, 2) (a single rollout may pass (A, 2)),
    ``prefs`` the preferred speeds (R, A). Returns positions (R, n_steps, A, 2).
    Patrol egos track ``waypoints`` (R, W, 2) instead of a goal.
    """
    single = starts.ndim == 2
    if single:
        starts, goals, prefs = starts[None], goals[None], prefs[None]
        if waypoints is not None:
            waypoints = waypoints[None]
    R, A, _ = starts.shape
    if active is None:
        active = np.ones((R, A), dtype=bool)
    if regime is Regime.PATROL_IGNORE and waypoints is None:
        raise InputError("patrol regime requires waypoints for the ego")

    p = starts.astype(np.float64).copy()
    rep_range = REP_RANGE * max(interaction_gain, 1e-6)
    widx = np.zeros(R, dtype=int)

    def desired_velocity(p):
        tgt = goals.copy()
        if regime is Regime.PATROL_IGNORE:
            nonlocal widx
            W = waypoints.shape[1]
            cur = waypoints[np.arange(R), widx]
            reach = np.linalg.norm(cur - p[:, 0, :], axis=-1) < 1.0
            widx = np.where(reach, (widx + 1) % W, widx)
            tgt[:, 0, :] = waypoints[np.arange(R), widx]
        dirs = tgt - p
        dn = np.linalg.norm(dirs, axis=-1)
        moving = dn > ARRIVE_RADIUS
        unit = dirs / np.where(moving, dn, 1.0)[..., None]
        vdes = prefs[..., None] * unit * moving[..., None]
        if regime is Regime.MUTUAL_YIELD:
            rel = p[:, :, None, :] - p[:, None, :, :]
            d = np.linalg.norm(rel, axis=-1)
            d[:, np.arange(A), np.arange(A)] = np.inf
            pair = active[:, :, None] & active[:, None, :]
            near = np.where(pair, d, np.inf).min(axis=2) < YIELD_RADIUS * interaction_gain
            vdes = vdes * np.where(near, YIELD_SLOWDOWN, 1.0)[..., None]
        return vdes

    v = desired_velocity(p)
    widx = np.zeros(R, dtype=int)  # undo any waypoint advance from the init call
    out = np.empty((R, n_steps, A, 2))
    for t in range(n_steps):
        out[:, t] = p
        if t == n_steps - 1:
            break
        vdes = desired_velocity(p)
        rel = p[:, :, None, :] - p[:, None, :, :]
        d = np.linalg.norm(rel, axis=-1)
        d[:, np.arange(A), np.arange(A)] = np.inf
        feel = active[:, :, None] & active[:, None, :]
        if regime is Regime.PATROL_IGNORE:
            feel = feel.copy()
            feel[:, 0, :] = False  # patrol ego ignores everyone
        mag = np.minimum(FORCE_CAP, REP_STRENGTH * np.exp((2 * AGENT_RADIUS - d) / rep_range))
        mag = np.where(feel, mag, 0.0)
        f_soc = np.einsum("rij,rijc->ric", mag / np.where(d > 1e-9, d, 1.0), rel)
        f = f_soc + _obstacle_force(p, obstacle_boxes)
        dv = (vdes - v) * (DT / RELAX_TAU) + f * DT
        v = v + dv
        vmax = 1.5 * prefs
        speed = np.linalg.norm(v, axis=-1)
        scale = np.where(speed > vmax, vmax / np.where(speed > 0, speed, 1.0), 1.0)
        v = v * scale[..., None]
        p = p + v * DT
        if obstacle_boxes:
            p = _project_out(p, obstacle_boxes)
    return out


# ---------------------------------------------------------------- generation


def _rollout_rng(seed: int, rollout: int, purpose: int = 0) -> np.random.Generator:
    key = np.array([np.uint64(seed & (2**64 - 1)), np.uint64((rollout << 8) | purpose)])
    return np.random.default_rng(np.random.Philox(key=key))


def _sample_point(rng, boxes, clearance_from, min_dist, tries=200) -> np.ndarray:
    for _ in range(tries):
        pt = rng.uniform(-ARENA, ARENA, 2)
        if any(_in_box(pt[None], box, OBSTACLE_MARGIN)[0] for box in boxes):
            continue
        if clearance_from and any(
            np.linalg.norm(pt - q) < min_dist for q in clearance_from
        ):
            continue
        return pt
    raise SpecError("could not place an agent outside the obstacle boxes")


def _sample_goal(rng, start, length, boxes, tries=200) -> np.ndarray:
    # Cross through the middle of the arena so agents actually interact.
    for _ in range(tries):
        base = -start
        nb = np.linalg.norm(base)
        direction = base / nb if nb > 1e-9 else np.array([1.0, 0.0])
        direction = direction + rng.normal(0.0, 0.15, 2)
        direction /= max(np.linalg.norm(direction), 1e-9)
        goal = start + length * direction
        if not any(_in_box(goal[None], box, OBSTACLE_MARGIN)[0] for box in boxes):
            return goal
    raise SpecError("could not place a goal outside the obstacle boxes")


def _patrol_waypoints(rng) -> np.ndarray:
    corners = np.array([[-5.0, -3.0], [5.0, -3.0], [5.0, 3.0], [-5.0, 3.0]])
    corners = corners + rng.uniform(-0.8, 0.8, corners.shape)
    start = int(rng.integers(0, 4))
    if rng.random() < 0.5:
        corners = corners[::-1]
    return np.roll(corners, -start, axis=0)


def _init_rollout(spec: DomainSpec, rollout: int):
    rng = _rollout_rng(spec.seed, rollout)
    n_other = int(rng.integers(spec.n_agents[0], spec.n_agents[1] + 1))
    A = n_other + 1
    factor = SPEED_FACTOR.get(spec.regime, 1.0)
    prefs = rng.uniform(spec.speed[0], spec.speed[1], A) * factor
    duration = ROLLOUT_STEPS * DT
    starts = np.zeros((A, 2))
    goals = np.zeros((A, 2))
    waypoints = None
    placed: list[np.ndarray] = []
    if spec.regime is Regime.PATROL_IGNORE:
        waypoints = _patrol_waypoints(rng)
        starts[0] = waypoints[-1] + rng.normal(0.0, 0.2, 2)
        goals[0] = waypoints[0]
        placed.append(starts[0])
        lo = 1
    else:
        lo = 0
    for i in range(lo, A):
        # Spawn on a ring scaled to preferred speed so center-crossing times
        # cluster mid-rollout and agents actually meet.
        radius_min = min(0.5 * prefs[i] * duration + 1.0, 7.0)
        for _ in range(200):
            pt = _sample_point(rng, spec.obstacle_boxes, placed, SPAWN_CLEARANCE)
            if radius_min <= np.linalg.norm(pt) <= radius_min + 1.5:
                break
        else:
            raise SpecError(f"{spec.name}: could not place agents on the spawn ring")
        starts[i] = pt
        placed.append(pt)
        goals[i] = _sample_goal(rng, pt, prefs[i] * duration + 2.0, spec.obstacle_boxes)
    return starts, goals, prefs, waypoints


def _rollout_positions(spec: DomainSpec, rollout: int) -> np.ndarray:
    starts, goals, prefs, waypoints = _init_rollout(spec, rollout)
    pos = simulate_crowd(
        starts,
        goals,
        prefs,
        regime=spec.regime,
        interaction_gain=spec.interaction_gain,
        obstacle_boxes=spec.obstacle_boxes,
        n_steps=ROLLOUT_STEPS,
        waypoints=waypoints,
    )[0]
    if spec.noise_sigma > 0:
        noise_rng = _rollout_rng(spec.seed, rollout, purpose=1)
        pos = pos + noise_rng.normal(0.0, spec.noise_sigma, pos.shape)
        if spec.obstacle_boxes:
            pos = _project_out(pos, spec.obstacle_boxes)
    return pos


def _scenes_from_rollout(
    pos: np.ndarray, t_obs: int, t_fut: int, max_agents: int
) -> list[Scene]:
    T, A, _ = pos.shape
    window = t_obs + t_fut
    scenes = []
    for t0 in range(0, T - window + 1, WINDOW_STRIDE):
        anchor = pos[t0 + t_obs - 1, 0]
        others = [j for j in range(1, A)]
        dists = [np.linalg.norm(pos[t0 + t_obs - 1, j] - anchor) for j in others]
        order = [others[k] for k in np.lexsort((others, dists))][:max_agents]
        surr_past = np.zeros((max_agents, t_obs, 2))
        surr_future = np.zeros((max_agents, t_fut, 2))
        mask = np.zeros(max_agents, dtype=bool)
        for row, j in enumerate(order):
            surr_past[row] = pos[t0 : t0 + t_obs, j] - anchor
            surr_future[row] = pos[t0 + t_obs : t0 + window, j] - anchor
            mask[row] = True
        scenes.append(
            Scene(
                ego_past=pos[t0 : t0 + t_obs, 0] - anchor,
                surr_past=surr_past,
                surr_future_gt=surr_future,
                ego_future_gt=pos[t0 + t_obs : t0 + window, 0] - anchor,
                agent_mask=mask,
            )
        )
    return scenes


def _is_val_rollout(rollout: int, val_fraction: float) -> bool:
    return math.floor((rollout + 1) * val_fraction) > math.floor(rollout * val_fraction)


def generate(spec: DomainSpec, t_obs: int = 8, t_fut: int = 12, max_agents: int = 8) -> Dataset:
    """Generate a domain dataset with a deterministic rollout-level split."""
    n_val = max(1, round(spec.n_scenes * spec.val_fraction))
    n_train = spec.n_scenes - n_val
    if n_train < 1:
        raise InputError(f"{spec.name}: n_scenes too small for the requested split")
    train: list[Scene] = []
    val: list[Scene] = []
    rollout = 0
    while len(train) < n_train or len(val) < n_val:
        pos = _rollout_positions(spec, rollout)
        scenes = _scenes_from_rollout(pos, t_obs, t_fut, max_agents)
        (val if _is_val_rollout(rollout, spec.val_fraction) else train).extend(scenes)
        rollout += 1
        if rollout > 100 * spec.n_scenes:
            raise SpecError(f"{spec.name}: rollouts yield no scenes")
    return Dataset(domain=spec, train=train[:n_train], val=val[:n_val])


def split_ego_roles(dataset: Dataset, max_agents: int = 8) -> Dataset:
    """Rotate the ego role across every agent of every scene.

    Emits one scene per (window, agent-as-ego) pair, covering the original ego
    plus each valid surrounding agent, re-normalized so the new ego sits at
    the origin at its last observed step. Only defined for regimes without a
    designated robot.
    """
    if dataset.domain.regime in DESIGNATED_EGO_REGIMES:
        raise SpecError(
            f"{dataset.domain.name}: regime {dataset.domain.regime.value} has a designated ego"
        )
    return Dataset(
        domain=dataset.domain,
        train=[s for scene in dataset.train for s in _rotations(scene, max_agents)],
        val=[s for scene in dataset.val for s in _rotations(scene, max_agents)],
    )


def _rotations(scene: Scene, max_agents: int) -> list[Scene]:
    out = [scene]
    valid = np.flatnonzero(scene.agent_mask)
    t_obs = scene.ego_past.shape[0]
    t_fut = scene.ego_future_gt.shape[0]
    for k in valid:
        offset = scene.surr_past[k, -1].copy()
        surr_past = np.zeros((max_agents, t_obs, 2))
        surr_future = np.zeros((max_agents, t_fut, 2))
        mask = np.zeros(max_agents, dtype=bool)
        rows = [(scene.ego_past, scene.ego_future_gt)] + [
            (scene.surr_past[j], scene.surr_future_gt[j]) for j in valid if j != k
        ]
        for row, (past, future) in enumerate(rows):
            surr_past[row] = past - offset
            surr_future[row] = future - offset
            mask[row] = True
        out.append(
            Scene(
                ego_past=scene.surr_past[k] - offset,
                surr_past=surr_past,
                surr_future_gt=surr_future,
                ego_future_gt=scene.surr_future_gt[k] - offset,
                agent_mask=mask,
            )
        )
    return out
