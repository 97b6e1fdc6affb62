"""Trajectory evaluation metrics and the evaluation runner.

All four metrics compare planned ego trajectories against ground truth:

- ``ade``:  mean L2 displacement over every future step,
- ``fde``:  mean L2 displacement at the final step,
- ``miss_rate``: fraction of samples whose final displacement is strictly
  greater than a threshold (default 0.5 m),
- ``collision_rate``: fraction of samples whose plan passes strictly closer
  than a threshold (default 0.6 m) to any valid surrounding agent at the
  matching timestep.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import InputError

MISS_THRESHOLD = 0.5
COLLISION_THRESHOLD = 0.6


@dataclass(frozen=True)
class MetricReport:
    """Aggregate metrics over one evaluation split."""

    ade: float
    fde: float
    collision_rate: float
    miss_rate: float
    n_samples: int
    cost_multiplier: float = 1.0

    def __post_init__(self) -> None:
        if self.ade < 0 or self.fde < 0:
            raise InputError("displacement errors must be non-negative")
        for rate in (self.collision_rate, self.miss_rate):
            if not 0.0 <= rate <= 1.0:
                raise InputError(f"rate {rate} outside [0, 1]")
        if self.n_samples < 0:
            raise InputError("n_samples must be non-negative")

    def value(self, metric: str) -> float:
        return {
            "ade": self.ade,
            "fde": self.fde,
            "collision_rate": self.collision_rate,
            "miss_rate": self.miss_rate,
        }[metric]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(**obj)


METRIC_NAMES = ("ade", "fde", "collision_rate", "miss_rate")


def _check_pair(plans: np.ndarray, gts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    plans = np.asarray(plans, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if plans.shape != gts.shape:
        raise InputError(f"shape mismatch: plans {plans.shape} vs gts {gts.shape}")
    if plans.ndim != 3 or plans.shape[-1] != 2:
        raise InputError(f"expected (N, F, 2) arrays, got {plans.shape}")
    if plans.shape[0] == 0:
        raise InputError("empty batch")
    return plans, gts


def ade(plans: np.ndarray, gts: np.ndarray) -> float:
    """Average displacement error: mean L2 distance over samples and steps."""
    plans, gts = _check_pair(plans, gts)
    return float(np.linalg.norm(plans - gts, axis=-1).mean())


def fde(plans: np.ndarray, gts: np.ndarray) -> float:
    """Final displacement error: mean L2 distance at the last step."""
    plans, gts = _check_pair(plans, gts)
    return float(np.linalg.norm(plans[:, -1] - gts[:, -1], axis=-1).mean())


def miss_rate(plans: np.ndarray, gts: np.ndarray, eps_m: float = MISS_THRESHOLD) -> float:
    """Fraction of samples whose final displacement strictly exceeds ``eps_m``."""
    plans, gts = _check_pair(plans, gts)
    final = np.linalg.norm(plans[:, -1] - gts[:, -1], axis=-1)
    return float(np.mean(final > eps_m))


def collision_rate(
    plans: np.ndarray,
    surr_future_gts: np.ndarray,
    masks: np.ndarray,
    eps_c: float = COLLISION_THRESHOLD,
) -> float:
    """Fraction of samples whose plan comes strictly within ``eps_c`` of an agent.

    Distances are taken at matching timesteps against the ground-truth futures
    of valid surrounding agents; samples with no valid agents never collide.
    """
    plans = np.asarray(plans, dtype=np.float64)
    surr = np.asarray(surr_future_gts, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if plans.ndim != 3 or plans.shape[-1] != 2:
        raise InputError(f"expected (N, F, 2) plans, got {plans.shape}")
    if surr.ndim != 4 or surr.shape[-1] != 2:
        raise InputError(f"expected (N, M, F, 2) agent futures, got {surr.shape}")
    if surr.shape[0] != plans.shape[0] or surr.shape[2] != plans.shape[1]:
        raise InputError(f"shape mismatch: plans {plans.shape} vs agents {surr.shape}")
    if masks.shape != surr.shape[:2]:
        raise InputError(f"mask shape {masks.shape} != {surr.shape[:2]}")
    if plans.shape[0] == 0:
        raise InputError("empty batch")
    dists = np.linalg.norm(plans[:, None, :, :] - surr, axis=-1)  # (N, M, F)
    dists = np.where(masks[:, :, None], dists, np.inf)
    return float(np.mean(dists.min(axis=(1, 2)) < eps_c))


def report_from_plans(
    plans: np.ndarray,
    ego_future_gts: np.ndarray,
    surr_future_gts: np.ndarray,
    masks: np.ndarray,
    cost_multiplier: float = 1.0,
) -> MetricReport:
    """Bundle all four metrics for a batch of plans."""
    return MetricReport(
        ade=ade(plans, ego_future_gts),
        fde=fde(plans, ego_future_gts),
        collision_rate=collision_rate(plans, surr_future_gts, masks),
        miss_rate=miss_rate(plans, ego_future_gts),
        n_samples=int(plans.shape[0]),
        cost_multiplier=cost_multiplier,
    )


def evaluate_with_plans(
    planner,
    params,
    scenes,
    forecaster_params=None,
    cost_multiplier: float = 1.0,
    batch_size: int = 128,
):
    """Forecast + plan every scene, returning (MetricReport, plans array)."""
    from .scenes import SceneBatch

    if len(scenes) == 0:
        raise InputError("empty evaluation split")
    plans = planner.plans_for(
        params, scenes, batch_size=batch_size, forecaster_params=forecaster_params
    )
    batch = SceneBatch.from_scenes(scenes)
    report = report_from_plans(
        plans, batch.ego_future_gt, batch.surr_future_gt, batch.agent_mask,
        cost_multiplier=cost_multiplier,
    )
    return report, plans


def evaluate(
    planner,
    params,
    scenes,
    forecaster_params=None,
    cost_multiplier: float = 1.0,
    batch_size: int = 128,
) -> MetricReport:
    """Run the planner over an evaluation split and aggregate all four metrics."""
    report, _ = evaluate_with_plans(
        planner, params, scenes, forecaster_params=forecaster_params,
        cost_multiplier=cost_multiplier, batch_size=batch_size,
    )
    return report
