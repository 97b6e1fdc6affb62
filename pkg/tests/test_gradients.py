"""Analytic gradients against central finite differences, coordinate by coordinate."""

import numpy as np
import pytest

from planmerge.checkpoints import Checkpoint, Reason, Stage, assemble_pool
from planmerge.merging import Granularity, MergeRecipe, _resolve_cells, _weights_by_group
from planmerge.metrics import MetricReport
from planmerge.net import Planner, PlannerConfig
from planmerge.params import ParamVector, compose, task_vector

from conftest import central_difference, make_scene, max_relative_error

TOL = 1e-4
STEP = 1e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_total_loss_gradient_matches_finite_differences(small_planner, small_cfg, seed):
    rng = np.random.default_rng(seed)
    params = small_planner.init_params(seed + 100)
    scenes = [make_scene(rng, small_cfg, int(rng.integers(0, 4))) for _ in range(2)]
    _, grad = small_planner.loss_and_grad(params, scenes)

    def f(x):
        return small_planner.loss_and_grad(ParamVector(x, small_planner.layout), scenes)[0]

    numeric = central_difference(f, params.values.copy(), STEP)
    assert max_relative_error(grad.values, numeric) < TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forecast_loss_gradient_matches_finite_differences(small_planner, small_cfg, seed):
    rng = np.random.default_rng(seed + 10)
    params = small_planner.init_params(seed + 200)
    scenes = [make_scene(rng, small_cfg, int(rng.integers(1, 4))) for _ in range(2)]
    for s in scenes:
        # Keep the squared forecast error moderate so finite-difference
        # truncation stays well inside the tolerance.
        s.surr_past *= 0.5
        s.surr_future_gt *= 0.5
    _, grad = small_planner.forecast_loss_and_grad(params, scenes)

    def f(x):
        return small_planner.forecast_loss_and_grad(
            ParamVector(x, small_planner.layout), scenes)[0]

    numeric = central_difference(f, params.values.copy(), STEP)
    assert max_relative_error(grad.values, numeric) < TOL


def _two_checkpoint_pool(planner):
    base = planner.init_params(5)
    rep = MetricReport(ade=1.0, fde=1.0, collision_rate=0.0, miss_rate=0.0, n_samples=2)
    entries = [
        Checkpoint(planner.init_params(11), "a", 1, Reason.BEST_ADE, Stage.PLANNER, rep),
        Checkpoint(planner.init_params(22), "b", 1, Reason.BEST_ADE, Stage.PLANNER, rep),
    ]
    return assemble_pool(base, entries)


@pytest.mark.parametrize("granularity", list(Granularity))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_merge_weight_gradient_matches_finite_differences(small_planner, small_cfg,
                                                          granularity, seed):
    # Chain rule dL/dw_{i,cell} = lam * sum_{j in cell} tau_i[j] * dL/dtheta[j],
    # checked over every weight of a 2-checkpoint, 2-scene instance.
    rng = np.random.default_rng(seed + 40)
    planner, layout = small_planner, small_planner.layout
    pool = _two_checkpoint_pool(planner)
    scenes = [make_scene(rng, small_cfg, int(rng.integers(0, 4))) for _ in range(2)]
    taus = [task_vector(e.params, pool.base) for e in pool.entries]
    T = np.stack([t.values for t in taus])
    lam = 1.0
    recipe = MergeRecipe(granularity=granularity)
    _, cells = _resolve_cells(layout, recipe)
    cell_idx = [np.concatenate([layout.indices(g) for g in cell]) for cell in cells]
    if granularity is Granularity.PARAMETER:
        W = rng.normal(0.4, 0.2, (2, layout.total_len))
    else:
        W = rng.normal(0.4, 0.2, (2, len(cells)))

    def loss_of(flat_w):
        w = flat_w.reshape(W.shape)
        theta = compose(pool.base, lam, _weights_by_group(layout, cells, w, granularity), taus)
        return planner.loss_and_grad(theta, scenes)[0]

    theta = compose(pool.base, lam, _weights_by_group(layout, cells, W, granularity), taus)
    _, grad = planner.loss_and_grad(theta, scenes)
    g = grad.values
    if granularity is Granularity.PARAMETER:
        analytic = (lam * T * g[None, :]).ravel()
    else:
        analytic = np.empty_like(W)
        for ci, idx in enumerate(cell_idx):
            analytic[:, ci] = lam * (T[:, idx] @ g[idx])
        analytic = analytic.ravel()
    numeric = central_difference(loss_of, W.ravel().copy(), STEP)
    assert max_relative_error(analytic, numeric) < TOL
