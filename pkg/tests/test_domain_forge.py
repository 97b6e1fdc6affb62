import numpy as np
import pytest

from planmerge.domains import (
    DT,
    ROLLOUT_STEPS,
    WINDOW_STRIDE,
    DomainSpec,
    Dataset,
    Regime,
    _in_box,
    _rollout_positions,
    _scenes_from_rollout,
    generate,
    simulate_crowd,
    split_ego_roles,
)
from planmerge.errors import InputError, SpecError
from planmerge.scenes import Scene, scenes_to_jsonl, validate_scene


def test_spec_validation():
    with pytest.raises(InputError):
        DomainSpec("x", Regime.MUTUAL_YIELD, speed=(0.0, 1.0))
    with pytest.raises(InputError):
        DomainSpec("x", Regime.MUTUAL_YIELD, n_scenes=0)
    with pytest.raises(InputError):
        DomainSpec("x", Regime.MUTUAL_YIELD, obstacle_boxes=((1, 1, 0, 0),))
    spec = DomainSpec("x", Regime.MUTUAL_YIELD)
    assert DomainSpec.from_json(spec.to_json()) == spec


def test_generate_is_byte_deterministic():
    spec = DomainSpec("d", Regime.RECIPROCAL_AVOID, n_agents=(2, 4), speed=(0.8, 1.2),
                      noise_sigma=0.01, n_scenes=40, seed=42)
    a = generate(spec)
    b = generate(spec)
    assert scenes_to_jsonl(a.train) == scenes_to_jsonl(b.train)
    assert scenes_to_jsonl(a.val) == scenes_to_jsonl(b.val)
    assert len(a.train) + len(a.val) == spec.n_scenes


def test_generate_different_seeds_differ():
    spec = DomainSpec("d", Regime.RECIPROCAL_AVOID, n_scenes=20, seed=1)
    other = DomainSpec("d", Regime.RECIPROCAL_AVOID, n_scenes=20, seed=2)
    assert scenes_to_jsonl(generate(spec).train) != scenes_to_jsonl(generate(other).train)


def test_lone_ego_moves_in_a_straight_line_at_constant_speed():
    spec = DomainSpec("solo", Regime.RECIPROCAL_AVOID, n_agents=(0, 0), speed=(1.0, 1.0),
                      noise_sigma=0.0, n_scenes=12, seed=7)
    ds = generate(spec)
    for scene in ds.train + ds.val:
        assert scene.n_valid() == 0
        pts = np.vstack([scene.ego_past[-1:], scene.ego_future_gt])
        steps = np.diff(pts, axis=0)
        lens = np.linalg.norm(steps, axis=1)
        assert np.allclose(lens, 1.0 * DT, atol=1e-9)
        cross = steps[:-1, 0] * steps[1:, 1] - steps[:-1, 1] * steps[1:, 0]
        assert np.abs(cross).max() < 1e-9


def test_head_on_agents_keep_clearance():
    starts = np.array([[-5.0, 0.0], [5.0, 1.0]])  # 1 m lateral offset
    goals = np.array([[5.0, 0.0], [-5.0, 1.0]])
    prefs = np.array([1.2, 1.2])
    pos = simulate_crowd(starts, goals, prefs, regime=Regime.RECIPROCAL_AVOID)[0]
    dist = np.linalg.norm(pos[:, 0] - pos[:, 1], axis=1)
    # Threshold frozen after inspecting the simulated clearance (~1.4 m).
    assert dist.min() > 0.3


def test_speed_statistics_separate_across_regimes():
    for seed in range(5):
        speeds = {}
        for regime in (Regime.INDOOR_SLOW, Regime.OUTDOOR_FAST):
            spec = DomainSpec("s", regime, n_agents=(1, 2), speed=(0.8, 1.2),
                              n_scenes=18, seed=seed)
            ds = generate(spec)
            speeds[regime] = np.mean([
                np.linalg.norm(np.diff(sc.ego_future_gt, axis=0), axis=1).mean() / DT
                for sc in ds.train
            ])
        assert speeds[Regime.OUTDOOR_FAST] > speeds[Regime.INDOOR_SLOW]


def test_no_position_inside_obstacles():
    boxes = ((-4.0, -1.0, -1.5, 1.0), (1.5, -1.0, 4.0, 1.0))
    spec = DomainSpec("pat", Regime.PATROL_IGNORE, n_agents=(2, 4), speed=(0.6, 1.0),
                      obstacle_boxes=boxes, noise_sigma=0.015, n_scenes=30, seed=3)
    for rollout in range(12):
        pos = _rollout_positions(spec, rollout)
        for box in boxes:
            assert not _in_box(pos, box).any()


def test_infeasible_spec_raises():
    spec = DomainSpec("blocked", Regime.RECIPROCAL_AVOID, n_agents=(1, 1),
                      obstacle_boxes=((-30.0, -30.0, 30.0, 30.0),), n_scenes=4, seed=0)
    with pytest.raises(SpecError):
        generate(spec)


def test_windows_never_cross_rollout_boundaries():
    # Ramp positions make window contents reveal their source indices exactly.
    T, A = ROLLOUT_STEPS, 3
    pos = np.zeros((T, A, 2))
    pos[:, :, 0] = np.arange(T)[:, None]
    pos[:, :, 1] = np.arange(A)[None, :]
    scenes = _scenes_from_rollout(pos, t_obs=8, t_fut=12, max_agents=4)
    assert len(scenes) == (T - 20) // WINDOW_STRIDE + 1
    for w, scene in enumerate(scenes):
        t0 = w * WINDOW_STRIDE
        anchor = t0 + 7
        assert np.array_equal(scene.ego_past[:, 0], np.arange(t0, t0 + 8) - anchor)
        assert np.array_equal(scene.ego_future_gt[:, 0],
                              np.arange(t0 + 8, t0 + 20) - anchor)
        assert scene.ego_future_gt[-1, 0] <= T - 1 - anchor


def test_scenes_are_valid_for_every_regime():
    for regime in Regime:
        spec = DomainSpec("r", regime, n_agents=(1, 3), speed=(0.6, 1.0),
                          noise_sigma=0.01, n_scenes=12, seed=5)
        ds = generate(spec)
        for scene in ds.train + ds.val:
            validate_scene(scene, 8, 12, 8)


def _tiny_scene(n_valid: int) -> Scene:
    rng = np.random.default_rng(0)
    M = 4
    ego_past = np.cumsum(rng.normal(0, 0.2, (8, 2)), axis=0)
    ego_past -= ego_past[-1]
    scene = Scene(
        ego_past=ego_past,
        surr_past=rng.normal(0, 2, (M, 8, 2)),
        surr_future_gt=rng.normal(0, 2, (M, 12, 2)),
        ego_future_gt=np.cumsum(rng.normal(0.1, 0.2, (12, 2)), axis=0),
        agent_mask=np.arange(M) < n_valid,
    )
    scene.surr_past[~scene.agent_mask] = 0
    scene.surr_future_gt[~scene.agent_mask] = 0
    return scene


def test_split_ego_roles_counts_one_scene_per_agent():
    # One window with three agents total (ego + 2 valid) gives three scenes.
    ds = Dataset(domain=DomainSpec("h", Regime.MUTUAL_YIELD), train=[_tiny_scene(2)], val=[])
    rotated = split_ego_roles(ds, max_agents=4)
    assert len(rotated.train) == 3


def test_split_ego_roles_renormalizes_and_round_trips():
    scene = _tiny_scene(3)
    ds = Dataset(domain=DomainSpec("h", Regime.MUTUAL_YIELD), train=[scene], val=[])
    rotated = split_ego_roles(ds, max_agents=4).train
    for rot in rotated:
        validate_scene(rot, 8, 12, 4)
    # Rotation k: undoing the translation recovers the original trajectories.
    for k, rot in enumerate(rotated[1:]):
        offset = scene.surr_past[k, -1]
        assert np.allclose(rot.ego_past + offset, scene.surr_past[k], atol=1e-12)
        assert np.allclose(rot.ego_future_gt + offset, scene.surr_future_gt[k], atol=1e-12)
        assert np.allclose(rot.surr_past[0] + offset, scene.ego_past, atol=1e-12)
        assert np.allclose(rot.surr_future_gt[0] + offset, scene.ego_future_gt, atol=1e-12)
        others = [j for j in range(3) if j != k]
        for row, j in enumerate(others, start=1):
            assert np.allclose(rot.surr_past[row] + offset, scene.surr_past[j], atol=1e-12)


def test_split_ego_roles_rejects_designated_robot_regimes():
    for regime in (Regime.PATROL_IGNORE, Regime.RECIPROCAL_AVOID):
        ds = Dataset(domain=DomainSpec("r", regime), train=[_tiny_scene(1)], val=[])
        with pytest.raises(SpecError):
            split_ego_roles(ds)


def test_rollout_level_split_is_deterministic_function_of_seed():
    spec = DomainSpec("d", Regime.MUTUAL_YIELD, n_agents=(1, 2), n_scenes=30,
                      seed=9, val_fraction=0.25)
    ds = generate(spec)
    assert len(ds.val) == round(spec.n_scenes * spec.val_fraction)
    assert scenes_to_jsonl(generate(spec).val) == scenes_to_jsonl(ds.val)
