import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planmerge.errors import InputError, LayoutError, NumericError
from planmerge.params import GroupLayout, ParamVector, compose, task_vector, uniform_weights

PAIR = GroupLayout.from_sizes({"a": 2})


def pv(values, layout=PAIR):
    return ParamVector(values=np.asarray(values, dtype=np.float64), layout=layout)


def test_layout_rejects_overlap_gap_and_duplicates():
    with pytest.raises(LayoutError):
        GroupLayout(groups=(("a", ((0, 2),)), ("b", ((1, 3),))), total_len=3)
    with pytest.raises(LayoutError):
        GroupLayout(groups=(("a", ((0, 1),)),), total_len=2)
    with pytest.raises(LayoutError):
        GroupLayout(groups=(("a", ((0, 1),)), ("a", ((1, 2),))), total_len=2)


def test_layout_json_round_trip():
    layout = GroupLayout(groups=(("x", ((0, 3), (5, 6))), ("y", ((3, 5),))), total_len=6)
    assert GroupLayout.from_json(layout.to_json()) == layout
    assert layout.group_len("x") == 4
    assert list(layout.indices("x")) == [0, 1, 2, 5]


def test_param_vector_rejects_nan_and_bad_length():
    with pytest.raises(NumericError):
        pv([1.0, np.nan])
    with pytest.raises(LayoutError):
        pv([1.0, 2.0, 3.0])


def test_param_vector_is_immutable():
    v = pv([1.0, 2.0])
    with pytest.raises(ValueError):
        v.values[0] = 9.0


def test_task_vector_identical_checkpoint_is_zero():
    assert np.array_equal(task_vector(pv([1.0, 2.0]), pv([1.0, 2.0])).values, [0.0, 0.0])


def test_task_vector_elementwise():
    tau = task_vector(pv([1.5, 1.0]), pv([1.0, 2.0]))
    assert np.array_equal(tau.values, [0.5, -1.0])


def test_task_vector_layout_mismatch():
    other = GroupLayout.from_sizes({"b": 2})
    with pytest.raises(LayoutError):
        task_vector(pv([1.0, 2.0]), pv([1.0, 2.0], layout=other))


def test_task_vector_round_trip_bit_exact():
    # tau = ckpt - base, then base + tau reconstructs ckpt bit-for-bit.
    rng = np.random.default_rng(0)
    layout = GroupLayout.from_sizes({"a": 1000})
    base = ParamVector(rng.uniform(-1, 1, 1000), layout)
    ckpt = ParamVector(rng.uniform(-1, 1, 1000), layout)
    tau = task_vector(ckpt, base)
    back = compose(base, 1.0, uniform_weights(layout, 1, 1.0), [tau])
    assert back.values.tobytes() == ckpt.values.tobytes()


def test_compose_zero_weights_returns_base_bit_exact():
    rng = np.random.default_rng(1)
    layout = GroupLayout.from_sizes({"a": 64, "b": 64})
    base = ParamVector(rng.normal(size=128), layout)
    taus = [ParamVector(rng.normal(size=128), layout) for _ in range(3)]
    for lam in (0.0, 1.0, -2.5):
        out = compose(base, lam, uniform_weights(layout, 3, 0.0), taus)
        assert out.values.tobytes() == base.values.tobytes()


def test_compose_hand_example():
    base = pv([1.0, 2.0])
    t1 = pv([1.0, 0.0])
    t2 = pv([0.0, 2.0])
    out = compose(base, 2.0, {"a": [0.5, 0.5]}, [t1, t2])
    assert np.array_equal(out.values, [2.0, 4.0])


def test_compose_groupwise_equals_model_level_bitwise():
    rng = np.random.default_rng(2)
    layout = GroupLayout.from_sizes({"x": 10, "y": 7, "z": 13})
    flat = GroupLayout.from_sizes({"all": 30})
    base_vals = rng.normal(size=30)
    tau_vals = [rng.normal(size=30) for _ in range(4)]
    w = rng.normal(size=4)
    grouped = compose(
        ParamVector(base_vals, layout), 1.3,
        {g: w for g in ("x", "y", "z")},
        [ParamVector(t, layout) for t in tau_vals],
    )
    model = compose(
        ParamVector(base_vals, flat), 1.3, {"all": w},
        [ParamVector(t, flat) for t in tau_vals],
    )
    assert grouped.values.tobytes() == model.values.tobytes()


def test_compose_per_coordinate_weights():
    layout = GroupLayout.from_sizes({"a": 2, "b": 1})
    base = ParamVector(np.zeros(3), layout)
    tau = ParamVector(np.array([1.0, 2.0, 3.0]), layout)
    weights = {"a": np.array([[2.0, 0.5]]), "b": np.array([[-1.0]])}
    out = compose(base, 1.0, weights, [tau])
    assert np.allclose(out.values, [2.0, 1.0, -3.0])


def test_compose_errors():
    base = pv([0.0, 0.0])
    tau = pv([1.0, 1.0])
    with pytest.raises(LayoutError):
        compose(base, 1.0, {"a": [1.0, 1.0]}, [tau])  # weight count != n_taus
    with pytest.raises(LayoutError):
        compose(base, 1.0, {}, [tau])
    with pytest.raises(NumericError):
        compose(base, 1.0, {"a": [np.inf]}, [tau])
    with pytest.raises(NumericError):
        compose(base, np.nan, {"a": [1.0]}, [tau])
    other = GroupLayout.from_sizes({"b": 2})
    with pytest.raises(LayoutError):
        compose(base, 1.0, {"a": [1.0]}, [pv([1.0, 1.0], layout=other)])
    with pytest.raises(InputError):
        uniform_weights(PAIR, 0, 1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_compose_linear_in_weights(seed):
    rng = np.random.default_rng(seed)
    layout = GroupLayout.from_sizes({"a": 16, "b": 16})
    base = ParamVector(rng.normal(size=32), layout)
    taus = [ParamVector(rng.normal(size=32), layout) for _ in range(3)]
    w1 = {g: rng.normal(size=3) for g in ("a", "b")}
    w2 = {g: rng.normal(size=3) for g in ("a", "b")}
    w12 = {g: w1[g] + w2[g] for g in ("a", "b")}
    lhs = (compose(base, 1.0, w1, taus).values
           + compose(base, 1.0, w2, taus).values - base.values)
    rhs = compose(base, 1.0, w12, taus).values
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_unit_weight_single_tau_reconstructs_checkpoint(seed):
    rng = np.random.default_rng(seed)
    layout = GroupLayout.from_sizes({"a": 50})
    base = ParamVector(rng.uniform(-1, 1, 50), layout)
    ckpt = ParamVector(rng.uniform(-1, 1, 50), layout)
    out = compose(base, 1.0, uniform_weights(layout, 1, 1.0), [task_vector(ckpt, base)])
    assert out.values.tobytes() == ckpt.values.tobytes()
