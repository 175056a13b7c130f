import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import rel_err
from nsync.errors import NumericalError
from nsync.numerics import AdamState, ParamSet, adam_step, backward, finite_difference_grad, flatten, make_layout
from nsync.numerics import autodiff as ad


def _loss_and_leaves(fn, params):
    leaves = {k: ad.leaf(v, k) for k, v in params.params.items()}
    return fn(leaves), leaves


def _scalar(fn):
    return lambda p: float(_loss_and_leaves(fn, p)[0].value)


def test_backward_linear():
    params = ParamSet({"p": np.array([0.3, -1.0, 2.0])}, ("p",))
    fn = lambda L: ad.total(L["p"])
    loss, leaves = _loss_and_leaves(fn, params)
    np.testing.assert_array_equal(backward(loss, leaves, params).values, [1.0, 1.0, 1.0])


def test_backward_quadratic():
    params = ParamSet({"p": np.array([2.0, -1.0])}, ("p",))
    fn = lambda L: ad.mul(ad.total(ad.square(L["p"])), 0.5)
    loss, leaves = _loss_and_leaves(fn, params)
    np.testing.assert_allclose(backward(loss, leaves, params).values, [2.0, -1.0], rtol=0, atol=1e-15)


def _mlp(x):
    def fn(L):
        h = ad.tanh(x @ L["w1"] + L["b1"])
        h = ad.silu(h @ L["w2"] + L["b2"])
        return ad.mean(ad.square(h))

    return fn


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences_on_mlp(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 3))
    params = ParamSet(
        {
            "w1": rng.standard_normal((3, 5)),
            "b1": rng.standard_normal(5),
            "w2": rng.standard_normal((5, 2)),
            "b2": rng.standard_normal(2),
        },
        ("w1", "b1", "w2", "b2"),
    )
    fn = _mlp(x)
    loss, leaves = _loss_and_leaves(fn, params)
    got = backward(loss, leaves, params)
    want = finite_difference_grad(_scalar(fn), params, h=1e-5)
    assert len(got) == 3 * 5 + 5 + 5 * 2 + 2
    assert rel_err(got.values, want.values) <= 1e-4


def test_frozen_params_get_no_gradient():
    params = ParamSet({"a": np.array([1.0, 2.0]), "b": np.array([3.0])}, ("a",))
    fn = lambda L: ad.total(ad.mul(L["a"], L["b"]))
    loss, leaves = _loss_and_leaves(fn, params)
    g = backward(loss, leaves, params)
    assert [e.name for e in g.layout] == ["a"]
    np.testing.assert_array_equal(g.values, [3.0, 3.0])


def test_backward_rejects_non_scalar():
    params = ParamSet({"p": np.ones(3)}, ("p",))
    loss, leaves = _loss_and_leaves(lambda L: ad.square(L["p"]), params)
    with pytest.raises(ValueError, match="scalar"):
        backward(loss, leaves, params)


def test_backward_names_parameter_with_nan_gradient():
    params = ParamSet({"good": np.ones(2), "bad": np.array([np.nan])}, ("good", "bad"))
    fn = lambda L: ad.total(L["good"]) + ad.total(ad.square(L["bad"]))
    loss, leaves = _loss_and_leaves(fn, params)
    with pytest.raises(NumericalError, match="bad"):
        backward(loss, leaves, params)


def test_finite_difference_bilinear():
    params = ParamSet({"p": np.array([3.0, 5.0])}, ("p",))
    g = finite_difference_grad(lambda p: p["p"][0] * p["p"][1], params, h=1e-5)
    np.testing.assert_allclose(g.values, [5.0, 3.0], rtol=1e-9)


def test_finite_difference_constant_is_zero():
    params = ParamSet({"p": np.array([3.0, 5.0, -1.0])}, ("p",))
    g = finite_difference_grad(lambda p: 7.0, params)
    np.testing.assert_array_equal(g.values, np.zeros(3))


def test_finite_difference_rejects_bad_inputs():
    params = ParamSet({"p": np.array([1.0])}, ("p",))
    with pytest.raises(ValueError):
        finite_difference_grad(lambda p: 0.0, params, h=0.0)
    with pytest.raises(NumericalError):
        finite_difference_grad(lambda p: float("nan"), params)


@settings(max_examples=50, deadline=None)
@given(
    a=arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-1e6, 1e6)),
    b=arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e6, 1e6)),
)
def test_flatten_unflatten_round_trip(a, b):
    layout = make_layout({"a": a.shape, "b": b.shape}, ["b", "a"])
    g = flatten({"a": a, "b": b}, layout)
    back = g.unflatten()
    np.testing.assert_array_equal(back["a"], a)
    np.testing.assert_array_equal(back["b"], b)
    assert len(g) == a.size + b.size


def _adam_setup(grad):
    params = ParamSet({"w": np.array([1.0, -2.0, 0.5]), "frozen": np.array([9.0])}, ("w",))
    state = AdamState.for_params(params, lr=8e-4)
    return params, flatten({"w": np.asarray(grad, dtype=float)}, params.layout), state


def test_adam_zero_gradient_leaves_params():
    params, g, state = _adam_setup([0.0, 0.0, 0.0])
    out = adam_step(params, g, state)
    np.testing.assert_array_equal(out["w"], params["w"])
    assert state.step == 1


def test_adam_moves_against_constant_gradient():
    params, g, state = _adam_setup([0.3, -2.0, 1e-3])
    start = params["w"].copy()
    for _ in range(200):
        params = adam_step(params, g, state)
    assert np.all(np.sign(params["w"] - start) == -np.sign(g.values))
    np.testing.assert_array_equal(params["frozen"], [9.0])


def test_adam_first_step_closed_form():
    grad = np.array([0.3, -2.0, 1e-3])
    params, g, state = _adam_setup(grad)
    out = adam_step(params, g, state)
    # bias-corrected first moments are g and g^2
    expected = params["w"] - 8e-4 * grad / (np.abs(grad) + 1e-8)
    np.testing.assert_allclose(out["w"], expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out["w"] - params["w"], -8e-4 * np.sign(grad), rtol=1e-4)


def test_adam_is_deterministic():
    results = []
    for _ in range(2):
        params, g, state = _adam_setup([0.1, 0.2, -0.3])
        for _ in range(10):
            params = adam_step(params, g, state)
        results.append(params["w"].tobytes() + state.m.tobytes() + state.v.tobytes())
    assert results[0] == results[1]


def test_adam_rejects_layout_mismatch():
    params, _, state = _adam_setup([0.0, 0.0, 0.0])
    other = flatten({"x": np.zeros(3)}, make_layout({"x": (3,)}, ["x"]))
    with pytest.raises(ValueError):
        adam_step(params, other, state)
