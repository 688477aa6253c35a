import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmath_erc import autodiff as ad
from cmath_erc.autodiff import ParamStore, Tensor


def test_tensor_shape_matches_data():
    t = Tensor(np.zeros((2, 3, 4)))
    assert t.shape == (2, 3, 4)
    assert int(np.prod(t.shape)) == t.data.size
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with ad.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64


def test_backward_populates_every_participating_leaf():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.full((2, 2), 2.0), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    ((a * b + a) @ b).sum().backward()
    assert a.grad is not None and b.grad is not None
    assert unused.grad is None
    # d/da sum((a*b + a) @ b) = (1 @ b^T) * (b + 1) = 4 * 3
    np.testing.assert_allclose(a.grad, np.full((2, 2), 12.0))


def test_broadcast_add_unbroadcasts_gradient():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    (x + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_getitem_gradient_accumulates_repeated_indices():
    x = Tensor(np.arange(3.0), requires_grad=True)
    x[np.array([0, 2, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 2.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2
    assert not y.requires_grad


# -- masked softmax -----------------------------------------------------------
def test_softmax_uniform_logits():
    np.testing.assert_allclose(ad.softmax(np.zeros(3)).data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_single_survivor():
    out = ad.masked_softmax(np.array([5.0, 5.0]), mask=np.array([True, False])).data
    assert out[0] == 1.0 and out[1] == 0.0


def test_softmax_hand_values():
    out = ad.softmax(np.array([1.0, 2.0, 3.0])).data
    e = [math.exp(v) for v in (1, 2, 3)]
    expected = [v / sum(e) for v in e]
    np.testing.assert_allclose(out, expected, atol=1e-6)
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_large_logits_stay_finite():
    out = ad.softmax(np.array([1000.0, 0.0, -1000.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0)


def test_softmax_empty_row_is_an_error():
    with pytest.raises(ValueError, match="empty attention row"):
        ad.masked_softmax(np.zeros((2, 3)), mask=np.array([[True, False, False], [False, False, False]]))


@given(
    arrays(np.float32, (4, 6), elements=st.floats(-30, 30, width=32)),
    arrays(bool, (4, 6)),
)
def test_masked_softmax_rows_are_distributions(logits, mask):
    mask[:, 0] = True
    out = ad.masked_softmax(logits, axis=-1, mask=mask).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-5)
    assert np.all(out[~mask] == 0.0)
    assert np.all(out >= 0)


# -- layer norm ---------------------------------------------------------------
def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(np.ones(3), np.ones(3), np.zeros(3)).data
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_layer_norm_two_entries():
    out = ad.layer_norm(np.array([-1.0, 1.0]), np.ones(2), np.zeros(2)).data
    expected = np.array([-1.0, 1.0]) / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-6)


def test_layer_norm_zero_gain_gives_bias(rng):
    out = ad.layer_norm(rng.normal(size=(3, 5)), np.zeros(5), np.full(5, 7.0)).data
    np.testing.assert_array_equal(out, 7.0)


def test_layer_norm_rejects_bad_gain_shape():
    with pytest.raises(ValueError):
        ad.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


@given(arrays(np.float64, (3, 8), elements=st.floats(-100, 100)))
def test_layer_norm_rows_have_zero_mean_unit_variance(x):
    x = x + np.linspace(0, 1, 8)  # keep rows away from constant
    out = ad.layer_norm(x.astype(np.float32), np.ones(8), np.zeros(8)).data.astype(np.float64)
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-4)
    var = x.var(axis=-1)
    np.testing.assert_allclose(out.var(axis=-1), var / (var + 1e-5), rtol=1e-3)


# -- conv1d -------------------------------------------------------------------
def test_conv1d_preserves_length(rng):
    for k in (1, 3, 5):
        out = ad.conv1d(rng.normal(size=(2, 7, 4)), rng.normal(size=(k, 4, 3)), np.zeros(3))
        assert out.shape == (2, 7, 3)


def test_conv1d_even_kernel_rejected(rng):
    with pytest.raises(ValueError, match="odd"):
        ad.conv1d(rng.normal(size=(5, 4)), rng.normal(size=(2, 4, 3)), np.zeros(3))


def test_conv1d_matches_loop_oracle(rng):
    x, w, b = rng.normal(size=(6, 3)), rng.normal(size=(3, 3, 2)), rng.normal(size=2)
    out = ad.conv1d(x, w, b).data
    xp = np.vstack([np.zeros((1, 3)), x, np.zeros((1, 3))])
    for i in range(6):
        for o in range(2):
            ref = b[o] + sum(xp[i + j, c] * w[j, c, o] for j in range(3) for c in range(3))
            assert out[i, o] == pytest.approx(ref, rel=1e-4, abs=1e-5)


# -- gradient checks of primitives at 32-bit precision ------------------------
def _fd_check(build, shapes, rng, positive=False, eps=1e-2):
    store = ParamStore()
    for i, shape in enumerate(shapes):
        data = rng.uniform(0.5, 1.5, size=shape) if positive else rng.normal(size=shape)
        store.add(f"p{i}", data)
    weights = {}

    def loss_fn(params):
        out = build(*[params[f"p{i}"] for i in range(len(shapes))])
        if "w" not in weights:
            weights["w"] = np.random.default_rng(7).normal(size=out.shape)
        return (out * weights["w"].astype(out.dtype)).sum()

    report = ad.grad_check(loss_fn, store, eps=eps, rel_tol=1e-2, abs_tol=1e-4, dtype=np.float32)
    assert report.passed, report.summary()


PRIMITIVES = {
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)], False),
    "batched_matmul": (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 2)], False),
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)], False),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)], False),
    "div": (lambda a, b: a / b, [(3, 4), (3, 4)], True),
    "exp": (lambda a: ad.exp(a), [(3, 4)], False),
    "log": (lambda a: ad.log(a), [(3, 4)], True),
    "softplus": (lambda a: ad.softplus(a), [(3, 4)], False),
    "mean": (lambda a: a.mean(axis=0), [(3, 4)], False),
    "softmax": (lambda a: ad.softmax(a, axis=-1), [(3, 4)], False),
    "masked_softmax": (lambda a: ad.masked_softmax(a, axis=-1, mask=np.array([True, False, True, True])), [(3, 4)], False),
    "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b), [(3, 5), (5,), (5,)], False),
    "conv1d": (lambda x, k, b: ad.conv1d(x, k, b), [(5, 3), (3, 3, 2), (2,)], False),
    "concat_stack": (lambda a, b: ad.stack([ad.concat([a, b], axis=-1)] * 2, axis=0), [(2, 3), (2, 2)], False),
    "transpose_reshape": (lambda a: a.transpose(1, 0).reshape(6), [(2, 3)], False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_backward_matches_finite_differences(name, rng):
    build, shapes, positive = PRIMITIVES[name]
    _fd_check(build, shapes, rng, positive)


def test_relu_backward_away_from_kink(rng):
    store = ParamStore()
    x = rng.uniform(0.2, 1.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    store.add("x", x)
    report = ad.grad_check(lambda p: (ad.relu(p["x"]) * 3.0).sum(), store, eps=1e-2, dtype=np.float32)
    assert report.passed, report.summary()


# -- grad_check itself --------------------------------------------------------
def test_grad_check_quadratic():
    store = ParamStore()
    store.add("x", np.array([3.0]))
    loss = lambda p: (p["x"] * p["x"]).sum()  # noqa: E731
    report = ad.grad_check(loss, store)
    assert report.passed
    x = store["x"]
    x.grad = None
    loss(store).backward()
    assert x.grad[0] == pytest.approx(6.0)


def test_grad_check_constant_loss():
    store = ParamStore()
    store.add("x", np.ones(4))
    report = ad.grad_check(lambda p: Tensor(np.array(2.0)) + p["x"].sum() * 0.0, store)
    assert report.passed
    assert report.max_abs_diff["x"] == 0.0


def test_grad_check_detects_a_wrong_gradient():
    store = ParamStore()
    store.add("x", np.array([1.0, 2.0]))

    def wrong(p):
        x = p["x"]
        # forward is x^2 but the tape records a detached copy for one factor
        return (x * x.detach()).sum()

    assert not ad.grad_check(wrong, store).passed


def test_grad_check_restores_parameters(rng):
    store = ParamStore()
    store.add("w", rng.normal(size=(3, 3)))
    before = store["w"].data.copy()
    ad.grad_check(lambda p: (p["w"] ** 2).sum(), store)
    assert store["w"].data.dtype == np.float32
    np.testing.assert_array_equal(store["w"].data, before)


def test_grad_check_rejects_nondeterministic_loss():
    store = ParamStore()
    store.add("x", np.ones(2))
    noise = np.random.default_rng(0)
    with pytest.raises(RuntimeError, match="nondeterministic"):
        ad.grad_check(lambda p: p["x"].sum() + float(noise.normal()), store)


# -- parameters ---------------------------------------------------------------
def test_param_paths_unique_and_ordered(rng):
    store = ParamStore()
    store.uniform("a.w", (3, 2), 3, rng)
    store.zeros("a.b", (2,))
    with pytest.raises(KeyError):
        store.zeros("a.b", (2,))
    assert store.names() == ["a.w", "a.b"]


def test_uniform_init_bounds():
    store = ParamStore()
    w = store.uniform("w", (400, 50), 400, np.random.default_rng(0))
    assert np.abs(w.data).max() <= 1 / math.sqrt(400)
    assert store.ones("g", (5,)).data.tolist() == [1.0] * 5


def test_forward_bit_reproducible(rng):
    x = rng.normal(size=(4, 6)).astype(np.float32)
    runs = []
    for _ in range(2):
        store = ParamStore()
        w = store.uniform("w", (6, 6), 6, np.random.default_rng(3))
        g, b = store.ones("g", (6,)), store.zeros("b", (6,))
        runs.append(ad.layer_norm(ad.softmax(Tensor(x) @ w), g, b).data)
    assert runs[0].tobytes() == runs[1].tobytes()
