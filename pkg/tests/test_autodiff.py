import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from critforge import autodiff as ad
from critforge.autodiff import ParamSet, Tensor, adam_step, central_difference, finite_diff_check

from oracles import naive_conv


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 5, 6))
    y = ad.conv(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(y.data, x)


def test_conv_hand_case():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    y = ad.conv(x, np.ones((1, 1, 2, 2)), np.zeros(1), padding="valid")
    assert y.shape == (1, 1, 1)
    assert y.data[0, 0, 0] == 10.0


def test_conv_zero_kernel_gives_bias(rng):
    x = rng.standard_normal((3, 7, 5, 6))
    y = ad.conv(x, np.zeros((4, 3, 3, 3, 3)), np.full(4, 0.25), stride=2, padding="same")
    assert np.all(y.data == 0.25)


def test_conv_errors(rng):
    with pytest.raises(ValueError, match="channels"):
        ad.conv(rng.standard_normal((2, 5, 5)), np.ones((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="< 1"):
        ad.conv(rng.standard_normal((1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1), padding="valid")
    with pytest.raises(ValueError, match="stride"):
        ad.conv(rng.standard_normal((1, 4, 4)), np.ones((1, 1, 3, 3)), np.zeros(1), stride=0)


@pytest.mark.parametrize(
    "n,k,s,expected",
    [(25, 3, 2, 13), (30, 3, 2, 15), (13, 3, 2, 7), (15, 3, 2, 8), (5, 3, 1, 5)],
)
def test_same_padding_extent(n, k, s, expected):
    assert ad.conv_output_extent(n, k, s, "same")[0] == expected


@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
    st.integers(2, 3), st.integers(1, 3), st.sampled_from(["valid", "same"]),
    st.integers(0, 2**32 - 1),
)
def test_conv_matches_naive_2d(cin, cout, k, nsp, stride, padding, seed):
    r = np.random.default_rng(seed)
    spatial = tuple(r.integers(k, k + 5, size=nsp))
    x = r.standard_normal((cin,) + spatial)
    w = r.standard_normal((cout, cin) + (k,) * nsp)
    b = r.standard_normal(cout)
    got = ad.conv(x, w, b, stride, padding).data
    want = naive_conv(x, w, b, stride, padding)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_batched_equals_per_sample(rng):
    x = rng.standard_normal((3, 2, 6, 7, 5))
    w = rng.standard_normal((4, 2, 3, 3, 3))
    b = rng.standard_normal(4)
    batched = ad.conv(x, w, b, 2, "same").data
    for i in range(3):
        np.testing.assert_allclose(batched[i], ad.conv(x[i], w, b, 2, "same").data, rtol=1e-13)


def test_dense_examples():
    x = np.array([1.0, 1.0])
    np.testing.assert_array_equal(ad.dense(x, np.eye(2), np.zeros(2)).data, x)
    np.testing.assert_array_equal(
        ad.dense(x, np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2)).data, [3.0, 7.0]
    )
    np.testing.assert_array_equal(ad.dense(x, np.zeros((3, 2)), np.array([1.0, 2.0, 3.0])).data,
                                  [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        ad.dense(x, np.zeros((2, 3)), np.zeros(2))


def test_relu_and_dropout_examples(rng):
    np.testing.assert_array_equal(ad.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = rng.standard_normal(50)
    np.testing.assert_array_equal(ad.dropout(x, 0.0, True, rng).data, x)
    np.testing.assert_array_equal(ad.pointwise(x, "dropout", 0.7, "infer").data, x)
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, rng)
    with pytest.raises(ValueError):
        ad.pointwise(x, "tanh")


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)))
def test_relu_idempotent(x):
    once = ad.relu(x).data
    np.testing.assert_array_equal(ad.relu(once).data, once)


def test_dropout_mean_preserved():
    n, p, value = 200_000, 0.2, 1.5
    out = ad.dropout(np.full(n, value), p, True, np.random.default_rng(7)).data
    se = value * np.sqrt(p / (1 - p)) / np.sqrt(n)
    assert abs(out.mean() - value) < 3 * se
    survivors = out[out != 0]
    np.testing.assert_allclose(survivors, value / (1 - p))


def test_mse_examples():
    assert ad.mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).item() == 0.0
    assert ad.mse_loss(np.array([1.0, 2.0]), np.zeros(2)).item() == 2.5
    t = np.linspace(0.99, 1.01, 17)
    assert ad.mse_loss(t + 5e-4, t).item() == pytest.approx(2.5e-7, rel=1e-9)
    with pytest.raises(ValueError):
        ad.mse_loss(np.zeros(2), np.zeros(3))


def test_backward_without_forward():
    with pytest.raises(RuntimeError, match="no recorded forward"):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_precision_is_uniform():
    with pytest.raises(TypeError, match="mixed precision"):
        ad.dense(np.ones(2, np.float32), np.eye(2), np.zeros(2))


def test_zero_input_kills_weight_gradient():
    ps = ParamSet({"w": np.ones((3, 4)), "b": np.zeros(3)})
    loss = ad.mse_loss(ad.dense(np.zeros(4), ps["w"], ps["b"]), np.full(3, 2.0))
    loss.backward()
    assert np.all(ps["w"].grad == 0)
    assert np.all(ps["b"].grad != 0)


def test_loss_scaling_scales_gradients(rng):
    ps = ParamSet({"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(3)})
    x, t = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))

    def grads(c):
        ps.zero_grad()
        ad.scale(ad.mse_loss(ad.dense(x, ps["w"], ps["b"]), t), c).backward()
        return ps.grads()

    g1, g3 = grads(1.0), grads(3.0)
    for k in g1:
        np.testing.assert_allclose(g3[k], 3.0 * g1[k], rtol=1e-14)


def test_fan_out_accumulates(rng):
    ps = ParamSet({"w": rng.standard_normal((2, 2)), "b": np.zeros(2)})
    x = rng.standard_normal(2)
    h = ad.dense(x, ps["w"], ps["b"])
    ad.mse_loss(ad.add(h, h), np.zeros(2)).backward()
    both = ps.grads()
    ps.zero_grad()
    ad.mse_loss(ad.scale(ad.dense(x, ps["w"], ps["b"]), 2.0), np.zeros(2)).backward()
    for k in both:
        np.testing.assert_allclose(both[k], ps.grads()[k], rtol=1e-14)


def test_adam_zero_gradient_is_noop():
    ps = ParamSet({"t": np.array([1.0, -2.0])})
    ps["t"].grad = np.zeros(2)
    adam_step(ps)
    np.testing.assert_array_equal(ps["t"].data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    ps = ParamSet({"t": np.array([1.0])})
    ps["t"].grad = np.array([4.0])
    adam_step(ps, lr=1e-3)
    assert ps["t"].data[0] == pytest.approx(1.0 - 1e-3 * 4.0 / (4.0 + 1e-8), abs=1e-15)
    assert ps["t"].data[0] == pytest.approx(0.999, abs=1e-6)
    assert ps.step == 1
    np.testing.assert_array_equal(ps["t"].grad, [4.0])


def test_adam_two_steps():
    ps = ParamSet({"t": np.array([1.0])})
    for _ in range(2):
        ps["t"].grad = np.array([1.0])
        adam_step(ps, lr=1e-3)
    assert abs(ps["t"].data[0] - (1.0 - 2e-3)) < 1e-6


@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"beta1": 1.0}, {"beta2": -0.1}])
def test_adam_rejects_bad_settings(kw):
    with pytest.raises(ValueError):
        adam_step(ParamSet({"t": np.ones(1)}), **kw)


def test_central_difference_exact_cases():
    assert central_difference(lambda t: 3.0 * t, 0.7, 1e-5) == pytest.approx(3.0, rel=1e-10)
    for h in (1e-1, 1e-3, 0.5):
        assert central_difference(lambda t: t * t, 3.0, h) == pytest.approx(6.0, rel=1e-12)
    with pytest.raises(ValueError):
        central_difference(lambda t: t, 0.0, 0.0)


# -- gradient checks per layer, float64 ------------------------------------------------


def _check(forward, ps, probes=30):
    rep = finite_diff_check(forward, ps, probe_count=probes, h=1e-5, tol=1e-4)
    assert rep.passed, rep.max_rel_error
    return rep


@pytest.mark.parametrize("nsp,stride,padding", [(2, 1, "same"), (2, 2, "valid"), (3, 2, "same"), (3, 1, "valid")])
def test_gradcheck_conv(rng, nsp, stride, padding):
    x0 = rng.standard_normal((2, 3) + (7,) * nsp)
    ps = ParamSet({"x": x0, "w": rng.standard_normal((4, 3) + (3,) * nsp), "b": rng.standard_normal(4)})
    target = ad.conv(x0, ps["w"].data, ps["b"].data, stride, padding).data * 0.5

    def forward():
        return ad.mse_loss(ad.conv(ps["x"], ps["w"], ps["b"], stride, padding), target)

    _check(forward, ps)


def test_gradcheck_dense_relu_dropout(rng):
    ps = ParamSet({"w": rng.standard_normal((6, 5)), "b": rng.standard_normal(6),
                   "v": rng.standard_normal((1, 6)), "c": rng.standard_normal(1)})
    x, t = rng.standard_normal((8, 5)), rng.standard_normal((8, 1))

    def forward():
        h = ad.relu(ad.dense(x, ps["w"], ps["b"]))
        h = ad.dropout(h, 0.3, True, np.random.default_rng(5))
        return ad.mse_loss(ad.dense(h, ps["v"], ps["c"]), t)

    _check(forward, ps)


def test_gradcheck_concat_flatten(rng):
    ps = ParamSet({"a": rng.standard_normal((3, 2, 2)), "b": rng.standard_normal((3, 4)),
                   "w": rng.standard_normal((2, 8)), "c": np.zeros(2)})
    t = rng.standard_normal((3, 2))

    def forward():
        h = ad.concat([ad.flatten(ps["a"]), ps["b"]], axis=1)
        return ad.mse_loss(ad.dense(h, ps["w"], ps["c"]), t)

    _check(forward, ps)


def test_finite_diff_check_requires_float64():
    ps = ParamSet({"w": np.ones(2, np.float32)})
    with pytest.raises(TypeError):
        finite_diff_check(lambda: ad.mse_loss(ps["w"], np.zeros(2, np.float32)), ps)
    ps64 = ParamSet({"w": np.ones(2)})
    with pytest.raises(ValueError):
        finite_diff_check(lambda: ad.mse_loss(ps64["w"], np.zeros(2)), ps64, h=0.0)


def test_forward_backward_bit_deterministic(rng):
    x = rng.standard_normal((4, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)

    def run():
        ps = ParamSet({"w": w, "b": np.zeros(3, np.float32)})
        out = ad.dropout(ad.relu(ad.conv(x, ps["w"], ps["b"], 2, "same")), 0.5, True,
                         np.random.default_rng(9))
        loss = ad.mse_loss(ad.flatten(out), np.zeros((4, 27), np.float32))
        loss.backward()
        return loss.data.tobytes(), ps["w"].grad.tobytes()

    assert run() == run()
