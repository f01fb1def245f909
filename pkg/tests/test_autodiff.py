import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from pedmri import autodiff as ad
from pedmri.autodiff.checkpoint import MAGIC, checkpoint_bytes
from pedmri.checks import TOLERANCE, model_cases, op_cases
from pedmri.volume import DataError

OPS = op_cases(0)
MODELS = model_cases(0)


def leaf(x, name=None):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name=name)


def conv3d_loops(x, w, b, pad):
    """Direct seven-loop cross-correlation."""
    B, X, Y, Z, cin = x.shape
    k, cout = w.shape[0], w.shape[-1]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    xo, yo, zo = X + 2 * pad - k + 1, Y + 2 * pad - k + 1, Z + 2 * pad - k + 1
    out = np.zeros((B, xo, yo, zo, cout))
    for n in range(B):
        for i in range(xo):
            for j in range(yo):
                for l in range(zo):
                    patch = xp[n, i:i + k, j:j + k, l:l + k, :]
                    for o in range(cout):
                        out[n, i, j, l, o] = np.sum(patch * w[..., o]) + (b[o] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradcheck(name):
    build, arrays_ = OPS[name]
    errs = ad.check_gradients(build, {k: v.copy() for k, v in arrays_.items()}, h=1e-4)
    assert max(errs.values()) < TOLERANCE, errs


@pytest.mark.parametrize("name", sorted(MODELS))
def test_model_gradcheck(name):
    build, params = MODELS[name]
    errs = ad.check_gradients(build, {k: v.copy() for k, v in params.items()}, h=1e-4)
    assert max(errs.values()) < TOLERANCE, max(errs, key=errs.get)


def test_key_bias_gradient_vanishes():
    # softmax is shift invariant per query row, so attention ignores the key bias
    build, params = MODELS["model_pe"]
    leaves = {k: ad.Tensor(v.copy(), requires_grad=True, name=k) for k, v in params.items()}
    ad.backward(build(leaves))
    assert np.linalg.norm(leaves["layer0.attn.k.bias"].grad) < 1e-14
    assert np.linalg.norm(leaves["layer0.attn.q.bias"].grad) > 1e-6


def test_relative_error_floor():
    assert ad.relative_error(np.array([1e-18]), np.array([1e-12])) < 1e-4
    assert ad.relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
    assert ad.relative_error(np.array([1e-6]), np.array([2e-6])) == pytest.approx(0.5)


def test_matmul_shape():
    assert ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 4)))).shape == (2, 4)
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 4))))


def test_matmul_gradients_closed_form(rng):
    A, B = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
    G = rng.standard_normal((2, 4))
    a, b = leaf(A), leaf(B)
    ad.backward(ad.sum(ad.mul(ad.matmul(a, b), G)))
    np.testing.assert_allclose(a.grad, G @ B.T, atol=1e-14)
    np.testing.assert_allclose(b.grad, A.T @ G, atol=1e-14)


def test_softmax_rows_sum_to_one(rng):
    y = ad.softmax(ad.Tensor(rng.standard_normal((5, 7)).astype(np.float32) * 10), axis=-1)
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-7)
    with pytest.raises(ad.ShapeError):
        ad.softmax(ad.Tensor(np.ones((2, 2))), axis=2)


def test_layer_norm_axis_checked():
    with pytest.raises(ad.ShapeError):
        ad.layer_norm(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)), axis=-3)


@pytest.mark.parametrize("pad,out", [(1, (1, 3, 3, 3, 45)), (0, (1, 1, 1, 1, 45))])
def test_conv3d_shapes(pad, out):
    x = ad.Tensor(np.zeros((1, 3, 3, 3, 45)))
    w = ad.Tensor(np.zeros((3, 3, 3, 45, 45)))
    assert ad.conv3d(x, w, padding=pad).shape == out


@pytest.mark.parametrize("pad,k", [(0, 3), (1, 3), (0, 1)])
def test_conv3d_matches_loops(rng, pad, k):
    x = rng.standard_normal((2, 3, 4, 3, 2))
    w = rng.standard_normal((k, k, k, 2, 3))
    b = rng.standard_normal(3)
    got = ad.conv3d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), padding=pad).data
    np.testing.assert_allclose(got, conv3d_loops(x, w, b, pad), atol=1e-12)


def test_conv3d_rejects_bad_args():
    x = ad.Tensor(np.zeros((1, 3, 3, 3, 4)))
    with pytest.raises(ad.ShapeError):
        ad.conv3d(x, ad.Tensor(np.zeros((3, 3, 3, 5, 2))))
    with pytest.raises(ad.ShapeError):
        ad.conv3d(x, ad.Tensor(np.zeros((3, 3, 3, 4, 2))), padding=2)


def test_gelu_values():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    y = ad.gelu(ad.Tensor(x)).data
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(y, ref, atol=1e-15)
    # tanh form stays within 1e-3 of the exact erf definition
    exact = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x])
    np.testing.assert_allclose(y, exact, atol=1e-3)


def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_accumulates_and_zero_grad():
    x = leaf([1.0, 2.0])
    ad.backward(ad.sum(ad.mul(x, x)))
    ad.backward(ad.sum(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_returns_named_leaves():
    w = leaf([1.0, 2.0], name="w")
    grads = ad.backward(ad.sum(ad.mul(w, 3.0)))
    np.testing.assert_array_equal(grads["w"], [3.0, 3.0])


def test_backward_requires_scalar():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.mul(leaf([1.0, 2.0]), 2.0))


def test_shared_subexpression_gradient():
    x = leaf([3.0])
    y = ad.mul(x, x)
    ad.backward(ad.sum(ad.add(y, y)))
    np.testing.assert_allclose(x.grad, [12.0])


def test_constants_receive_no_gradient(rng):
    c = ad.Tensor(rng.standard_normal(3))
    w = leaf(rng.standard_normal(3))
    ad.backward(ad.sum(ad.mul(c, w)))
    assert c.grad is None and w.grad is not None
    out = ad.mul(c, c)
    assert not out.requires_grad and out.parents == ()


def test_layer_norm_input_grad_sums_to_zero(rng):
    x = leaf(rng.standard_normal((3, 6)))
    g, b = ad.Tensor(rng.standard_normal(6)), ad.Tensor(rng.standard_normal(6))
    ad.backward(ad.sum(ad.mul(ad.layer_norm(x, g, b), rng.standard_normal((3, 6)))))
    np.testing.assert_allclose(x.grad.sum(axis=-1), 0.0, atol=1e-12)


def test_forward_deterministic(rng):
    x = rng.standard_normal((2, 4, 8)).astype(np.float32)
    w = rng.standard_normal((8, 8)).astype(np.float32)
    a = ad.softmax(ad.matmul(ad.Tensor(x), ad.Tensor(w))).data
    b = ad.softmax(ad.matmul(ad.Tensor(x), ad.Tensor(w))).data
    assert a.tobytes() == b.tobytes()


def test_adam_zero_grad_no_change():
    p = {"w": np.array([1.0, -2.0])}
    st_ = ad.AdamState(lr=0.1)
    ad.adam_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert st_.step == 1


def test_adam_constant_grad_limit():
    p = {"w": np.zeros(3)}
    st_ = ad.AdamState(lr=1e-3)
    g = {"w": np.array([0.5, -2.0, 1e-3])}
    prev = p["w"].copy()
    for _ in range(200):
        prev = p["w"].copy()
        ad.adam_step(p, g, st_)
    step = np.abs(p["w"] - prev)
    np.testing.assert_allclose(step, 1e-3, rtol=0.05)
    assert st_.step == 200


def test_adam_matches_scalar_simulation():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    grads = [0.3, -1.2, 0.7, 0.05]
    w, m, v = 1.0, 0.0, 0.0
    for t, gv in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * gv
        v = b2 * v + (1 - b2) * gv * gv
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"w": np.array([1.0])}
    st_ = ad.AdamState(lr=lr)
    for gv in grads:
        ad.adam_step(p, {"w": np.array([gv])}, st_)
    assert p["w"][0] == pytest.approx(w, abs=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        ad.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, ad.AdamState())


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"a.weight": rng.standard_normal((3, 2)).astype(np.float32),
              "a.bias": rng.standard_normal(2).astype(np.float32)}
    path = tmp_path / "m.peck"
    ad.write_checkpoint(path, "pe", {"k": 1}, params)
    blob = path.read_bytes()
    assert blob.startswith(MAGIC)
    header, back = ad.read_checkpoint(path)
    assert header["model_type"] == "pe" and header["config"] == {"k": 1}
    assert list(back) == list(params)
    assert header["parameters"]["a.bias"] == {"shape": [2], "offset": 24}
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    assert blob == checkpoint_bytes("pe", {"k": 1}, params)


def test_checkpoint_errors(tmp_path):
    good = checkpoint_bytes("pe", {}, {"w": np.ones(4, np.float32)})
    for name, blob in [("magic", b"XXXXX\n" + good[6:]), ("trunc", good[:-3]), ("extra", good + b"\0" * 4)]:
        p = tmp_path / name
        p.write_bytes(blob)
        with pytest.raises(DataError):
            ad.read_checkpoint(p)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=4),
              elements=st.floats(-5, 5, allow_nan=False)))
def test_softmax_normalised_property(x):
    y = ad.softmax(ad.Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_broadcast_add_grad_shapes(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng.standard_normal((rows, cols))), leaf(rng.standard_normal(cols))
    ad.backward(ad.sum(ad.add(a, b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, np.full(cols, rows))
