import numpy as np
import pytest

from melboot import tensor as T
from melboot.tensor import (
    DimensionError,
    DtypeMismatchError,
    ParamSet,
    Tensor,
    UnsupportedOpError,
    conv2d,
    finite_difference_grad,
    grad,
    layer_norm,
    no_grad,
)


def fd_check(loss_fn, params, tol=1e-6):
    analytic = grad(loss_fn, params)
    reference = finite_difference_grad(loss_fn, params, epsilon=1e-5)
    errs = T.relative_gradient_error(analytic, reference)
    worst = max(errs.values())
    assert worst <= tol, f"gradient mismatch {worst:.3e} in {errs}"


def make_params(rng, **shapes):
    ps = ParamSet()
    for name, shape in shapes.items():
        ps.add(name, Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64))
    return ps


# ----------------------------------------------------------------------
# conv2d oracle: direct triple-loop cross-correlation


def conv2d_reference(x, w, b, stride, padding):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, ho, wo), dtype=x.dtype)
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(cin):
                    for a in range(kh):
                        for bb in range(kw):
                            acc += xp[c, i * stride + a, j * stride + bb] * w[o, c, a, bb]
                out[o, i, j] = acc + b[o]
    return out


def test_conv2d_identity_kernel():
    x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    w = Tensor([[[[1.0]]]])
    b = Tensor([0.0])
    out = conv2d(x, w, b, stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_zero_input_bias_only():
    x = Tensor(np.zeros((1, 4, 4)))
    w = Tensor(np.ones((2, 1, 3, 3)))
    b = Tensor([5.0, -1.0])
    out = conv2d(x, w, b, stride=1, padding=1)
    assert out.shape == (2, 4, 4)
    np.testing.assert_array_equal(out.data[0], np.full((4, 4), 5.0))
    np.testing.assert_array_equal(out.data[1], np.full((4, 4), -1.0))


def test_conv2d_matches_brute_force():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 8))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    assert out.shape == (3, 4, 4)
    np.testing.assert_allclose(out.data, conv2d_reference(x, w, b, 2, 1), rtol=1e-12)


def test_conv2d_patchify_grid():
    # stride == kernel == s on an (s*a, s*b) input gives an a x b grid
    rng = np.random.default_rng(1)
    for s, a, b in [(2, 3, 4), (4, 2, 2)]:
        x = Tensor(rng.normal(size=(1, s * a, s * b)))
        w = Tensor(rng.normal(size=(5, 1, s, s)))
        bias = Tensor(np.zeros(5))
        assert conv2d(x, w, bias, stride=s, padding=0).shape == (5, a, b)


def test_conv2d_shape_errors():
    with pytest.raises(DimensionError, match="C_in"):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))), None)
    with pytest.raises(DimensionError, match="window"):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), None)
    with pytest.raises(DtypeMismatchError):
        conv2d(
            Tensor(np.zeros((1, 4, 4)), dtype=np.float32),
            Tensor(np.zeros((1, 1, 2, 2)), dtype=np.float64),
            None,
        )


def test_conv2d_gradients():
    rng = np.random.default_rng(2)
    ps = make_params(rng, x=(2, 6, 6), w=(3, 2, 3, 3), b=(3,))

    def loss(p):
        out = conv2d(p["x"], p["w"], p["b"], stride=2, padding=1)
        return (out * out).sum()

    fd_check(loss, ps)


# ----------------------------------------------------------------------
# grad() contract


def test_grad_quadratic():
    ps = ParamSet({"p": Tensor([1.0, 2.0, 3.0], requires_grad=True)})
    g = grad(lambda p: (p["p"] * p["p"]).sum(), ps)
    np.testing.assert_allclose(g["p"].data, [2.0, 4.0, 6.0])


def test_grad_constant_loss_is_zero():
    ps = ParamSet({"p": Tensor(np.ones(4), requires_grad=True)})
    g = grad(lambda p: Tensor(7.0, requires_grad=True) * 1.0, ps)
    np.testing.assert_array_equal(g["p"].data, np.zeros(4))


def test_grad_rejects_non_tensor_loss():
    ps = ParamSet({"p": Tensor([1.0], requires_grad=True)})
    with pytest.raises(UnsupportedOpError):
        grad(lambda p: 3.14, ps)


def test_fd_linear_and_bilinear():
    ps = ParamSet({"p": Tensor([2.0, 3.0], requires_grad=True)})
    g = finite_difference_grad(lambda p: p["p"].sum(), ps)
    np.testing.assert_allclose(g["p"].data, [1.0, 1.0], atol=1e-9)
    g = finite_difference_grad(lambda p: (p["p"][0] * p["p"][1]).sum(), ps)
    np.testing.assert_allclose(g["p"].data, [3.0, 2.0], atol=1e-9)


def test_fd_matches_closed_form_softmax_gradient():
    logits = np.array([0.3, -1.2, 0.8])
    target = 2
    ps = ParamSet({"z": Tensor(logits.copy(), requires_grad=True)})

    def loss(p):
        return T.logsumexp(p["z"]) - p["z"][target]

    fd = finite_difference_grad(loss, ps)
    soft = np.exp(logits) / np.exp(logits).sum()
    closed = soft.copy()
    closed[target] -= 1.0
    np.testing.assert_allclose(fd["z"].data, closed, atol=1e-8)


def test_fd_requires_f64():
    ps = ParamSet({"p": Tensor([1.0], requires_grad=True, dtype=np.float32)})
    with pytest.raises(DtypeMismatchError):
        finite_difference_grad(lambda p: p["p"].sum(), ps)


# ----------------------------------------------------------------------
# layer_norm


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-3)


def test_layer_norm_symmetric_row():
    out = layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-4)


def test_layer_norm_matches_definition():
    rng = np.random.default_rng(3)
    x = rng.normal(size=4)
    out = layer_norm(Tensor(x.copy()), Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-5)
    expect = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    np.testing.assert_allclose(out.data, expect, rtol=1e-12)


def test_layer_norm_gradients():
    rng = np.random.default_rng(4)
    ps = make_params(rng, x=(3, 5), g=(5,), b=(5,))

    def loss(p):
        out = layer_norm(p["x"], p["g"], p["b"])
        return (out * out).mean()

    fd_check(loss, ps)


# ----------------------------------------------------------------------
# remaining op gradients, each against the finite-difference oracle


def test_elementwise_and_reduction_gradients():
    rng = np.random.default_rng(5)
    ps = make_params(rng, a=(3, 4), b=(3, 4), c=(4,))

    def loss(p):
        y = (p["a"] * p["b"] + p["c"]) / (p["b"] * p["b"] + 2.0)
        y = T.texp(y * 0.3) + T.tlog(y * y + 1.5)
        return y.sum() + (p["a"] ** 3.0).mean() + T.tsqrt(p["c"] * p["c"] + 1.0).sum()

    fd_check(loss, ps)


def test_matmul_softmax_gelu_gradients():
    rng = np.random.default_rng(6)
    ps = make_params(rng, x=(4, 3), w=(3, 6), m=(2, 4, 5), n=(2, 5, 3))

    def loss(p):
        h = T.gelu(p["x"] @ p["w"])
        s = T.softmax(h, axis=-1)
        batched = p["m"] @ p["n"]
        return s.sum() + (batched * batched).mean() + T.logsumexp(h, axis=-1).sum()

    fd_check(loss, ps)


def test_shape_op_gradients():
    rng = np.random.default_rng(7)
    ps = make_params(rng, x=(6, 4), y=(2, 4))

    def loss(p):
        stacked = T.concat([p["x"], p["y"]], axis=0)
        picked = T.take(stacked, np.array([0, 3, 3, 7]))
        moved = T.transpose(T.reshape(p["x"], (3, 2, 4)), (1, 0, 2))
        return (picked * picked).sum() + moved.mean() + (p["x"][1:4]).sum()

    fd_check(loss, ps)


def test_abs_gradient_away_from_zero():
    ps = ParamSet({"x": Tensor([-2.0, 3.0, -0.5], requires_grad=True)})
    g = grad(lambda p: T.tabs(p["x"]).sum(), ps)
    np.testing.assert_array_equal(g["x"].data, [-1.0, 1.0, -1.0])


# ----------------------------------------------------------------------
# determinism, dtype discipline, no_grad


def test_ops_bitwise_deterministic():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 16, 16))
    w = rng.normal(size=(4, 3, 5, 5))
    b = rng.normal(size=4)

    def run():
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=2)
        return T.softmax(T.reshape(out, (4, -1)), axis=-1).data

    np.testing.assert_array_equal(run(), run())


def test_dtype_mismatch_raises():
    a = Tensor([1.0], dtype=np.float32)
    b = Tensor([1.0], dtype=np.float64)
    with pytest.raises(DtypeMismatchError):
        _ = a + b


def test_dtype_preserved_f32():
    a = Tensor(np.ones((2, 2)), dtype=np.float32)
    out = T.gelu(a @ a) * 2.0 + 1.0
    assert out.dtype == np.float32


def test_no_grad_builds_no_tape():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        out = (a * a).sum()
    assert out._backward is None and not out.requires_grad


def test_paramset_ordering_and_count():
    ps = ParamSet()
    ps.add("zeta", Tensor(np.zeros((2, 3))))
    ps.add("alpha", Tensor(np.zeros(5)))
    assert ps.names() == ["alpha", "zeta"]
    assert ps.total_parameters() == 11
    with pytest.raises(ValueError, match="duplicate"):
        ps.add("alpha", Tensor(np.zeros(1)))
