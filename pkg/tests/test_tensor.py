import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from floodsense import tensor as T
from floodsense.nn import LayerNorm, Linear
from floodsense.tensor import Tensor
from helpers import check_op_grads


def R(*shape, seed=0, low=None):
    rng = np.random.default_rng(seed + sum(shape))
    a = rng.standard_normal(shape)
    return np.abs(a) + low if low is not None else a


UNARY = {
    "neg": T.neg,
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "silu": T.silu,
    "softplus": T.softplus,
    "abs": T.abs_,
    "sum_axis": lambda a: T.sum_(a, axis=1),
    "sum_keep": lambda a: T.sum_(a, axis=0, keepdims=True),
    "mean": lambda a: T.mean(a, axis=(0, 1)),
    "reshape": lambda a: T.reshape(a, (4, 3)),
    "transpose": lambda a: T.transpose(a, (1, 0)),
    "getitem": lambda a: T.getitem(a, (np.array([0, 0, 2]), np.array([1, 1, 3]))),
    "take": lambda a: T.take(a, np.array([[0, 2], [2, 2]]), axis=1),
    "softmax": lambda a: T.softmax(a, axis=-1),
    "log_softmax": lambda a: T.log_softmax(a, axis=0),
    "relu": T.relu,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    a = R(3, 4, seed=1)
    if name in ("abs", "relu"):
        a = np.where(np.abs(a) < 0.1, 0.5, a)   # keep away from the kink
    check_op_grads(UNARY[name], [a])


def test_log_gradient_and_domain():
    check_op_grads(T.log, [R(3, 4, low=0.5)])
    with pytest.raises(ValueError):
        T.log(Tensor(np.array([1.0, 0.0])))


BINARY = {
    "add": (T.add, (3, 4), (4,)),
    "sub": (T.sub, (3, 1), (1, 4)),
    "mul": (T.mul, (2, 3, 4), (3, 1)),
    "matmul": (T.matmul, (2, 3, 4), (4, 5)),
    "matmul_batched": (T.matmul, (2, 3, 4), (2, 4, 2)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_with_broadcasting(name):
    op, sa, sb = BINARY[name]
    check_op_grads(op, [R(*sa, seed=2), R(*sb, seed=3)])


def test_div_gradient():
    check_op_grads(T.div, [R(3, 4), R(3, 4, low=0.5)])


def test_concat_stack_gradients():
    check_op_grads(lambda a, b: T.concat([a, b], axis=1), [R(2, 3), R(2, 5)])
    check_op_grads(lambda a, b: T.stack([a, b], axis=1), [R(2, 3), R(2, 3, seed=9)])


def test_layer_norm_gradients():
    check_op_grads(lambda x, g, b: T.layer_norm(x, g, b), [R(2, 3, 6), R(6, seed=4), R(6, seed=5)])


def test_depthwise_conv_gradients():
    check_op_grads(T.depthwise_conv2d, [R(2, 3, 5, 4), R(3, 3, 3, seed=7)])


def test_conv2d_embed_gradients():
    check_op_grads(lambda x, w, b: T.conv2d_embed(x, w, b, stride=2), [R(3, 4, 6), R(5, 3, 2, 2), R(5)])


def test_upsample_and_merge_gradients():
    check_op_grads(lambda x: T.upsample(x, 3), [R(2, 2, 3)])
    check_op_grads(lambda x: T.upsample2x(x, channels_last=True), [R(2, 3, 4)])
    check_op_grads(lambda x, w: T.downsample2x_merge(x, w), [R(4, 2, 3), R(12, 5)])


def test_depthwise_conv_matches_direct_loops():
    x, k = R(2, 5, 6), R(2, 3, 3, seed=1)
    got = T.depthwise_conv2d(Tensor(x), Tensor(k)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    want = np.zeros_like(x)
    for c in range(2):
        for i in range(5):
            for j in range(6):
                want[c, i, j] = np.sum(xp[c, i:i + 3, j:j + 3] * k[c])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv2d_embed_matches_einsum():
    x, w, b = R(3, 4, 6), R(5, 3, 2, 2), R(5)
    got = T.conv2d_embed(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    patches = x.reshape(3, 2, 2, 3, 2).transpose(1, 3, 0, 2, 4)
    want = np.einsum("hwcij,ocij->ohw", patches, w) + b[:, None, None]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        T.depthwise_conv2d(Tensor(R(1, 4, 4)), Tensor(R(1, 2, 2)))


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_accumulates_across_calls():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    assert x.grad[0] == 6.0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad and y._parents == ()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(FloatingPointError):
        T.exp(Tensor(np.array([1000.0])))


def test_scalar_seed_required():
    with pytest.raises(ValueError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    lin = Linear(rng, 3, 4, dtype=np.float32)
    norm = LayerNorm(4, np.float32)
    params = list(lin.named_parameters("lin.")) + list(norm.named_parameters("norm."))
    path = tmp_path / "w.fds"
    T.save_params(path, params)
    back = T.load_params(path)
    assert list(back) == [n for n, _ in params]
    for n, p in params:
        assert back[n].dtype == np.float32
        np.testing.assert_array_equal(back[n], p.data)
    blob = path.read_bytes()
    assert blob[:4] == b"FDSW" and int.from_bytes(blob[4:8], "little") == 1


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.fds"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ValueError):
        T.load_params(p)


shapes = st.tuples(st.integers(1, 4), st.integers(1, 4))


@given(hnp.arrays(np.float64, shapes, elements=st.floats(-5, 5)), st.booleans(), st.booleans())
def test_unbroadcast_restores_operand_shapes(a, collapse_rows, collapse_cols):
    shape_b = (1 if collapse_rows else a.shape[0], 1 if collapse_cols else a.shape[1])
    b = Tensor(np.ones(shape_b), requires_grad=True)
    A = Tensor(a, requires_grad=True)
    (A * b).sum().backward()
    assert b.grad.shape == shape_b and A.grad.shape == a.shape
    np.testing.assert_allclose(b.grad.sum(), a.sum(), atol=1e-9)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-30, 30)))
def test_softmax_is_a_distribution(a):
    s = T.softmax(Tensor(a), axis=-1).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.log_softmax(Tensor(a)).data, np.log(np.maximum(s, 1e-300)), atol=1e-8)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
                  elements=st.floats(-10, 10)).filter(lambda a: (a.std(-1) > 1e-2).all()))
def test_layer_norm_standardizes(a):
    c = a.shape[-1]
    y = T.layer_norm(Tensor(a), Tensor(np.ones(c)), Tensor(np.zeros(c)), eps=0.0).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-9)
    np.testing.assert_allclose(y.std(-1), 1, atol=1e-6)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))
def test_upsample_then_block_mean_is_identity(h, w, f):
    x = np.random.default_rng(h * 10 + w).standard_normal((2, h, w))
    up = T.upsample(Tensor(x), f).data
    back = up.reshape(2, h, f, w, f).mean(axis=(2, 4))
    np.testing.assert_allclose(back, x, atol=1e-12)
