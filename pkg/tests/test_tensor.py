import io
import threading

import numpy as np
import pytest

from tpcvit import tensor as T
from tpcvit.errors import ContractError, DimensionError, FormatError, NumericalError
from tpcvit.gradcheck import check_gradients
from tpcvit.tensor import Tensor

TOL = 1e-6


def param(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


def assert_grads(fn, params):
    errors = check_gradients(fn, params)
    assert max(errors) < TOL, errors


def test_add_broadcast_forward_and_grad(rng):
    a, b = param(rng, 3, 4), param(rng, 4)
    assert np.allclose((a + b).data, a.data + b.data)
    assert_grads(lambda: T.tsum((a + b) * (a + b)), [a, b])


@pytest.mark.parametrize(
    "build",
    [
        lambda a, b: a - b,
        lambda a, b: a * b,
        lambda a, b: a / (b * b + 1.0),
        lambda a, b: T.power(b * b + 1.0, 1.5) * a,
        lambda a, b: T.where(a.data > 0, a, b),
    ],
    ids=["sub", "mul", "div", "power", "where"],
)
def test_binary_op_gradients(rng, build):
    a, b = param(rng, 2, 3), param(rng, 2, 3)
    w = rng.standard_normal((2, 3))
    assert_grads(lambda: T.tsum(build(a, b) * w), [a, b])


@pytest.mark.parametrize(
    "op",
    [T.exp, T.sigmoid, T.gelu, lambda x: T.log(x * x + 0.5)],
    ids=["exp", "sigmoid", "gelu", "log"],
)
def test_unary_op_gradients(rng, op):
    x = param(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    assert_grads(lambda: T.tsum(op(x) * w), [x])


def test_reductions(rng):
    x = param(rng, 2, 3, 4)
    assert np.allclose(T.tsum(x, axis=(0, 2)).data, x.data.sum(axis=(0, 2)))
    assert np.allclose(T.mean(x, axis=1, keepdims=True).data, x.data.mean(axis=1, keepdims=True))
    w = rng.standard_normal((2, 4))
    assert_grads(lambda: T.tsum(T.mean(x, axis=1) * w), [x])
    assert_grads(lambda: T.tsum(T.tsum(x, axis=-1, keepdims=True) ** 2), [x])


def test_batched_matmul_gradients(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    assert np.allclose(T.matmul(a, b).data, a.data @ b.data)
    w = rng.standard_normal((2, 3, 5))
    assert_grads(lambda: T.tsum(T.matmul(a, b) * w), [a, b])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_softmax_rows_sum_to_one_and_mask(rng):
    x = param(rng, 3, 6)
    mask = rng.random((3, 6)) < 0.6
    mask[:, 0] = True
    out = T.softmax(x, mask=mask)
    assert np.allclose(out.data.sum(axis=-1), 1.0)
    assert np.all(out.data[~mask] == 0.0)
    w = rng.standard_normal((3, 6))
    assert_grads(lambda: T.tsum(T.softmax(x, mask=mask) * w), [x])


def test_softmax_is_shift_stable():
    out = T.softmax(Tensor(np.array([1000.0, 1001.0, 999.0])))
    assert np.all(np.isfinite(out.data))
    assert np.isclose(out.data.sum(), 1.0)


def test_log_softmax_and_cross_entropy(rng):
    logits = param(rng, 4, 3)
    labels = np.array([0, 2, 1, 2])
    expected = -np.mean(np.log(np.exp(logits.data) / np.exp(logits.data).sum(1, keepdims=True))[np.arange(4), labels])
    assert np.isclose(T.cross_entropy(logits, labels).item(), expected)
    assert_grads(lambda: T.cross_entropy(logits, labels), [logits])


def test_cross_entropy_rejects_bad_labels(rng):
    with pytest.raises(ContractError):
        T.cross_entropy(param(rng, 2, 3), [0, 3])


def test_layernorm_gradients(rng):
    x, w, b = param(rng, 2, 3, 5), param(rng, 5), param(rng, 5)
    out = T.layernorm(x, w, b)
    normed = (x.data - x.data.mean(-1, keepdims=True)) / np.sqrt(x.data.var(-1, keepdims=True) + 1e-6)
    assert np.allclose(out.data, normed * w.data + b.data)
    g = rng.standard_normal((2, 3, 5))
    assert_grads(lambda: T.tsum(T.layernorm(x, w, b) * g), [x, w, b])


def test_shape_ops_gradients(rng):
    x, y = param(rng, 2, 3, 4), param(rng, 2, 1, 4)
    w = rng.standard_normal((4, 2, 4))
    assert_grads(lambda: T.tsum(T.transpose(T.concat([x, y], axis=1), (1, 0, 2)) * w), [x, y])
    v = rng.standard_normal((2, 12))
    assert_grads(lambda: T.tsum(T.reshape(x, (2, 12)) * v), [x])
    assert_grads(lambda: T.tsum(T.stack([x, x * 2.0], axis=1) ** 2), [x])


def test_getitem_basic_and_advanced(rng):
    x = param(rng, 5, 3)
    assert_grads(lambda: T.tsum(x[1:4, ::2] ** 2), [x])
    idx = np.array([0, 2, 2, 4])
    assert_grads(lambda: T.tsum(T.gather_rows(x, idx) ** 2), [x])
    with pytest.raises(ContractError):
        T.gather_rows(x, [7])


def test_backward_twice_raises(rng):
    x = param(rng, 3)
    loss = T.tsum(x * x)
    loss.backward()
    with pytest.raises(ContractError):
        loss.backward()


def test_backward_requires_scalar(rng):
    with pytest.raises(ContractError):
        (param(rng, 3) * 2.0).backward()


def test_gradients_accumulate_over_shared_nodes(rng):
    x = param(rng, 3)
    y = x * 3.0
    T.tsum(y + y).backward()
    assert np.allclose(x.grad, 6.0)


def test_no_grad_builds_no_graph(rng):
    x = param(rng, 3)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_debug_mode_flags_non_finite():
    x = Tensor(np.array([-1.0, 1.0]), requires_grad=True)
    with np.errstate(invalid="ignore"):
        T.log(x)  # silent outside debug mode
        with T.debug_mode(), pytest.raises(NumericalError):
            T.log(x)


def test_debug_flag_is_per_thread():
    seen = []
    with T.debug_mode():
        t = threading.Thread(target=lambda: seen.append(T._debug.get()))
        t.start()
        t.join()
    assert seen == [False]


def test_op_counter_matmul_is_macs(rng):
    a, b = Tensor(rng.standard_normal((2, 3, 4))), Tensor(rng.standard_normal((4, 5)))
    with T.count_ops() as counter:
        T.matmul(a, b)
        T.softmax(Tensor(np.zeros((3, 7))))
    assert counter.by_kind["matmul"] == 2 * 3 * 5 * 4
    assert counter.by_kind["softmax"] == 3 * 21


def test_sigmoid_extremes_do_not_overflow():
    with np.errstate(over="raise"):
        out = T.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    assert np.allclose(out, [0.0, 0.5, 1.0])


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64, np.uint8])
def test_serialization_round_trip(rng, dtype):
    arr = (rng.standard_normal((2, 3, 4)) * 50).astype(dtype)
    raw = T.tensor_to_bytes(arr)
    back = T.read_tensor(io.BytesIO(raw))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert np.array_equal(back, arr)
    assert T.tensor_to_bytes(back) == raw


def test_serialization_layout():
    raw = T.tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float64))
    assert raw[:1] == b"\x01"
    assert raw[1:5] == (2).to_bytes(4, "little")
    assert raw[5:21] == (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
    assert len(raw) == 21 + 16


def test_serialization_truncated_and_bad_tag():
    raw = T.tensor_to_bytes(np.zeros(4))
    with pytest.raises(FormatError):
        T.read_tensor(io.BytesIO(raw[:-1]))
    with pytest.raises(FormatError):
        T.read_tensor(io.BytesIO(b"\x09" + raw[1:]))


def test_float32_default_dtype():
    T.set_default_dtype(np.float32)
    try:
        assert Tensor([1, 2]).dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
