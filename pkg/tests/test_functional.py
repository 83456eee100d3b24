"""
Test functional ops against direct numpy oracles
"""

import itertools
import threading

import numpy as np
import pytest

import mmfuse.functional as F
from mmfuse.errors import ConfigurationError, DimensionError
from mmfuse.functional import (
    Conv3dSpec,
    conv3d,
    dropout,
    global_pool3d,
    layer_norm,
    matmul,
    resize_nearest3d,
    sigmoid,
    softmax,
)
from mmfuse.tensor import Tensor


def conv3d_oracle(x, w, b, stride, padding, groups):
    """Direct seven-loop cross-correlation"""
    n_batch, c_in, *grid = x.shape
    c_out, c_in_g, *kernel = w.shape
    c_out_g = c_out // groups
    xp = np.pad(x, ((0, 0), (0, 0), *((p, p) for p in padding)))
    out_grid = [(n + 2 * p - k) // s + 1 for n, p, k, s in zip(grid, padding, kernel, stride)]
    out = np.zeros((n_batch, c_out, *out_grid))
    for n, co in itertools.product(range(n_batch), range(c_out)):
        g = co // c_out_g
        for z, y, x_ in itertools.product(*(range(m) for m in out_grid)):
            z0, y0, x0 = z * stride[0], y * stride[1], x_ * stride[2]
            patch = xp[n, g * c_in_g : (g + 1) * c_in_g, z0 : z0 + kernel[0], y0 : y0 + kernel[1], x0 : x0 + kernel[2]]
            out[n, co, z, y, x_] = np.sum(patch * w[co]) + b[co]
    return out


CONV_GRID = [(3, stride, padding, groups) for stride, padding, groups in itertools.product((1, 2), (0, 1), (1, 4))]


@pytest.mark.parametrize(
    "kernel,stride,padding,groups",
    [
        *CONV_GRID,
        ((1, 3, 2), (1, 2, 2), (0, 1, 1), 1),
        (3, 1, 1, 2),
        (3, (2, 1, 2), 1, 2),
        ((3, 1, 1), 1, (1, 0, 0), 4),
    ],
)
def test_conv3d_matches_direct_loop(kernel, stride, padding, groups):
    """Test conv3d equals the direct loop over the stride/padding/groups grid"""
    rng = np.random.default_rng(11)
    spec = Conv3dSpec(4, 4, kernel, stride=stride, padding=padding, groups=groups)
    x = rng.normal(size=(2, 4, 5, 6, 4))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=4)

    got = conv3d(Tensor(x), Tensor(w), Tensor(b), spec).data
    want = conv3d_oracle(x, w, b, spec.stride, spec.padding, groups)
    np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_conv3d_thread_count_does_not_change_results(monkeypatch):
    """Test the batch-parallel path is bitwise identical to the serial one"""
    rng = np.random.default_rng(5)
    spec = Conv3dSpec.same(3, 6, 3)
    x = rng.normal(size=(5, 3, 4, 4, 4))
    w = rng.normal(size=spec.weight_shape)

    def run():
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        out = conv3d(xt, wt, None, spec)
        (out * out).sum().backward()
        return out.data, xt.grad, wt.grad

    serial = run()
    monkeypatch.setattr(F, "KERNEL_THREADS", 3)
    threaded = run()
    for a, b in zip(serial, threaded):
        np.testing.assert_array_equal(a, b)


def test_conv3d_shape_errors():
    """Test channel mismatch and empty output grids are rejected"""
    spec = Conv3dSpec(2, 2, 3)
    with pytest.raises(DimensionError):
        conv3d(Tensor(np.ones((1, 3, 4, 4, 4))), Tensor(np.ones(spec.weight_shape)), None, spec)
    with pytest.raises(ConfigurationError):
        conv3d(Tensor(np.ones((1, 2, 2, 4, 4))), Tensor(np.ones(spec.weight_shape)), None, spec)
    with pytest.raises(DimensionError):
        Conv3dSpec(3, 4, 3, groups=2)


def test_matmul_batched_and_named_error():
    """Test batched matmul and the shapes named on mismatch"""
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)
    with pytest.raises(DimensionError, match=r"\(2, 3, 4\)"):
        matmul(Tensor(a), Tensor(np.ones((3, 5))))


def test_matmul_matches_triple_loop():
    """Test a random 5x7 by 7x3 product element by element"""
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    want = np.zeros((5, 3))
    for i, j, k in itertools.product(range(5), range(3), range(7)):
        want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, want, atol=1e-12, rtol=0)


@pytest.mark.parametrize(
    "logits,expected",
    [([0.0, 0.0], [0.5, 0.5]), ([np.log(1.0), np.log(3.0)], [0.25, 0.75])],
)
def test_softmax_analytic_values(logits, expected):
    np.testing.assert_allclose(softmax(Tensor([logits]), axis=-1).data, [expected], atol=1e-12)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    """Test softmax is row-stochastic and unchanged by a constant shift"""
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 7))
    p = softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(p.sum(axis=-1), np.ones(4), atol=1e-12)
    np.testing.assert_allclose(softmax(Tensor(x + 100.0), axis=-1).data, p, atol=1e-12)


def test_sigmoid_is_overflow_safe():
    """Test sigmoid saturates without warnings or NaN for large inputs"""
    out = sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_global_pool_modes():
    """Test avg and max pooling produce [B,C,1,1,1]"""
    x = Tensor(np.arange(16.0).reshape(1, 2, 2, 2, 2))
    np.testing.assert_allclose(global_pool3d(x, "avg").data.reshape(2), [3.5, 11.5])
    np.testing.assert_allclose(global_pool3d(x, "max").data.reshape(2), [7.0, 15.0])
    with pytest.raises(ConfigurationError):
        global_pool3d(x, "median")


def test_resize_nearest_index_rule_and_backward():
    """Test source index floor(i * in / out) and that upsampling gradients sum"""
    x = Tensor(np.arange(2.0).reshape(1, 1, 2, 1, 1), requires_grad=True)
    up = resize_nearest3d(x, (4, 2, 1))
    np.testing.assert_allclose(up.data[0, 0, :, 0, 0], [0.0, 0.0, 1.0, 1.0])
    up.sum().backward()
    np.testing.assert_allclose(x.grad.reshape(2), [4.0, 4.0])


def test_dropout_identity_in_eval_and_scaled_in_train():
    """Test inverted dropout keeps the expectation and is a no-op outside training"""
    x = Tensor(np.ones((200, 50)))
    assert dropout(x, 0.5, None, train_mode=False) is x
    out = dropout(x, 0.5, np.random.default_rng(0), train_mode=True).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05
    with pytest.raises(ConfigurationError):
        dropout(x, 0.5, None, train_mode=True)


def test_layer_norm_standardizes_the_last_axis():
    """Test every row comes out with mean 0 and variance 1, whatever its scale"""
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 9)) * np.array([[0.5], [1.0], [50.0], [3.0]]) + 7.0
    out = layer_norm(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=2e-3)
    np.testing.assert_allclose(out[2], (x[2] - x[2].mean()) / x[2].std(), atol=1e-7)
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones((3, 1))))


def test_kernel_pool_is_built_once_under_concurrent_first_use(monkeypatch):
    """Test threads racing on the first conv3d call all get the same worker pool"""
    monkeypatch.setattr(F, "_executor", None)
    start = threading.Barrier(8)
    pools = []

    def first_use():
        start.wait()
        pools.append(F.kernel_pool())

    threads = [threading.Thread(target=first_use) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(pools) == 8
    assert len({id(pool) for pool in pools}) == 1
    pools[0].shutdown()
