"""
Test analytic gradients against central differences for every differentiable op and for the
composed modules
"""

import numpy as np
import pytest

from mmfuse.e3d_msca import BfpuParams, E3dMscaParams, bfpu_fuse, e3d_msca_forward
from mmfuse.encoders import BackboneParams, classify, image_encode
from mmfuse.errors import ContractError
from mmfuse.functional import (
    Conv3dSpec,
    conv3d,
    global_pool3d,
    layer_norm,
    matmul,
    resize_nearest3d,
    sigmoid,
    silu,
    softmax,
)
from mmfuse.gradcheck import grad_check
from mmfuse.kan import TabularEncoderParams, spline_basis, tabular_encode
from mmfuse.losses import bce_loss
from mmfuse.msca_fusion import MscaParams, msca_forward
from mmfuse.nn import Initializer
from mmfuse.tensor import Tensor, clip, concat
from tests.conftest import tiny_model_config

TOL = 1e-5
EPS = 1e-5
SEEDS = range(20)


def weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar objective with random-sign weights of magnitude 0.5..1.5"""
    rng = np.random.default_rng(seed)
    weights = rng.choice([-1.0, 1.0], size=out.shape) * rng.uniform(0.5, 1.5, size=out.shape)
    return (out * Tensor(weights)).sum()


UNARY_OPS = {
    "exp": lambda x: x.exp(),
    "log": lambda x: (x * x + 1.0).log(),
    "relu": lambda x: x.relu(),
    "neg": lambda x: -x,
    "pow": lambda x: (x * x + 0.5) ** 1.5,
    "sigmoid": sigmoid,
    "silu": silu,
    "softmax_last": lambda x: softmax(x, axis=-1),
    "softmax_first": lambda x: softmax(x, axis=0),
    "sum_axis": lambda x: x.sum(axis=1, keepdims=True),
    "mean_axes": lambda x: x.mean(axis=(0, 2)),
    "max_axis": lambda x: x.max(axis=2),
    "reshape": lambda x: x.reshape(4, 15),
    "transpose": lambda x: x.transpose(2, 0, 1),
    "clip": lambda x: clip(x, -0.7, 0.9),
    "div_rhs": lambda x: 1.0 / (x * x + 1.0),
    "layer_norm": layer_norm,
}


def away_from_zero(rng, shape):
    """Random entries with 0.1 <= |x| <= 2, clear of the kinks and flat points at 0"""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 2.0, size=shape)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_op_gradients(name, seed):
    """Test each unary op on a random [3,4,5] input"""
    x = Tensor(away_from_zero(np.random.default_rng(seed), (3, 4, 5)))
    err = grad_check(lambda t: weighted_sum(UNARY_OPS[name](t), seed), x, eps=EPS)
    assert err <= TOL, f"{name}: {err}"


@pytest.mark.parametrize("seed", SEEDS)
def test_binary_broadcast_gradients(seed):
    """Test add/sub/mul/div with a broadcast second operand"""
    rng = np.random.default_rng(seed)
    other = Tensor(rng.uniform(0.5, 1.5, size=(4, 1)))
    x = Tensor(rng.normal(size=(3, 4, 5)))

    def f(t):
        return weighted_sum((t + other) * t - t / other + other * 2.0 - t, seed)

    assert grad_check(f, x, eps=EPS) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradients(seed):
    """Test batched matmul in both operands"""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    assert grad_check(lambda t: weighted_sum(matmul(t, Tensor(b))), Tensor(a), eps=EPS) <= TOL
    assert grad_check(lambda t: weighted_sum(matmul(Tensor(a), t)), Tensor(b), eps=EPS) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_gradients(seed):
    rng = np.random.default_rng(seed)
    other = Tensor(rng.normal(size=(2, 2, 3)))
    x = Tensor(rng.normal(size=(2, 4, 3)))
    assert grad_check(lambda t: weighted_sum(concat([other, t, t], axis=1)), x, eps=EPS) <= TOL


@pytest.mark.parametrize(
    "stride,padding,groups",
    [(1, 1, 1), (2, 1, 1), ((1, 2, 2), 0, 1), (1, 1, 2), (2, 1, 4)],
)
def test_conv3d_gradients(stride, padding, groups):
    """Test conv3d gradients for input, weight and bias"""
    rng = np.random.default_rng(7)
    spec = Conv3dSpec(4, 4, 3, stride=stride, padding=padding, groups=groups)
    x = rng.normal(size=(2, 4, 4, 5, 5))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=4)

    assert grad_check(lambda t: weighted_sum(conv3d(t, Tensor(w), Tensor(b), spec)), Tensor(x), eps=EPS, max_coords=40) <= TOL
    assert grad_check(lambda t: weighted_sum(conv3d(Tensor(x), t, Tensor(b), spec)), Tensor(w), eps=EPS, max_coords=40) <= TOL
    assert grad_check(lambda t: weighted_sum(conv3d(Tensor(x), Tensor(w), t, spec)), Tensor(b), eps=EPS) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_pool_and_resize_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 2, 3, 2)))
    assert grad_check(lambda t: weighted_sum(global_pool3d(t, "avg")), x, eps=EPS) <= TOL
    assert grad_check(lambda t: weighted_sum(global_pool3d(t, "max")), x, eps=EPS) <= TOL
    assert grad_check(lambda t: weighted_sum(resize_nearest3d(t, (4, 5, 3))), x, eps=EPS) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_bce_through_sigmoid(seed):
    """Test the loss composed with the classifier activation"""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=6)
    x = Tensor(rng.normal(size=6))
    assert grad_check(lambda t: bce_loss(sigmoid(t), labels), x, eps=EPS) <= TOL


@pytest.mark.parametrize("seed", range(3))
def test_e3d_msca_forward_gradients(seed):
    """Test input and parameter gradients through CAB -> SAB -> DCFB"""
    rng = np.random.default_rng(seed)
    params = E3dMscaParams.create(8, Initializer(seed), reduction_ratio=2, sab_kernel=3)
    x = Tensor(rng.normal(size=(2, 8, 3, 4, 4)))
    assert grad_check(lambda t: weighted_sum(e3d_msca_forward(t, params)), x, eps=EPS, max_coords=30, seed=seed) <= TOL

    w1 = params.cab.mlp_w1

    def via_w1(t):
        params.cab.mlp_w1 = t
        try:
            return weighted_sum(e3d_msca_forward(x, params))
        finally:
            params.cab.mlp_w1 = w1

    assert grad_check(via_w1, w1, eps=EPS, max_coords=20) <= TOL


@pytest.mark.parametrize("seed", range(3))
def test_bfpu_gradients(seed):
    rng = np.random.default_rng(seed)
    params = BfpuParams.create(4, 6, Initializer(seed))
    f_a = Tensor(rng.normal(size=(2, 4, 3, 3, 3)))
    f_b = Tensor(rng.normal(size=(2, 6, 3, 3, 3)))
    assert grad_check(lambda t: weighted_sum(bfpu_fuse(t, f_b, params)), f_a, eps=EPS, max_coords=30) <= TOL
    assert grad_check(lambda t: weighted_sum(bfpu_fuse(f_a, t, params)), f_b, eps=EPS, max_coords=30) <= TOL


@pytest.mark.parametrize("seed", range(3))
def test_msca_forward_gradients(seed):
    """Test gradients through pyramid, bidirectional attention and both BSF merges"""
    rng = np.random.default_rng(seed)
    params = MscaParams.create(Initializer(seed), dims=(16, 8, 4), token_dim=4, heads=2)
    img = Tensor(rng.normal(size=(3, 16)))
    tab = Tensor(rng.normal(size=(3, 16)))
    assert grad_check(lambda t: weighted_sum(msca_forward(t, tab, params)), img, eps=EPS) <= TOL
    assert grad_check(lambda t: weighted_sum(msca_forward(img, t, params)), tab, eps=EPS) <= TOL

    w_q = params.img2tab[1].w_q

    def via_wq(t):
        params.img2tab[1].w_q = t
        try:
            return weighted_sum(msca_forward(img, tab, params))
        finally:
            params.img2tab[1].w_q = w_q

    assert grad_check(via_wq, w_q, eps=EPS) <= TOL


def supported_coefficients(x, layer, count, seed):
    """Flat indices of spline coefficients whose basis reaches 0.05 on at least one sample"""
    peak = spline_basis(x, layer).data.max(axis=0)
    supported = np.flatnonzero(np.broadcast_to((peak >= 0.05)[..., None], layer.spline_coef.shape))
    return np.random.default_rng(seed).choice(supported, size=min(count, supported.size), replace=False)


@pytest.mark.parametrize("seed", range(3))
def test_tabular_encode_gradients(seed):
    """Test KAN gradients in the inputs and the spline coefficients"""
    rng = np.random.default_rng(seed)
    columns = tuple(f"c{i}" for i in range(5))
    params = TabularEncoderParams.create(columns, Initializer(seed), hidden=6, out_dim=4, grid=5)
    x = Tensor(rng.uniform(-2.5, 2.5, size=(8, 5)))
    assert grad_check(lambda t: weighted_sum(tabular_encode(t, params)), x, eps=EPS) <= TOL

    layer = params.layers[0]
    coef = layer.spline_coef

    def via_coef(t):
        layer.spline_coef = t
        try:
            return weighted_sum(tabular_encode(x, params))
        finally:
            layer.spline_coef = coef

    assert grad_check(via_coef, coef, eps=EPS, coords=supported_coefficients(x, layer, 40, seed)) <= TOL


@pytest.mark.parametrize("use_e3d_msca", [True, False])
def test_image_encode_gradients(use_e3d_msca):
    """Test gradients through the whole image encoder at toy geometry"""
    cfg = tiny_model_config(use_e3d_msca=use_e3d_msca, sab_kernel=3)
    params = BackboneParams.create(cfg, Initializer(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 1, *cfg.geometry)))
    assert grad_check(lambda t: weighted_sum(image_encode(t, params)), x, eps=EPS, max_coords=20) <= TOL

    head = params.head.weight

    def via_head(t):
        params.head.weight = t
        try:
            return weighted_sum(classify(image_encode(x, params), _unit_head(cfg.feature_dim)))
        finally:
            params.head.weight = head

    assert grad_check(via_head, head, eps=EPS, max_coords=20) <= TOL


def _unit_head(dim):
    from mmfuse.nn import Linear

    return Linear(Tensor(np.linspace(-1.0, 1.0, dim).reshape(dim, 1)), Tensor(np.zeros(1)))


def test_grad_check_requires_scalar_output():
    """Test non-scalar objectives are rejected"""
    with pytest.raises(ContractError):
        grad_check(lambda t: t * 2.0, Tensor(np.ones(3)))


def test_grad_check_detects_a_wrong_gradient():
    """Test a deliberately broken backward is reported"""
    from mmfuse.tensor import Function

    class BadSquare(Function):
        def forward(self, a):
            self.a = a
            return a * a

        def backward(self, grad):
            return (grad * self.a,)  # should be 2a

    err = grad_check(lambda t: BadSquare.apply(t).sum(), Tensor([1.0, 2.0]))
    assert err > 0.1
