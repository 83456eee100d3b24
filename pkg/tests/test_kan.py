"""
Test B-spline bases, KAN layers and the tabular encoder
"""

import numpy as np
import pytest
from scipy.interpolate import BSpline
from scipy.special import expit

from mmfuse.batches import TabularBatch
from mmfuse.errors import ConfigurationError, DataError, DimensionError
from mmfuse.kan import KanLayerParams, TabularEncoderParams, bspline_bases, kan_layer_forward, make_knots, tabular_encode
from mmfuse.nn import Initializer
from mmfuse.tensor import Tensor


def de_boor_basis(x, knots, degree, g):
    """Textbook recursive definition of B_{g,degree}"""
    if degree == 0:
        return 1.0 if knots[g] <= x < knots[g + 1] else 0.0
    left = right = 0.0
    if knots[g + degree] != knots[g]:
        left = (x - knots[g]) / (knots[g + degree] - knots[g]) * de_boor_basis(x, knots, degree - 1, g)
    if knots[g + degree + 1] != knots[g + 1]:
        right = (knots[g + degree + 1] - x) / (knots[g + degree + 1] - knots[g + 1]) * de_boor_basis(x, knots, degree - 1, g + 1)
    return left + right


def test_knots_are_uniform_and_extended():
    """Test grid 8, degree 3, range 3 gives 15 knots with t_3 = -3 and t_11 = 3"""
    t = make_knots(8, 3, 3.0)
    assert t.size == 15
    assert t[3] == pytest.approx(-3.0)
    assert t[11] == pytest.approx(3.0)
    np.testing.assert_allclose(np.diff(t), 0.75)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_partition_of_unity_on_the_range(degree):
    """Test bases sum to one everywhere in [-r, r]"""
    t = make_knots(6, degree, 2.0)
    x = np.linspace(-2.0, 2.0 - 1e-9, 101)
    np.testing.assert_allclose(bspline_bases(x, t, degree)[-1].sum(axis=-1), 1.0, atol=1e-12)


def test_bases_match_recursive_definition_and_scipy():
    """Test vectorized Cox-de Boor against the recursion and scipy's BSpline"""
    t, k = make_knots(5, 3, 1.5), 3
    xs = np.random.default_rng(0).uniform(-1.5, 1.5, size=25)
    bases = bspline_bases(xs, t, k)[-1]
    n_basis = t.size - k - 1
    for g in range(n_basis):
        recursive = np.array([de_boor_basis(x, t, k, g) for x in xs])
        np.testing.assert_allclose(bases[:, g], recursive, atol=1e-12)
        coef = np.zeros(n_basis)
        coef[g] = 1.0
        np.testing.assert_allclose(bases[:, g], BSpline(t, coef, k, extrapolate=False)(xs), atol=1e-12)


def test_spline_inputs_are_clamped():
    """Test an input beyond the range evaluates the splines at the boundary"""
    p = KanLayerParams.create(1, 2, Initializer(0), grid=4, degree=3, bound=1.0)
    p.base_weight.data[:] = 0.0
    far = kan_layer_forward(Tensor([[25.0]]), p).data
    edge = kan_layer_forward(Tensor([[1.0]]), p).data
    np.testing.assert_allclose(far, edge, atol=1e-12)


def test_zero_spline_coefficients_leave_the_silu_base_term():
    """Test phi(x) = w_base * silu(x) when every spline coefficient is zero"""
    p = KanLayerParams.create(3, 2, Initializer(1), grid=5)
    p.spline_coef.data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(4, 3))
    expected = (x * expit(x)) @ p.base_weight.data
    np.testing.assert_allclose(kan_layer_forward(Tensor(x), p).data, expected, atol=1e-12)


def test_kan_layer_rejects_wrong_width():
    p = KanLayerParams.create(3, 2, Initializer(0), grid=5)
    with pytest.raises(DimensionError):
        kan_layer_forward(Tensor(np.ones((2, 4))), p)


def test_invalid_grid_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        make_knots(2, 3, 1.0)
    with pytest.raises(ConfigurationError):
        make_knots(4, 0, 1.0)


def test_tabular_encoder_shapes():
    """Test 17 encoded columns -> 64 hidden -> 256 features"""
    columns = tuple(f"c{i}" for i in range(17))
    p = TabularEncoderParams.create(columns, Initializer(0))
    out = tabular_encode(Tensor(np.random.default_rng(0).normal(size=(3, 17))), p)
    assert out.shape == (3, 256)
    assert [(layer.n_in, layer.n_out) for layer in p.layers] == [(17, 64), (64, 256)]


def test_tabular_encoder_names_the_mismatched_attribute():
    """Test a batch with columns in another order is refused by name"""
    columns = ("gender=F", "gender=M", "age")
    p = TabularEncoderParams.create(columns, Initializer(0), hidden=4, out_dim=4, grid=4)
    batch = TabularBatch(np.zeros((1, 3)), np.zeros(1), ("gender=F", "age", "gender=M"))
    with pytest.raises(DataError, match="gender=M"):
        tabular_encode(batch, p)


def test_partition_of_unity_on_the_default_grid():
    """Test the default grid 8, degree 3 over [-3, 3] at 1000 random points"""
    t = make_knots(8, 3, 3.0)
    x = np.random.default_rng(8).uniform(-3.0, 3.0, size=1000)
    np.testing.assert_allclose(bspline_bases(x, t, 3)[-1].sum(axis=-1), 1.0, atol=1e-12)


def test_degree_one_bases_are_hats():
    """Test a degree-1 basis is exactly 1 at its interior knot and 0 at every other knot"""
    t = make_knots(4, 1, 1.0)
    bases = bspline_bases(t[1:-1], t, 1)[-1]
    assert bases.shape == (5, 5)
    np.testing.assert_array_equal(bases, np.eye(5))


def test_fresh_layer_spline_coefficients_are_small():
    """Test spline coefficients start within a tenth of the base weights' bound"""
    p = KanLayerParams.create(16, 8, Initializer(3))
    bound = np.sqrt(1.0 / 16)
    assert np.abs(p.base_weight.data).max() <= bound
    assert np.abs(p.spline_coef.data).max() <= 0.1 * bound
    assert np.abs(p.spline_coef.data).max() > 0.05 * bound
