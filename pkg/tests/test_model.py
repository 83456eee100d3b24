"""
Test the fusion modes of the full network
"""

import numpy as np
import pytest

from mmfuse import encoders, kan, msca_fusion
from mmfuse.functional import layer_norm
from mmfuse.model import FusionModel
from mmfuse.nn import parameters
from mmfuse.tensor import Tensor
from tests.conftest import tiny_model_config

COLUMNS = tuple(f"c{i}" for i in range(17))


def inputs(batch=3, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(batch, 1, 4, 16, 16))), Tensor(rng.normal(size=(batch, 17)))


def count_calls(monkeypatch, module, name):
    calls = []
    original = getattr(module, name)

    def wrapper(*args, **kwargs):
        calls.append(name)
        return original(*args, **kwargs)

    monkeypatch.setattr(module, name, wrapper)
    return calls


@pytest.mark.parametrize("mode", ["msca", "cross_attention", "late_fusion", "image_only"])
def test_every_mode_gives_one_logit_per_sample(mode):
    model = FusionModel.create(tiny_model_config(fusion_mode=mode), COLUMNS, seed=0)
    vol, tab = inputs()
    assert model.forward_logits(vol, tab).shape == (3,)
    probs = model.predict_proba(vol, tab).data
    assert np.all((probs > 0) & (probs < 1))


def test_late_fusion_averages_the_two_heads():
    """Test logit = (head(norm(img)) + tab_head(norm(tab))) / 2"""
    model = FusionModel.create(tiny_model_config(fusion_mode="late_fusion"), COLUMNS, seed=1)
    vol, tab = inputs()
    img = layer_norm(encoders.image_encode(vol, model.image))
    tab_feat = layer_norm(kan.tabular_encode(tab, model.tabular))
    expected = (encoders.logits(img, model.head).data + encoders.logits(tab_feat, model.tab_head).data) / 2
    np.testing.assert_allclose(model.forward_logits(vol, tab).data, expected, atol=1e-12)


def test_cross_attention_uses_one_scale_and_no_bsf(monkeypatch):
    fuse = count_calls(monkeypatch, msca_fusion, "fuse_scale")
    merge = count_calls(monkeypatch, msca_fusion, "bsf_merge")
    model = FusionModel.create(tiny_model_config(fusion_mode="cross_attention"), COLUMNS)
    model.forward_logits(*inputs())
    assert len(fuse) == 1
    assert merge == []
    assert model.msca is None


def test_msca_fuses_three_scales_and_merges_twice(monkeypatch):
    fuse = count_calls(monkeypatch, msca_fusion, "fuse_scale")
    merge = count_calls(monkeypatch, msca_fusion, "bsf_merge")
    FusionModel.create(tiny_model_config(), COLUMNS).forward_logits(*inputs())
    assert len(fuse) == 3
    assert len(merge) == 2


def test_image_only_never_touches_the_tabular_branch(monkeypatch):
    tab_calls = count_calls(monkeypatch, kan, "tabular_encode")
    fuse = count_calls(monkeypatch, msca_fusion, "fuse_scale")
    model = FusionModel.create(tiny_model_config(fusion_mode="image_only"), COLUMNS)
    vol, _ = inputs()
    model.forward_logits(vol, None)
    assert tab_calls == [] and fuse == []
    assert model.tabular is None


def test_same_seed_same_parameters():
    a = FusionModel.create(tiny_model_config(), COLUMNS, seed=7)
    b = FusionModel.create(tiny_model_config(), COLUMNS, seed=7)
    for pa, pb in zip(parameters(a), parameters(b), strict=True):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_gradients_reach_every_parameter():
    model = FusionModel.create(tiny_model_config(use_dropout=False), COLUMNS, seed=2)
    model.forward_logits(*inputs()).sum().backward()
    assert all(p.grad is not None for p in parameters(model))


def _scale_branch(model, branch, factor):
    if branch == "image":
        head = model.image.head
        head.weight.data = head.weight.data * factor
        head.bias.data = head.bias.data * factor
    else:
        last = model.tabular.layers[-1]
        last.base_weight.data = last.base_weight.data * factor
        last.spline_coef.data = last.spline_coef.data * factor


@pytest.mark.parametrize("mode", ["msca", "cross_attention", "late_fusion"])
@pytest.mark.parametrize("branch", ["image", "tabular"])
def test_branch_output_scale_does_not_change_the_logit(mode, branch):
    """Test rescaling one branch's features leaves the fused logit unchanged"""
    model = FusionModel.create(tiny_model_config(fusion_mode=mode), COLUMNS, seed=4)
    vol, tab = inputs()
    _scale_branch(model, branch, 1000.0)
    before = model.forward_logits(vol, tab).data
    _scale_branch(model, branch, 10.0)
    np.testing.assert_allclose(model.forward_logits(vol, tab).data, before, rtol=1e-4, atol=1e-7)

