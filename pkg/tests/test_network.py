import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dihc import losses as L
from dihc import tensor as T
from dihc.network import (
    DEFAULT_SUBMODELS,
    ConfigurationError,
    EnsembleConfig,
    SubModelConfig,
    build_ensemble,
    build_submodel,
    ensemble_forward,
    forward_multiscale,
    imd_configs,
)
from dihc.tensor import Tensor

SMALL = dict(base_channels=4, groups=2)


def small(cfg):
    from dataclasses import replace
    return replace(cfg, **SMALL)


def conv_param_count(model):
    return sum(p.size for name, p in model.params.items() if ".up." not in name)


def test_default_configs():
    modes = [(c.norm_mode, c.upsample_mode) for c in DEFAULT_SUBMODELS]
    assert modes == [("group", "trilinear"), ("batch", "transposed_conv"), ("instance", "nearest")]
    assert all(c.base_channels == 8 and c.depth == 4 and c.num_classes == 2 for c in DEFAULT_SUBMODELS)


def test_build_is_deterministic():
    a = build_submodel(DEFAULT_SUBMODELS[0], 5)
    b = build_submodel(DEFAULT_SUBMODELS[0], 5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    c = build_submodel(DEFAULT_SUBMODELS[0], 6)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_parameter_census():
    m1, m2, m3 = (build_submodel(c, 0) for c in DEFAULT_SUBMODELS)
    assert m1.num_parameters() == m3.num_parameters()
    assert conv_param_count(m1) == conv_param_count(m2) == conv_param_count(m3)
    up2 = sum(p.size for n, p in m2.params.items() if ".up." in n)
    up1 = sum(p.size for n, p in m1.params.items() if ".up." in n)
    # transposed 2x2x2 kernels carry 8x the weights of the 1x1x1 projections
    assert up2 > up1
    assert m2.num_parameters() - m1.num_parameters() == up2 - up1
    assert sum(1 for n in m1.params if n.startswith("head") and n.endswith("weight")) == 4


def test_forward_on_zeros_shapes_and_range():
    for cfg in DEFAULT_SUBMODELS:
        m = build_submodel(small(cfg), 1)
        pred = forward_multiscale(m, Tensor(np.zeros((2, 1, 16, 16, 16))), training=True)
        assert pred.num_scales == 4
        for s in range(1, 5):
            p = pred.scale(s).data
            assert p.shape == (2, 16, 16, 16)
            assert np.all(np.isfinite(p)) and np.all(p > 0) and np.all(p < 1)


def test_scale_index_is_one_based():
    m = build_submodel(small(DEFAULT_SUBMODELS[0]), 1)
    pred = forward_multiscale(m, Tensor(np.zeros((1, 1, 8, 8, 8))), training=False)
    assert pred.scale(1) is pred.probs[0]
    with pytest.raises(IndexError):
        pred.scale(0)
    with pytest.raises(IndexError):
        pred.scale(5)


def test_inference_is_repeatable():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 1, 16, 16, 16)))
    for cfg in DEFAULT_SUBMODELS:
        m = build_submodel(small(cfg), 2)
        forward_multiscale(m, x, training=True)  # populate batch-norm statistics
        a = forward_multiscale(m, x, training=False)
        b = forward_multiscale(m, x, training=False)
        for s in range(1, 5):
            np.testing.assert_array_equal(a.scale(s).data, b.scale(s).data)


def test_ensemble_order_and_diversity():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 1, 16, 16, 16)))
    ens = EnsembleConfig(tuple(small(c) for c in DEFAULT_SUBMODELS), (16, 16, 16), seed=3)
    models = build_ensemble(ens, seeds=[7, 7, 7])
    preds = ensemble_forward(list(reversed(models)), x, training=True)
    assert [p.model_index for p in preds] == [1, 2, 3]
    d12 = np.abs(preds[0].scale(1).data - preds[1].scale(1).data).max()
    d13 = np.abs(preds[0].scale(1).data - preds[2].scale(1).data).max()
    assert d12 > 1e-3 and d13 > 1e-3


def test_identical_configs_and_seeds_give_identical_predictions():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 1, 16, 16, 16)))
    cfgs = tuple(small(c) for c in imd_configs(False))
    models = build_ensemble(EnsembleConfig(cfgs, (16, 16, 16)), seeds=[4, 4, 4])
    preds = ensemble_forward(models, x, training=True)
    for s in range(1, 5):
        np.testing.assert_array_equal(preds[0].scale(s).data, preds[1].scale(s).data)
        np.testing.assert_array_equal(preds[0].scale(s).data, preds[2].scale(s).data)


def test_imd_configs():
    on = imd_configs(True)
    assert [(c.norm_mode, c.upsample_mode) for c in on] == [
        ("group", "trilinear"), ("batch", "transposed_conv"), ("instance", "nearest")]
    off = imd_configs(False)
    assert len({(c.norm_mode, c.upsample_mode) for c in off}) == 1
    assert off[0].norm_mode == "batch" and off[0].upsample_mode == "transposed_conv"
    assert [c.model_index for c in off] == [1, 2, 3]


def test_configuration_errors():
    with pytest.raises(ConfigurationError, match="divisible"):
        EnsembleConfig(patch_shape=(32, 30, 32)).validate()
    with pytest.raises(ConfigurationError):
        SubModelConfig(1, "layer", "trilinear").validate()
    with pytest.raises(ConfigurationError):
        SubModelConfig(1, "group", "cubic").validate()
    with pytest.raises(ConfigurationError, match="groups"):
        SubModelConfig(1, "group", "trilinear", base_channels=6).validate()
    with pytest.raises(ConfigurationError):
        SubModelConfig(4, "group", "trilinear").validate()
    m = build_submodel(small(DEFAULT_SUBMODELS[0]), 0)
    with pytest.raises(ConfigurationError):
        m.forward(Tensor(np.zeros((1, 1, 12, 16, 16))))
    with pytest.raises(ValueError):
        m.forward(Tensor(np.zeros((1, 2, 16, 16, 16))))


@settings(max_examples=8, deadline=None)
@given(st.floats(0.1, 1e4), st.integers(0, 2))
def test_probabilities_strictly_inside_unit_interval(scale, which):
    rng = np.random.default_rng(which)
    m = build_submodel(small(DEFAULT_SUBMODELS[which]), which)
    # push the heads into saturation with a large output bias
    for lvl in range(1, 5):
        m.params[f"head{lvl}.bias"].data[:] = np.float32(scale if lvl % 2 else -scale)
    pred = forward_multiscale(m, Tensor(rng.standard_normal((1, 1, 8, 8, 8)) * scale), training=True)
    for p in pred.probs:
        assert np.all(p.data > 0) and np.all(p.data < 1)


def test_submodel_dice_gradient_spot_check():
    """Whole-network gradients against float64 central differences on five parameters."""
    rng = np.random.default_rng(3)
    for cfg in DEFAULT_SUBMODELS:
        m = build_submodel(small(cfg), 9)
        for p in m.parameters():
            p.data = p.data.astype(np.float64)
        x = Tensor(rng.standard_normal((2, 1, 8, 8, 8)))
        y = (rng.random((2, 8, 8, 8)) < 0.3).astype(np.float64)

        def loss():
            return L.deep_supervised_loss([m.forward(x)], y)

        T.backward(loss())
        names = sorted(m.params)
        for name in [names[i] for i in rng.choice(len(names), 5, replace=False)]:
            p = m.params[name]
            assert np.all(np.isfinite(p.grad))
            idx = np.unravel_index(np.argmax(np.abs(p.grad)), p.shape)
            analytic = p.grad[idx]
            eps = 1e-6
            orig = p.data[idx]
            with T.no_grad():
                p.data[idx] = orig + eps
                fp = loss().item()
                p.data[idx] = orig - eps
                fm = loss().item()
            p.data[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            assert abs(analytic - numeric) <= 1e-2 * max(abs(analytic), abs(numeric), 1e-8), (cfg, name)
