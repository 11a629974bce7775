import numpy as np
import pytest

from firesense.blocks import Cafim, ConcatFuse
from firesense.errors import ConfigurationError, ShapeMismatchError
from firesense.models import (ARCHS, BRANCH_WIDTHS, ModelConfig, build,
                              count_flops, count_params, forward)
from firesense.rng import rng_for


def small(arch, **kw):
    return ModelConfig(arch=arch, width_mult=0.25, **kw)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(arch="UNet").validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(width_mult=0.0).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(width_mult=0.3).validate()  # 16 * 0.3 is not an integer
    with pytest.raises(ConfigurationError):
        ModelConfig(dropout_p=1.0).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(fuel_channels=12).validate()
    ModelConfig(width_mult=0.5).validate()


def test_build_selects_fusion_by_arch():
    net = build(small("FireSenseNet"), seed=0)
    assert isinstance(net.fuse1, Cafim)
    concat = build(small("FireSenseNetConcat"), seed=0)
    assert isinstance(concat.fuse1, ConcatFuse)
    baseline = build(small("BaselineCNN"), seed=0)
    assert not hasattr(baseline, "fuse1")


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_output_shape(arch):
    net = build(small(arch), seed=0)
    rng = rng_for(1, "mt")
    x = rng.normal(size=(12, 16, 16)).astype(np.float32)
    out = forward(net, x)
    assert out.data.shape == (1, 16, 16)
    assert np.isfinite(out.data).all()


def test_forward_alphas_only_for_gated_net():
    rng = rng_for(1, "mt")
    x = rng.normal(size=(12, 16, 16)).astype(np.float32)
    _, alphas = forward(build(small("FireSenseNet"), seed=0), x, want_alphas=True)
    assert [a.data.shape for a in alphas] == [(1, 16, 16), (1, 8, 8), (1, 4, 4)]
    _, alphas = forward(build(small("FireSenseNetConcat"), seed=0), x, want_alphas=True)
    assert alphas == []


def test_forward_rejects_wrong_channel_count():
    net = build(small("FireSenseNet"), seed=0)
    with pytest.raises(ShapeMismatchError):
        forward(net, np.zeros((11, 16, 16), dtype=np.float32))


def test_same_seed_same_init_and_output():
    rng = rng_for(2, "mt")
    x = rng.normal(size=(12, 16, 16)).astype(np.float32)
    a = forward(build(small("FireSenseNet"), seed=7), x)
    b = forward(build(small("FireSenseNet"), seed=7), x)
    assert np.array_equal(a.data, b.data)
    c = forward(build(small("FireSenseNet"), seed=8), x)
    assert not np.array_equal(a.data, c.data)


def test_param_totals_are_stable():
    # regression anchors for the three architectures at full width
    _, n_fsn = count_params(build(ModelConfig(arch="FireSenseNet"), seed=0))
    _, n_base = count_params(build(ModelConfig(arch="BaselineCNN"), seed=0))
    _, n_cat = count_params(build(ModelConfig(arch="FireSenseNetConcat"), seed=0))
    assert n_fsn == 2_556_164
    assert n_base == 1_952_289
    assert n_cat == 2_447_297
    assert n_fsn > n_cat  # the gate layers are the only difference
    gate_params = n_fsn - n_cat
    c1, c2, c3 = BRANCH_WIDTHS
    expected_gate = sum(
        (c * c + c) * 2            # two 1x1 projections with bias
        + (2 * c * c * 9 + c)      # 3x3 2C->C
        + (c * 9 + 1)              # 3x3 C->1
        for c in (c1, c2, c3)
    )
    assert gate_params == expected_gate


def test_count_params_matches_manual_sum():
    net = build(small("FireSenseNet"), seed=0)
    rows, total = count_params(net)
    assert total == sum(p.data.size for p in net.parameters())
    assert sum(n for _, n in rows) == total


def test_count_flops_closed_form_single_conv():
    from firesense.blocks import Conv2d, Module

    class OneConv(Module):
        def __init__(self):
            self.config = ModelConfig(in_channels=3, fuel_channels=1)
            self.conv = Conv2d(rng_for(0, "cf"), 3, 8, 3)

        def forward(self, x, ctx):
            return self.conv.forward(x)

    rows, total = count_flops(OneConv(), 16, 16)
    assert total == 2 * 9 * 3 * 8 * 16 * 16


def test_count_flops_scale_with_input_area():
    net = build(small("FireSenseNet"), seed=0)
    _, f16 = count_flops(net, 16, 16)
    _, f32 = count_flops(net, 32, 32)
    assert f32 == 4 * f16  # every op in the net is resolution-linear


def test_count_flops_default_model_total():
    net = build(ModelConfig(arch="FireSenseNet"), seed=0)
    rows, total = count_flops(net, 64, 64)
    assert total == 1_450_614_528  # regression anchor, ~1.45 GFLOPs
    assert all(f >= 0 for _, f, _ in rows)


def test_width_mult_scales_parameters_down():
    _, full = count_params(build(ModelConfig(arch="FireSenseNet"), seed=0))
    _, quarter = count_params(build(small("FireSenseNet"), seed=0))
    assert quarter < full / 10  # conv params shrink ~quadratically in width
