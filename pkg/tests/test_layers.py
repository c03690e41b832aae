import numpy as np
import pytest
from hypothesis import given, strategies as st

import gradsuite
from outfitrank import autodiff as ad
from outfitrank.autodiff import Parameter, ShapeError, Tensor
from outfitrank.layers import (FEATURE_NET, MATCHING_NET, Backbone, BackboneConfig, LayerSpec, LRNConfig,
                               concat_channels, concat_features, conv2d, local_response_norm, max_pool2d,
                               softmax2)


# -- conv ---------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
    assert np.array_equal(out.data, x)


def test_conv_sum_kernel():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), None)
    assert out.shape == (1, 1, 1) and out.data.item() == 9.0


def test_conv_matches_direct_loops(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_non_positive_output_reports_dims():
    with pytest.raises(ValueError, match="-2x-2"):
        conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), None)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), None)


# -- relu / pool -----------------------------------------------------------------------

def test_relu_examples():
    assert np.array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_pool_takes_window_max():
    x = np.array([[[1.0, 5.0, 2.0, 0.0], [3.0, 4.0, 8.0, 7.0], [0.0, 0.0, 1.0, 1.0], [9.0, 0.0, 1.0, 1.0]]])
    assert np.array_equal(max_pool2d(Tensor(x)).data, [[[5.0, 8.0], [9.0, 1.0]]])


def test_pool_gradient_routes_to_argmax():
    x = Parameter(np.array([[[1.0, 5.0], [3.0, 4.0]]]), "x", FEATURE_NET)
    g = ad.backward(max_pool2d(x).sum())[x]
    assert np.array_equal(g, [[[0.0, 1.0], [0.0, 0.0]]])


def test_pool_tie_goes_to_first_maximum():
    x = Parameter(np.full((1, 2, 2), 3.0), "x", FEATURE_NET)
    g = ad.backward(max_pool2d(x).sum())[x]
    assert g.sum() == 1.0 and g[0, 0, 0] == 1.0


# -- LRN ---------------------------------------------------------------------------------

def test_lrn_alpha_zero_is_identity(rng):
    x = rng.standard_normal((2, 7, 3, 3))
    assert np.array_equal(local_response_norm(Tensor(x), 5, 0.0, 0.75, 1.0).data, x)


def test_lrn_single_channel_hand_value():
    out = local_response_norm(Tensor(np.ones((1, 1, 1, 1))), size=1, alpha=1.0, beta=1.0, k=0.0)
    assert out.data.item() == 1.0


def test_lrn_matches_definition(rng):
    x = rng.standard_normal((6, 2, 2))
    n, alpha, beta, k = 3, 0.3, 0.75, 2.0
    out = local_response_norm(Tensor(x), n, alpha, beta, k).data
    ref = np.empty_like(x)
    for c in range(6):
        window = x[max(0, c - 1):c + 2]
        ref[c] = x[c] / (k + alpha / n * (window ** 2).sum(axis=0)) ** beta
    assert np.allclose(out, ref, atol=1e-12)


# -- softmax ------------------------------------------------------------------------------

@pytest.mark.parametrize("logits,expected", [([0.0, 0.0], [0.5, 0.5]), ([np.log(3.0), 0.0], [0.75, 0.25])])
def test_softmax_examples(logits, expected):
    assert np.allclose(softmax2(Tensor(np.array(logits))).data, expected, atol=1e-12)


def test_softmax_large_logit_does_not_overflow():
    p = softmax2(Tensor(np.array([1000.0, 0.0]))).data
    assert np.isfinite(p).all() and p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0)


def test_softmax_needs_two_logits():
    with pytest.raises(ShapeError):
        softmax2(Tensor(np.zeros(3)))


@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=2))
def test_softmax_is_a_distribution(logits):
    p = softmax2(Tensor(np.array(logits))).data
    assert (p >= 0).all() and abs(p.sum() - 1.0) < 1e-6


# -- concatenation ------------------------------------------------------------------------------

def test_concat_channels_block_order():
    ims = [Tensor(np.full((3, 2, 2), float(i))) for i in range(3)]
    out = concat_channels(ims).data
    assert out.shape == (9, 2, 2)
    assert [out[3 * i:3 * i + 3].mean() for i in range(3)] == [0.0, 1.0, 2.0]
    swapped = concat_channels([ims[1], ims[0], ims[2]]).data
    assert np.array_equal(swapped[:3], out[3:6]) and np.array_equal(swapped[3:6], out[:3])


def test_concat_channels_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels([Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((3, 3, 3)))])


def test_concat_channels_gradient_routes_by_block(rng):
    ims = [Parameter(rng.standard_normal((3, 2, 2)), f"im{i}", FEATURE_NET) for i in range(3)]
    weights = np.arange(9.0)[:, None, None] * np.ones((9, 2, 2))
    grads = ad.backward((concat_channels(ims) * Tensor(weights)).sum())
    for i, im in enumerate(ims):
        assert np.array_equal(grads[im], weights[3 * i:3 * i + 3])


def test_concat_features_examples():
    parts = [Tensor([1.0, 2.0]), Tensor([3.0, 4.0]), Tensor([5.0, 6.0])]
    assert np.array_equal(concat_features(parts).data, [1, 2, 3, 4, 5, 6])
    with pytest.raises(ShapeError):
        concat_features([Tensor([1.0, 2.0]), Tensor([3.0])])


# -- specs and backbone ------------------------------------------------------------------------------

def test_layer_spec_validates_kind_and_group():
    assert LayerSpec("fc", {"out": 2}, MATCHING_NET).group == MATCHING_NET
    with pytest.raises(ValueError):
        LayerSpec("dropout")
    with pytest.raises(ValueError):
        LayerSpec("fc", group="everything")


def test_backbone_rejects_too_many_pooling_stages():
    with pytest.raises(ValueError):
        BackboneConfig(image_size=16, widths=(4, 4, 4, 4, 4))


def test_backbone_outputs_feature_width(rng):
    net = Backbone(BackboneConfig(), rng)
    out = net(Tensor(rng.standard_normal((5, 3, 32, 32)).astype(np.float32)))
    assert out.shape == (5, 64) and (out.data >= 0).all()


def test_backbone_full_size_forward(rng):
    cfg = BackboneConfig(image_size=224, feature_dim=2048)
    with ad.no_grad():
        out = Backbone(cfg, rng)(Tensor(rng.standard_normal((1, 3, 224, 224)).astype(np.float32)))
    assert out.shape == (1, 2048)


def test_backbone_rejects_wrong_image_size(rng):
    with pytest.raises(ShapeError):
        Backbone(BackboneConfig(), rng)(Tensor(np.zeros((1, 3, 16, 16), np.float32)))


def test_backbone_layer_specs_are_tagged_feature_net():
    specs = BackboneConfig().layer_specs()
    assert [s.kind for s in specs[:4]] == ["conv", "relu", "lrn", "pool"]
    assert all(s.group == FEATURE_NET for s in specs)
    assert specs[-2].params == {"out": 64}


# -- finite-difference gradient checks ----------------------------------------------------------------

@pytest.mark.parametrize("kind", sorted(gradsuite.LAYER_CASES))
def test_layer_gradients(kind):
    rng = np.random.default_rng(100)
    make = gradsuite.LAYER_CASES[kind]
    errors = [gradsuite.run_case(make(rng), i) for i in range(gradsuite.CONFIGS_PER_LAYER)]
    assert max(errors) < gradsuite.TOLERANCE, errors


def test_gradient_check_catches_a_wrong_backward(rng, monkeypatch):
    # a gradient check that cannot fail proves nothing: break LRN's backward and expect a large error
    from outfitrank import layers

    real = layers.lrn_cl

    def broken(x, *args):
        out = real(x, *args)
        inner = out._backward
        out._backward = lambda g: tuple(v * 1.01 for v in inner(g))
        return out

    monkeypatch.setattr(layers, "lrn_cl", broken)
    case = gradsuite.lrn_case(rng)
    assert gradsuite.run_case(case, 0) > 1e-3


def test_gradient_check_tolerates_a_straddled_relu_kink():
    # relu(x) at x=2e-6 with epsilon 1e-5: the plain central difference reads 0.6, the refined one 1.0
    x = Parameter(np.array([2e-6]), "x", FEATURE_NET, dtype=np.float64)
    assert ad.gradient_check(lambda: ad.relu(x).sum(), [x], epsilon=1e-5) < 1e-9
    assert ad.gradient_check(lambda: ad.relu(x).sum(), [x], epsilon=1e-5, refinements=0) > 0.1


def test_gradient_check_reports_the_last_measurement_without_agreement():
    # relu(x) at x=2e-8 straddles the kink at epsilon 1e-5 and 1e-6, so the two readings
    # disagree and the 1e-6 one, (1e-6 + 2e-8) / 2e-6 = 0.51, is scored against a slope of 1
    x = Parameter(np.array([2e-8]), "x", FEATURE_NET, dtype=np.float64)
    err = ad.gradient_check(lambda: ad.relu(x).sum(), [x], epsilon=1e-5, refinements=1)
    assert err == pytest.approx(0.49, abs=1e-6)


def test_gradient_check_refines_a_slight_slope_switch():
    # a switch that bends the slope by only 0.5% still biases the epsilon=1e-5 central
    # difference by ~0.2%; the 1e-6 and 1e-7 readings agree and are exact
    x = Parameter(np.array([3e-6]), "x", FEATURE_NET, dtype=np.float64)
    fn = lambda: (x * 1.0 + ad.relu(x * -1.0) * 0.005).sum()
    assert ad.gradient_check(fn, [x], epsilon=1e-5) < 1e-6
