import numpy as np
import pytest

from flatfed.autodiff import forward_logits
from flatfed.errors import ConfigError, UsageError
from flatfed.models import ModelSpec, init_params, lenet_cifar, mlp
from flatfed.tensor import ParamVector

# hand count for 32x32x3 input, 10 classes:
#   conv 64x3x5x5+64 = 4864, conv 64x64x5x5+64 = 102464,
#   fc 384x1600+384 = 614784, fc 192x384+192 = 73920, fc 10x192+10 = 1930
LENET_CIFAR10_PARAMS = 797_962

# golden layout; guards the padding/stride conventions along with the count
LENET_MANIFEST = (
    ("conv0.w", (64, 3, 5, 5), 0),
    ("conv0.b", (64,), 4800),
    ("conv3.w", (64, 64, 5, 5), 4864),
    ("conv3.b", (64,), 107264),
    ("fc7.w", (384, 1600), 107328),
    ("fc7.b", (384,), 721728),
    ("fc9.w", (192, 384), 722112),
    ("fc9.b", (192,), 795840),
    ("fc11.w", (10, 192), 796032),
    ("fc11.b", (10,), 797952),
)


class TestLenet:
    def test_parameter_count_frozen(self):
        assert lenet_cifar(10).num_params == LENET_CIFAR10_PARAMS

    def test_manifest_golden(self):
        assert lenet_cifar(10).manifest == LENET_MANIFEST

    def test_classifier_width_follows_num_classes(self):
        spec = lenet_cifar(100)
        assert spec.manifest[-2][1] == (100, 192)
        assert spec.manifest[-1][1] == (100,)

    def test_single_class_degenerate_but_valid(self):
        spec = lenet_cifar(1)
        params = init_params(spec, 0)
        logits, _ = forward_logits(params, spec, np.zeros((1, 3, 32, 32)))
        assert logits.shape == (1, 1)

    def test_activation_shapes(self):
        shapes = lenet_cifar(10).layer_shapes()
        assert shapes[0] == (64, 28, 28)
        assert shapes[2] == (64, 14, 14)
        assert shapes[3] == (64, 10, 10)
        assert shapes[5] == (64, 5, 5)
        assert shapes[6] == (1600,)


class TestMlp:
    def test_two_dims_is_single_linear_layer(self):
        spec = mlp([2, 2])
        assert spec.num_params == 6
        assert len(spec.layers) == 1

    def test_zero_params_give_uniform_logits(self):
        spec = mlp([5, 3])
        params = ParamVector(np.zeros(spec.num_params), spec.manifest)
        logits, _ = forward_logits(params, spec, np.random.default_rng(0).normal(size=(4, 5)))
        assert np.all(logits == 0.0)

    def test_hidden_chain_output_width(self):
        spec = mlp([4, 8, 3])
        params = init_params(spec, 0)
        logits, _ = forward_logits(params, spec, np.zeros((2, 4)))
        assert logits.shape == (2, 3)

    def test_too_few_dims_rejected(self):
        with pytest.raises(UsageError):
            mlp([4])

    def test_nonpositive_width_rejected(self):
        with pytest.raises(ConfigError):
            mlp([4, 0, 3])


class TestInitParams:
    def test_same_seed_bit_identical(self):
        spec = lenet_cifar(10)
        a = init_params(spec, 123)
        b = init_params(spec, 123)
        assert np.array_equal(a.data, b.data)

    def test_different_seeds_differ(self):
        spec = mlp([8, 8, 2])
        assert not np.array_equal(init_params(spec, 1).data, init_params(spec, 2).data)

    def test_biases_zero(self):
        spec = lenet_cifar(10)
        params = init_params(spec, 5)
        for name, _, _ in spec.manifest:
            if name.endswith(".b"):
                assert np.all(params.view(name) == 0.0)

    def test_conv_weight_variance_matches_fan_in_scaling(self):
        # He-style: var = 2 / fan_in; conv3 has fan_in 64*25 = 1600 and
        # 102400 weight samples, so the estimate is tight
        spec = lenet_cifar(10)
        params = init_params(spec, 11)
        w = params.view("conv3.w")
        target = 2.0 / 1600.0
        assert abs(w.var() - target) / target < 0.2

    def test_forward_emits_num_classes_for_every_spec(self):
        for spec in (mlp([3, 2]), mlp([4, 7, 5]), lenet_cifar(3)):
            params = init_params(spec, 0)
            x = np.zeros((2,) + spec.input_shape)
            logits, _ = forward_logits(params, spec, x)
            assert logits.shape == (2, spec.num_classes)


def test_model_spec_roundtrips_through_dict():
    spec = lenet_cifar(10)
    again = ModelSpec.from_dict(spec.to_dict())
    assert again == spec
    assert again.manifest == spec.manifest
