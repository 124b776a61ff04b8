"""
Tests for the p4 convolutions and the embedding backbones.
"""

import numpy as np
import pytest

from errors import ConfigError, DimensionError
from gcnn import (GROUP_ORDER, BackboneConfig, GroupBackbone, PlainBackbone, build_backbone, embed, group_conv,
                  lift_conv, rotate_group_feature)
from shapegen import render_sample
from tensor import Tensor, add


def rot_image(x: np.ndarray, times: int = 1) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(x, times, axes=(-2, -1)))


class TestLiftConv:
    def test_symmetric_kernel_gives_identical_slices(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 7, 7)))
        out = lift_conv(x, Tensor(np.ones((2, 1, 3, 3)))).data
        for j in range(1, GROUP_ORDER):
            np.testing.assert_array_equal(out[:, :, j], out[:, :, 0])

    @pytest.mark.parametrize('times', [1, 2, 3])
    def test_rotation_equivariance_is_exact(self, rng, times):
        x = rng.normal(size=(2, 3, 9, 9))
        k = Tensor(rng.normal(size=(4, 3, 3, 3)))
        out = lift_conv(Tensor(x), k).data
        rotated = lift_conv(Tensor(rot_image(x, times)), k).data
        np.testing.assert_allclose(rotated, rotate_group_feature(out, times), atol=1e-12)

    def test_impulse_recovers_rotated_kernels(self, rng):
        x = np.zeros((1, 1, 7, 7))
        x[0, 0, 3, 3] = 1.0
        k = rng.normal(size=(2, 1, 3, 3))
        out = lift_conv(Tensor(x), Tensor(k)).data
        for o in range(2):
            for j in range(GROUP_ORDER):
                # Correlating an impulse flips the filter, a further half turn.
                np.testing.assert_allclose(out[0, o, j, 2:5, 2:5], np.rot90(k[o, 0], j + 2))

    def test_rejects_non_square_kernel(self):
        with pytest.raises(DimensionError):
            lift_conv(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 1))))


class TestGroupConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 3, GROUP_ORDER, 5, 5))
        k = np.zeros((3, 3, GROUP_ORDER, 1, 1))
        for c in range(3):
            k[c, c, 0] = 1.0
        np.testing.assert_allclose(group_conv(Tensor(x), Tensor(k)).data, x, atol=1e-12)

    @pytest.mark.parametrize('times', [1, 2, 3])
    def test_lift_then_group_conv_is_equivariant(self, rng, times):
        x = rng.normal(size=(1, 1, 8, 8))
        k1 = Tensor(rng.normal(size=(3, 1, 3, 3)))
        k2 = Tensor(rng.normal(size=(2, 3, GROUP_ORDER, 3, 3)))
        out = group_conv(lift_conv(Tensor(x), k1), k2).data
        rotated = group_conv(lift_conv(Tensor(rot_image(x, times)), k1), k2).data
        np.testing.assert_allclose(rotated, rotate_group_feature(out, times), atol=1e-10)

    def test_float32_equivariance(self, rng):
        x = rng.normal(size=(1, 2, GROUP_ORDER, 8, 8)).astype(np.float32)
        k = Tensor(rng.normal(size=(2, 2, GROUP_ORDER, 3, 3)).astype(np.float32))
        out = group_conv(Tensor(x), k).data
        rotated = group_conv(Tensor(rotate_group_feature(x)), k).data
        np.testing.assert_allclose(rotated, rotate_group_feature(out), atol=1e-5)

    def test_gradient(self, gradcheck, rng):
        x = Tensor(rng.normal(size=(1, 2, GROUP_ORDER, 5, 5)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 2, GROUP_ORDER, 3, 3)), requires_grad=True)
        gradcheck(group_conv, [x, k], rng, tolerance=1e-5)

    def test_group_axis_must_have_four_elements(self):
        with pytest.raises(DimensionError):
            group_conv(Tensor(np.ones((1, 1, 3, 5, 5))), Tensor(np.ones((1, 1, 3, 3, 3))))


class TestBackbone:
    @pytest.fixture(scope='class')
    def backbone(self):
        return GroupBackbone(BackboneConfig(), np.random.default_rng(3))

    def test_embedding_shape(self, backbone, rng):
        out = backbone(Tensor(rng.uniform(size=(3, 1, 32, 32)).astype(np.float32)))
        assert out.shape == (3, 64)

    def test_embedding_is_rotation_invariant(self, backbone):
        rng = np.random.default_rng(11)
        x = rng.uniform(size=(50, 1, 32, 32)).astype(np.float32)
        base = embed(Tensor(x), backbone).data
        for times in (1, 2, 3):
            rotated = embed(Tensor(rot_image(x, times)), backbone).data
            np.testing.assert_allclose(rotated, base, atol=1e-5, rtol=1e-4)

    def test_adding_zero_is_bit_exact(self, backbone, rng):
        x = Tensor(rng.uniform(size=(2, 1, 32, 32)).astype(np.float32))
        zero = Tensor(np.zeros((2, 1, 32, 32), dtype=np.float32))
        np.testing.assert_array_equal(embed(add(x, zero), backbone).data, embed(x, backbone).data)

    @pytest.mark.parametrize('seed', range(10))
    def test_distinct_classes_are_not_parallel(self, seed):
        backbone = GroupBackbone(BackboneConfig(), np.random.default_rng(seed))
        images = np.stack([render_sample(5, seed).image, render_sample(10, seed).image])[:, None]
        q = backbone(Tensor(images)).data
        cosine = q[0] @ q[1] / (np.linalg.norm(q[0]) * np.linalg.norm(q[1]))
        assert cosine < 1.0

    def test_wrong_input_extent(self, backbone):
        with pytest.raises(DimensionError):
            backbone(Tensor(np.zeros((1, 1, 28, 28), dtype=np.float32)))

    def test_p4_uses_fewer_parameters_than_plain_with_four_times_channels(self):
        config = BackboneConfig()
        group = GroupBackbone(config, np.random.default_rng(0))
        plain = PlainBackbone(config, np.random.default_rng(0), channel_multiplier=GROUP_ORDER)
        assert group.num_parameters() <= plain.num_parameters()

    def test_plain_backbone_embeds_to_same_width(self, rng):
        plain = build_backbone('plain', BackboneConfig(), np.random.default_rng(0))
        out = plain(Tensor(rng.uniform(size=(2, 1, 32, 32)).astype(np.float32)))
        assert out.shape == (2, 64)

    def test_unknown_backbone(self):
        with pytest.raises(ConfigError):
            build_backbone('resnet', BackboneConfig(), np.random.default_rng(0))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BackboneConfig(blocks_per_stage=0).validate()
