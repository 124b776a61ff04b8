"""
p4 group-equivariant convolutions and the embedding backbone.

Group features are B × C × 4 × H × W with the group axis ordered e, r, r², r³
(r = 90° counterclockwise). Rotating the input by r rotates every spatial
slice and cyclically shifts the group axis by one.
"""

from typing import List, Sequence

import numpy as np

from errors import ConfigError, DimensionError
from layers import Conv2d, Module, he_normal, zeros
from tensor import Tensor, add, avg_pool2x, concat, conv2d, mean, relu, reshape, roll, rot90

GROUP_ORDER = 4


def lift_conv(x: Tensor, k: Tensor) -> Tensor:
    """Z² → p4: output[:, :, j] = conv2d(x, rotate90ʲ(k))."""
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"lift_conv expects B×C×H×W input and O×C×kh×kw kernel, got {x.shape}, {k.shape}")
    out_channels, in_channels, kh, kw = k.shape
    if kh != kw:
        raise DimensionError(f"lift_conv needs square kernels, got {kh}x{kw}")
    rotated = [reshape(rot90(k, j, axes=(2, 3)), (out_channels, 1, in_channels, kh, kw))
               for j in range(GROUP_ORDER)]
    stacked = reshape(concat(rotated, axis=1), (out_channels * GROUP_ORDER, in_channels, kh, kw))
    out = conv2d(x, stacked, stride=1, pad=kh // 2)
    batch, _, height, width = out.shape
    return reshape(out, (batch, out_channels, GROUP_ORDER, height, width))


def group_conv(x: Tensor, k: Tensor) -> Tensor:
    """p4 → p4: slice j uses filters rotated j times with the group axis shifted by j."""
    if x.ndim != 5 or k.ndim != 5:
        raise DimensionError(f"group_conv expects B×C×4×H×W input and O×C×4×kh×kw kernel, got {x.shape}, {k.shape}")
    if x.shape[2] != GROUP_ORDER or k.shape[2] != GROUP_ORDER:
        raise DimensionError("group_conv needs a group axis of length 4")
    batch, in_channels, _, height, width = x.shape
    out_channels, kernel_channels, _, kh, kw = k.shape
    if kernel_channels != in_channels:
        raise DimensionError(f"group_conv channel mismatch: input {in_channels}, kernel {kernel_channels}")
    if kh != kw:
        raise DimensionError(f"group_conv needs square kernels, got {kh}x{kw}")
    transformed = []
    for j in range(GROUP_ORDER):
        kj = roll(rot90(k, j, axes=(3, 4)), j, axis=2)
        transformed.append(reshape(kj, (out_channels, 1, in_channels * GROUP_ORDER, kh, kw)))
    stacked = reshape(concat(transformed, axis=1), (out_channels * GROUP_ORDER, in_channels * GROUP_ORDER, kh, kw))
    flat = reshape(x, (batch, in_channels * GROUP_ORDER, height, width))
    out = conv2d(flat, stacked, stride=1, pad=kh // 2)
    return reshape(out, (batch, out_channels, GROUP_ORDER, out.shape[2], out.shape[3]))


def rotate_group_feature(x: np.ndarray, times: int = 1) -> np.ndarray:
    """How a p4 feature map transforms when the input image is rotated `times`×90°."""
    return np.rot90(np.roll(x, times, axis=2), times, axes=(-2, -1))


class LiftConv(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.bias = zeros((out_channels,))

    def forward(self, x: Tensor) -> Tensor:
        return add(lift_conv(x, self.weight), reshape(self.bias, (1, -1, 1, 1, 1)))


class GroupConv(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator):
        fan_in = in_channels * GROUP_ORDER * kernel_size * kernel_size
        self.weight = he_normal(rng, (out_channels, in_channels, GROUP_ORDER, kernel_size, kernel_size), fan_in)
        self.bias = zeros((out_channels,))

    def forward(self, x: Tensor) -> Tensor:
        return add(group_conv(x, self.weight), reshape(self.bias, (1, -1, 1, 1, 1)))


class GroupResidualBlock(Module):
    """group_conv → ReLU → group_conv plus skip, ReLU after the sum."""

    def __init__(self, in_channels: int, out_channels: int, downsample: bool, rng: np.random.Generator):
        self.conv1 = GroupConv(in_channels, out_channels, 3, rng)
        self.conv2 = GroupConv(out_channels, out_channels, 3, rng)
        self.downsample = downsample
        self.skip = GroupConv(in_channels, out_channels, 1, rng) if (downsample or in_channels != out_channels) else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(x)
        if self.downsample:
            h = avg_pool2x(h)
        h = self.conv2(relu(h))
        shortcut = x
        if self.skip is not None:
            shortcut = self.skip(x)
            if self.downsample:
                shortcut = avg_pool2x(shortcut)
        return relu(add(h, shortcut))


class PlainResidualBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, downsample: bool, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)
        self.downsample = downsample
        self.skip = Conv2d(in_channels, out_channels, 1, rng) if (downsample or in_channels != out_channels) else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(x)
        if self.downsample:
            h = avg_pool2x(h)
        h = self.conv2(relu(h))
        shortcut = x
        if self.skip is not None:
            shortcut = self.skip(x)
            if self.downsample:
                shortcut = avg_pool2x(shortcut)
        return relu(add(h, shortcut))


class BackboneConfig:
    """Shape of the embedding network: stem, stages, blocks per stage, embedding width."""

    def __init__(self, stem_channels: int = 8, stage_channels: Sequence[int] = (8, 16, 32),
                 blocks_per_stage: int = 1, embed_dim: int = 64, image_size: int = 32):
        self.stem_channels = stem_channels
        self.stage_channels = list(stage_channels)
        self.blocks_per_stage = blocks_per_stage
        self.embed_dim = embed_dim
        self.image_size = image_size

    def validate(self):
        errors = []
        if self.stem_channels < 1 or any(c < 1 for c in self.stage_channels):
            errors.append("channel counts must be positive")
        if self.blocks_per_stage < 1:
            errors.append("blocks_per_stage must be at least 1")
        if self.embed_dim < 1:
            errors.append("embed_dim must be positive")
        if self.image_size % (2 ** max(len(self.stage_channels) - 1, 0)):
            errors.append("image_size must be divisible by the total downsampling factor")
        if errors:
            raise ConfigError("Backbone configuration invalid:\n" + "\n".join(f"- {e}" for e in errors))
        return True


class GroupBackbone(Module):
    """G-CNN-Small: lift stem, residual p4 stages, 1×1 head, group+spatial average pooling."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.stem = LiftConv(1, config.stem_channels, 3, rng)
        self.blocks: List[GroupResidualBlock] = []
        channels = config.stem_channels
        for stage, width in enumerate(config.stage_channels):
            for block in range(config.blocks_per_stage):
                self.blocks.append(GroupResidualBlock(channels, width, stage > 0 and block == 0, rng))
                channels = width
        self.head = GroupConv(channels, config.embed_dim, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return embed(x, self)

    def feature_maps(self, x: Tensor) -> Tensor:
        h = relu(self.stem(x))
        for block in self.blocks:
            h = block(h)
        return self.head(h)


class PlainBackbone(Module):
    """Ordinary-convolution backbone with the same topology, for the backbone ablation."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, channel_multiplier: int = 1):
        config.validate()
        self.config = config
        stem = config.stem_channels * channel_multiplier
        self.stem = Conv2d(1, stem, 3, rng)
        self.blocks: List[PlainResidualBlock] = []
        channels = stem
        for stage, width in enumerate(config.stage_channels):
            width = width * channel_multiplier
            for block in range(config.blocks_per_stage):
                self.blocks.append(PlainResidualBlock(channels, width, stage > 0 and block == 0, rng))
                channels = width
        self.head = Conv2d(channels, config.embed_dim, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.config)
        h = relu(self.stem(x))
        for block in self.blocks:
            h = block(h)
        return mean(self.head(h), axis=(2, 3))


def _check_input(x: Tensor, config: BackboneConfig):
    size = config.image_size
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != size or x.shape[3] != size:
        raise DimensionError(f"backbone expects B×1×{size}×{size} input, got {x.shape}")


def embed(x: Tensor, backbone: GroupBackbone) -> Tensor:
    """B×1×H×W images → B×d embeddings, averaged over space and the group axis."""
    _check_input(x, backbone.config)
    return mean(backbone.feature_maps(x), axis=(2, 3, 4))


def build_backbone(kind: str, config: BackboneConfig, rng: np.random.Generator) -> Module:
    if kind == 'gcnn':
        return GroupBackbone(config, rng)
    if kind == 'plain':
        # Four plain channels per p4 channel keeps the feature width comparable.
        return PlainBackbone(config, rng, channel_multiplier=GROUP_ORDER)
    raise ConfigError(f"unknown backbone '{kind}'")
