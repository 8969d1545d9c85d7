# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Declarative CNN backbones with one attention module per block."""

import dataclasses
import enum
import json
from typing import Tuple

import numpy as np
import torch
from torch import nn

from attention import AttentionSpec
from common import BlockType, ConfigurationError, DimensionError, Mode, parse_enum
from nn_ops import BatchNorm2d, Conv2d, MaxPool2d, PadShortcut, gap, relu
from tensor_core import Tensor4, add

BOTTLENECK_EXPANSION = 4


class Stem(str, enum.Enum):
    CIFAR = 'cifar'
    IMAGENET = 'imagenet'


class Shortcut(str, enum.Enum):
    PROJECTION = 'projection'
    ZERO_PAD = 'zero-pad'


def check_int(value, what):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError('%s must be an integer, got %r' % (what, value))
    return value


@dataclasses.dataclass(frozen=True)
class StageSpec:
    channels: int
    block_count: int
    stride: int

    def __post_init__(self):
        for field in dataclasses.fields(self):
            check_int(getattr(self, field.name), 'stage ' + field.name)

    @classmethod
    def from_value(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, dict):
            unknown = sorted(set(value) - {'channels', 'block_count', 'stride'})
            if unknown:
                raise ConfigurationError('unknown stage keys: %s' % ', '.join(unknown))
            missing = sorted({'channels', 'block_count', 'stride'} - set(value))
            if missing:
                raise ConfigurationError('stage is missing: %s' % ', '.join(missing))
            return cls(**value)
        if isinstance(value, (list, tuple)) and len(value) == 3:
            return cls(*value)
        raise ConfigurationError('stage must be [channels, block_count, stride], got %r' % (value,))


_REQUIRED_FIELDS = ('block_type', 'stage_channels', 'attention', 'num_classes', 'input_shape')


@dataclasses.dataclass(frozen=True)
class ArchSpec:
    block_type: BlockType
    stage_channels: Tuple[StageSpec, ...]
    attention: AttentionSpec
    num_classes: int
    input_shape: Tuple[int, int, int]
    stem: Stem = Stem.CIFAR
    shortcut: Shortcut = Shortcut.PROJECTION

    def __post_init__(self):
        set_field = lambda name, value: object.__setattr__(self, name, value)
        set_field('block_type', parse_enum(BlockType, self.block_type, 'block type'))
        set_field('stem', parse_enum(Stem, self.stem, 'stem'))
        set_field('shortcut', parse_enum(Shortcut, self.shortcut, 'shortcut'))
        set_field('attention', AttentionSpec.from_value(self.attention))
        set_field('stage_channels', tuple(StageSpec.from_value(s) for s in self.stage_channels))
        set_field('input_shape', tuple(check_int(d, 'input_shape entry') for d in self.input_shape))

        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError('input_shape must be three positive integers, got %r' % (self.input_shape,))
        if not isinstance(self.num_classes, int) or self.num_classes < 1:
            raise ConfigurationError('num_classes must be a positive integer, got %r' % (self.num_classes,))
        if not self.stage_channels:
            raise ConfigurationError('at least one stage is required')
        for stage in self.stage_channels:
            if stage.stride not in (1, 2):
                raise ConfigurationError('stage stride must be 1 or 2, got %r' % (stage.stride,))
            if stage.channels < 1 or stage.block_count < 1:
                raise ConfigurationError('stage channels and block count must be positive: %r' % (stage,))
            if stage.channels % self.expansion:
                raise ConfigurationError('bottleneck stage width %d is not divisible by %d'
                                         % (stage.channels, self.expansion))

    @property
    def expansion(self):
        return BOTTLENECK_EXPANSION if self.block_type == BlockType.RESNET_BOTTLENECK else 1

    @property
    def block_count(self):
        return sum(stage.block_count for stage in self.stage_channels)

    @classmethod
    def from_dict(cls, data):
        allowed = [f.name for f in dataclasses.fields(cls)]
        unknown = sorted(set(data) - set(allowed))
        if unknown:
            raise ConfigurationError('unknown architecture keys: %s' % ', '.join(unknown))
        missing = [name for name in _REQUIRED_FIELDS if name not in data]
        if missing:
            raise ConfigurationError('architecture is missing: %s' % ', '.join(missing))
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigurationError('cannot read %s: %s' % (path, e.strerror)) from None
        except ValueError as e:
            raise ConfigurationError('%s is not valid JSON: %s' % (path, e)) from None
        return cls.from_dict(data)

    def to_dict(self):
        return {
            'block_type': self.block_type.value,
            'stage_channels': [[s.channels, s.block_count, s.stride] for s in self.stage_channels],
            'attention': self.attention.to_value(),
            'num_classes': self.num_classes,
            'input_shape': list(self.input_shape),
            'stem': self.stem.value,
            'shortcut': self.shortcut.value,
        }

    def with_attention(self, attention):
        return dataclasses.replace(self, attention=AttentionSpec.from_value(attention))


class Projection(nn.Module):
    """1x1 strided conv + batch norm shortcut."""

    def __init__(self, in_channels, out_channels, stride, generator=None, device=None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, stride=stride, generator=generator, device=device)
        self.bn = BatchNorm2d(out_channels, device=device)

    def forward(self, x):
        return self.bn(self.conv(x))


def make_shortcut(kind, in_channels, out_channels, stride, generator=None, device=None):
    if stride == 1 and in_channels == out_channels:
        return None
    if kind == Shortcut.ZERO_PAD:
        return PadShortcut(in_channels, out_channels, stride)
    return Projection(in_channels, out_channels, stride, generator, device)


class PlainBlock(nn.Module):
    """conv3x3 -> bn -> attention -> relu."""

    def __init__(self, in_channels, out_channels, stride, attention, shortcut=None, generator=None, device=None,
                 attention_generator=None):
        super().__init__()
        del shortcut
        self.conv = Conv2d(in_channels, out_channels, 3, stride=stride, generator=generator, device=device)
        self.bn = BatchNorm2d(out_channels, device=device)
        self.attention = attention.build(out_channels, attention_generator, device)

    def forward(self, x):
        y = self.bn(self.conv(x))
        if self.attention is not None:
            y = self.attention(y)
        return relu(y)


class BasicBlock(nn.Module):

    def __init__(self, in_channels, out_channels, stride, attention, shortcut=Shortcut.PROJECTION,
                 generator=None, device=None,
                 attention_generator=None):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, generator=generator, device=device)
        self.bn1 = BatchNorm2d(out_channels, device=device)
        self.conv2 = Conv2d(out_channels, out_channels, 3, generator=generator, device=device)
        self.bn2 = BatchNorm2d(out_channels, device=device)
        self.attention = attention.build(out_channels, attention_generator, device)
        self.shortcut = make_shortcut(shortcut, in_channels, out_channels, stride, generator, device)

    def forward(self, x):
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.attention is not None:
            y = self.attention(y)
        identity = x if self.shortcut is None else self.shortcut(x)
        return relu(add(y, identity))


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3 (strided), 1x1 expand; attention before the addition."""

    def __init__(self, in_channels, out_channels, stride, attention, shortcut=Shortcut.PROJECTION,
                 generator=None, device=None,
                 attention_generator=None):
        super().__init__()
        width = out_channels // BOTTLENECK_EXPANSION
        self.conv1 = Conv2d(in_channels, width, 1, generator=generator, device=device)
        self.bn1 = BatchNorm2d(width, device=device)
        self.conv2 = Conv2d(width, width, 3, stride=stride, generator=generator, device=device)
        self.bn2 = BatchNorm2d(width, device=device)
        self.conv3 = Conv2d(width, out_channels, 1, generator=generator, device=device)
        self.bn3 = BatchNorm2d(out_channels, device=device)
        self.attention = attention.build(out_channels, attention_generator, device)
        self.shortcut = make_shortcut(shortcut, in_channels, out_channels, stride, generator, device)

    def forward(self, x):
        y = relu(self.bn1(self.conv1(x)))
        y = relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        if self.attention is not None:
            y = self.attention(y)
        identity = x if self.shortcut is None else self.shortcut(x)
        return relu(add(y, identity))


BLOCKS = {
    BlockType.PLAIN: PlainBlock,
    BlockType.RESNET_BASIC: BasicBlock,
    BlockType.RESNET_BOTTLENECK: Bottleneck,
}


class Network(nn.Module):
    """Stem, stages of blocks, global pooling and a 1x1 classifier."""

    def __init__(self, spec: ArchSpec, seed=0, device=None):
        super().__init__()
        self.spec = spec
        generator = torch.Generator().manual_seed(int(seed))
        channels = spec.stage_channels[0].channels // spec.expansion
        in_channels = spec.input_shape[0]
        if spec.stem == Stem.IMAGENET:
            self.stem_conv = Conv2d(in_channels, channels, 7, stride=2, generator=generator, device=device)
            self.stem_bn = BatchNorm2d(channels, device=device)
            self.stem_pool = MaxPool2d(3, 2, 1)
        else:
            self.stem_conv = Conv2d(in_channels, channels, 3, generator=generator, device=device)
            self.stem_bn = BatchNorm2d(channels, device=device)
            self.stem_pool = None

        block_cls = BLOCKS[spec.block_type]
        self.stages = nn.ModuleList()
        for stage_index, stage in enumerate(spec.stage_channels):
            blocks = nn.ModuleList()
            for index in range(stage.block_count):
                stride = stage.stride if index == 0 else 1
                blocks.append(block_cls(channels, stage.channels, stride, spec.attention, spec.shortcut,
                                        generator=generator, device=device,
                                        attention_generator=attention_generator(seed, stage_index, index)))
                channels = stage.channels
            self.stages.append(blocks)
        self.head = Conv2d(channels, spec.num_classes, 1, bias=True, generator=generator, device=device)

    def forward(self, x):
        if x.shape[1:] != self.spec.input_shape:
            raise DimensionError('network expects inputs of shape (N,) + %r, got %r'
                                 % (self.spec.input_shape, x.shape))
        y = relu(self.stem_bn(self.stem_conv(x)))
        if self.stem_pool is not None:
            y = self.stem_pool(y)
        for blocks in self.stages:
            for block in blocks:
                y = block(y)
        return self.head(gap(y))

    def named_blocks(self):
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                yield 'stages.%d.%d' % (s, b), block

    def attention_modules(self):
        return [(name + '.attention', block.attention) for name, block in self.named_blocks()
                if block.attention is not None]

    @property
    def last_block_name(self):
        return 'stages.%d.%d' % (len(self.stages) - 1, len(self.stages[-1]) - 1)


def attention_generator(seed, stage_index, block_index):
    """Seeds the attention weights of one block apart from the backbone draws.

    Backbone parameters therefore come out identical for every attention
    setting at a given seed.
    """
    state = np.random.SeedSequence([int(seed) % 2 ** 64, stage_index, block_index]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def build(spec: ArchSpec, seed=0, materialize=True) -> Network:
    """Deterministic construction; `materialize=False` allocates nothing."""
    return Network(spec, seed, device=None if materialize else 'meta')


def forward(net: Network, x: Tensor4, mode=Mode.EVAL) -> Tensor4:
    net.train(parse_enum(Mode, mode, 'mode') == Mode.TRAIN)
    return net(x)


def resnet50_spec(attention='none', num_classes=1000, input_shape=(3, 224, 224)):
    return ArchSpec(BlockType.RESNET_BOTTLENECK,
                    [(256, 3, 1), (512, 4, 2), (1024, 6, 2), (2048, 3, 2)],
                    attention, num_classes, input_shape, stem=Stem.IMAGENET)


def resnet18_spec(attention='none', num_classes=1000, input_shape=(3, 224, 224)):
    return ArchSpec(BlockType.RESNET_BASIC,
                    [(64, 2, 1), (128, 2, 2), (256, 2, 2), (512, 2, 2)],
                    attention, num_classes, input_shape, stem=Stem.IMAGENET)


def resnet32_cifar_spec(attention='none', num_classes=10, input_shape=(3, 32, 32)):
    return ArchSpec(BlockType.RESNET_BASIC, [(16, 5, 1), (32, 5, 2), (64, 5, 2)],
                    attention, num_classes, input_shape, shortcut=Shortcut.ZERO_PAD)


def plain_spec(attention='none', num_classes=2, input_shape=(3, 16, 16), channels=(8, 16)):
    stages = [(c, 1, 1 if i == 0 else 2) for i, c in enumerate(channels)]
    return ArchSpec(BlockType.PLAIN, stages, attention, num_classes, input_shape)


PRESETS = {
    'resnet50': resnet50_spec,
    'resnet18': resnet18_spec,
    'resnet32': resnet32_cifar_spec,
    'plain': plain_spec,
}
