# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Attention modules: triplet attention, CBAM and squeeze-excitation."""

import dataclasses
from typing import Optional

from torch import nn

from common import AttentionType, ConfigurationError, RotationVariant, parse_enum
from nn_ops import BatchNorm2d, Conv2d, Mlp2, gap, gmp, sigmoid, zpool
from tensor_core import Tensor4, add, flip, inverse_permutation, mul, permute, scale

DEFAULT_KERNEL_SIZE = 7
DEFAULT_REDUCTION = 16

# gate attribute, axis permutation, axis holding C once permuted
ROTATED_BRANCHES = (
    ('gate_cw', (3, 2, 1), 3),
    ('gate_ch', (2, 1, 3), 2),
)


def check_kernel_size(k):
    if not isinstance(k, int) or isinstance(k, bool) or k < 1 or k % 2 == 0:
        raise ConfigurationError('kernel size must be an odd positive integer, got %r' % (k,))
    return k


def _reject_unknown(data, allowed, what):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigurationError('unknown %s keys: %s' % (what, ', '.join(unknown)))


@dataclasses.dataclass(frozen=True)
class TripletAttentionConfig:
    k: int = DEFAULT_KERNEL_SIZE
    branch_channel_enabled: bool = True
    branch_spatial_enabled: bool = True
    rotation_variant: RotationVariant = RotationVariant.TRANSPOSE

    def __post_init__(self):
        check_kernel_size(self.k)
        object.__setattr__(self, 'rotation_variant',
                           parse_enum(RotationVariant, self.rotation_variant, 'rotation variant'))
        if not (self.branch_channel_enabled or self.branch_spatial_enabled):
            raise ConfigurationError('triplet attention needs at least one enabled branch')

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(data, [f.name for f in dataclasses.fields(cls)], 'triplet attention config')
        return cls(**data)

    @property
    def gate_count(self):
        return 2 * int(self.branch_channel_enabled) + int(self.branch_spatial_enabled)


@dataclasses.dataclass(frozen=True)
class AttentionSpec:
    """Which attention module a block carries, with its hyperparameters."""
    type: AttentionType = AttentionType.NONE
    k: int = DEFAULT_KERNEL_SIZE
    r: int = DEFAULT_REDUCTION
    branch_channel_enabled: bool = True
    branch_spatial_enabled: bool = True
    rotation_variant: RotationVariant = RotationVariant.TRANSPOSE

    def __post_init__(self):
        object.__setattr__(self, 'type', parse_enum(AttentionType, self.type, 'attention type'))
        object.__setattr__(self, 'rotation_variant',
                           parse_enum(RotationVariant, self.rotation_variant, 'rotation variant'))
        check_kernel_size(self.k)
        if not isinstance(self.r, int) or self.r < 1:
            raise ConfigurationError('reduction ratio must be a positive integer, got %r' % (self.r,))
        if self.type == AttentionType.TRIPLET:
            self.triplet_config()

    @classmethod
    def from_value(cls, value):
        """Accepts a bare type name or an object with the field names above."""
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls(type=value)
        if isinstance(value, dict):
            _reject_unknown(value, [f.name for f in dataclasses.fields(cls)], 'attention')
            if 'type' not in value:
                raise ConfigurationError('attention object needs a "type"')
            return cls(**value)
        raise ConfigurationError('attention must be a string or an object, got %r' % (value,))

    def to_value(self):
        if self == AttentionSpec(type=self.type):
            return self.type.value
        data = dataclasses.asdict(self)
        data['type'] = self.type.value
        data['rotation_variant'] = self.rotation_variant.value
        return data

    def triplet_config(self):
        return TripletAttentionConfig(k=self.k,
                                      branch_channel_enabled=self.branch_channel_enabled,
                                      branch_spatial_enabled=self.branch_spatial_enabled,
                                      rotation_variant=self.rotation_variant)

    def build(self, channels, generator=None, device=None) -> Optional[nn.Module]:
        if self.type == AttentionType.NONE:
            return None
        if self.type == AttentionType.SE:
            return SqueezeExcitation(channels, self.r, generator=generator, device=device)
        if self.type == AttentionType.CBAM:
            return Cbam(channels, self.r, self.k, generator=generator, device=device)
        return TripletAttention(self.triplet_config(), generator=generator, device=device)


class AttentionGate(nn.Module):
    """Z-pool, k x k conv to one channel, batch norm, sigmoid."""

    def __init__(self, kernel_size=DEFAULT_KERNEL_SIZE, generator=None, device=None):
        super().__init__()
        check_kernel_size(kernel_size)
        self.kernel_size = kernel_size
        self.conv = Conv2d(2, 1, kernel_size, bias=False, generator=generator, device=device)
        self.bn = BatchNorm2d(1, device=device)

    def forward(self, t):
        return gate_forward(t, self)


class TripletAttention(nn.Module):
    """Three-branch attention; disabled branches own no gate."""

    def __init__(self, config=None, generator=None, device=None):
        super().__init__()
        self.config = TripletAttentionConfig() if config is None else config
        k = self.config.k
        self.gate_cw = AttentionGate(k, generator, device) if self.config.branch_channel_enabled else None
        self.gate_ch = AttentionGate(k, generator, device) if self.config.branch_channel_enabled else None
        self.gate_hw = AttentionGate(k, generator, device) if self.config.branch_spatial_enabled else None

    def forward(self, x):
        return triplet_forward(x, self)

    def extra_repr(self):
        return 'k=%d, gates=%d, rotation=%s' % (self.config.k, self.config.gate_count,
                                                self.config.rotation_variant.value)


class Cbam(nn.Module):

    def __init__(self, channels, reduction=DEFAULT_REDUCTION, kernel_size=DEFAULT_KERNEL_SIZE,
                 generator=None, device=None):
        super().__init__()
        self.mlp = Mlp2(channels, reduction, generator=generator, device=device)
        self.spatial = AttentionGate(kernel_size, generator, device)

    def forward(self, x):
        return cbam_forward(x, self)


class SqueezeExcitation(nn.Module):

    def __init__(self, channels, reduction=DEFAULT_REDUCTION, generator=None, device=None):
        super().__init__()
        self.mlp = Mlp2(channels, reduction, generator=generator, device=device)

    def forward(self, x):
        return se_forward(x, self)


def gate_forward(t: Tensor4, g: AttentionGate) -> Tensor4:
    return sigmoid(g.bn(g.conv(zpool(t))))


def rotated_branch(x: Tensor4, gate: AttentionGate, perm, channel_axis, with_flip=False) -> Tensor4:
    """Gates x after moving C into a spatial position, then restores the layout."""
    t = permute(x, perm)
    if with_flip:
        t = flip(t, channel_axis)
    y = mul(t, gate_forward(t, gate))
    if with_flip:
        y = flip(y, channel_axis)
    return permute(y, inverse_permutation(perm))


def spatial_branch(x: Tensor4, gate: AttentionGate) -> Tensor4:
    return mul(x, gate_forward(x, gate))


def triplet_forward(x: Tensor4, s: TripletAttention) -> Tensor4:
    config = s.config
    with_flip = config.rotation_variant == RotationVariant.TRANSPOSE_WITH_FLIP
    outputs = []
    if config.branch_channel_enabled:
        for attr, perm, channel_axis in ROTATED_BRANCHES:
            outputs.append(rotated_branch(x, getattr(s, attr), perm, channel_axis, with_flip))
    if config.branch_spatial_enabled:
        outputs.append(spatial_branch(x, s.gate_hw))
    y = outputs[0]
    for branch in outputs[1:]:
        y = add(y, branch)
    return scale(y, 1.0 / len(outputs))


def cbam_channel_forward(x: Tensor4, s: Cbam) -> Tensor4:
    """Channel weights from a shared MLP over average- and max-pooled features."""
    return sigmoid(add(s.mlp(gap(x)), s.mlp(gmp(x))))


def cbam_forward(x: Tensor4, s: Cbam) -> Tensor4:
    y = mul(x, cbam_channel_forward(x, s))
    return mul(y, gate_forward(y, s.spatial))


def se_forward(x: Tensor4, s: SqueezeExcitation) -> Tensor4:
    return mul(x, sigmoid(s.mlp(gap(x))))
